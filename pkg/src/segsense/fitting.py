"""Saturation-curve and scaling-surface fitting.

Two models cover how the indices behave in practice:

- an exponential saturation curve  p(ep) = a * exp(-esr * ep) + c  describing
  how an index converges over training epochs (esr is the saturation rate),
- a bilinear surface  p(ntr, nte) = p00 + p10*ntr + p01*nte  describing how
  an index scales with training- and testing-set size.

The exponential fit is a damped Gauss-Newton (Levenberg-Marquardt) iteration
with esr parametrized as exp(theta) so the rate stays nonnegative. The
surface fit is ordinary least squares.
"""

import math
from dataclasses import dataclass

import numpy as np

EXP_MAX_ITER = 500
EXP_STEP_TOL = 1e-10
ESR_FLOOR = 1e-6


class ExponentialFitError(RuntimeError):
    """Raised when the exponential fit fails to converge.

    The best parameters found so far are attached as ``.best``.
    """

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class Trace:
    """Metric values over strictly increasing epoch indices."""

    epochs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ep = np.asarray(self.epochs, dtype=np.float64)
        vals = np.asarray(self.values, dtype=np.float64)
        if ep.ndim != 1 or vals.ndim != 1 or len(ep) != len(vals):
            raise ValueError("trace needs matching 1D epoch and value arrays")
        if len(ep) == 0:
            raise ValueError("trace must contain at least one point")
        if np.any(np.diff(ep) <= 0):
            raise ValueError("trace epochs must be strictly increasing")
        if not (np.isfinite(ep).all() and np.isfinite(vals).all()):
            raise ValueError("trace points must be finite")
        ep.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "epochs", ep)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_points(cls, points):
        pts = sorted(points)
        return cls(
            epochs=np.array([p[0] for p in pts], dtype=np.float64),
            values=np.array([p[1] for p in pts], dtype=np.float64),
        )

    def __len__(self):
        return len(self.epochs)


@dataclass(frozen=True)
class ExpFit:
    """Fitted parameters of the exponential saturation curve."""

    a: float
    esr: float
    c: float
    residual_rms: float
    degenerate: bool = False

    def __post_init__(self):
        if self.esr < 0:
            raise ValueError(f"esr must be nonnegative, got {self.esr}")
        if self.residual_rms < 0:
            raise ValueError("residual_rms must be nonnegative")

    def to_json_dict(self):
        return {
            "kind": "exp",
            "a": self.a,
            "esr": self.esr,
            "c": self.c,
            "residual_rms": self.residual_rms,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_json_dict(cls, payload):
        if payload.get("kind") != "exp":
            raise ValueError(f"not an exponential fit payload: {payload.get('kind')!r}")
        return cls(
            a=float(payload["a"]),
            esr=float(payload["esr"]),
            c=float(payload["c"]),
            residual_rms=float(payload.get("residual_rms", 0.0)),
            degenerate=bool(payload.get("degenerate", False)),
        )


@dataclass(frozen=True)
class SurfaceFit:
    """Fitted bilinear surface with the axis units it was fitted in."""

    p00: float
    p10: float
    p01: float
    axis_units: str = "index"
    residual_rms: float = 0.0

    def __post_init__(self):
        if self.axis_units not in ("index", "images"):
            raise ValueError(f"axis_units must be 'index' or 'images', got {self.axis_units!r}")
        for name in ("p00", "p10", "p01"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def to_json_dict(self):
        return {
            "kind": "surface",
            "p00": self.p00,
            "p10": self.p10,
            "p01": self.p01,
            "units": self.axis_units,
            "residual_rms": self.residual_rms,
        }

    @classmethod
    def from_json_dict(cls, payload):
        if payload.get("kind") != "surface":
            raise ValueError(f"not a surface fit payload: {payload.get('kind')!r}")
        return cls(
            p00=float(payload["p00"]),
            p10=float(payload["p10"]),
            p01=float(payload["p01"]),
            axis_units=str(payload.get("units", "index")),
            residual_rms=float(payload.get("residual_rms", 0.0)),
        )


@dataclass(frozen=True)
class GridAxis:
    """Maps sweep axis indices 1..K to the actual image counts they denote."""

    counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if not counts:
            raise ValueError("axis needs at least one count")
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"axis counts must be strictly increasing, got {counts}")
        object.__setattr__(self, "counts", counts)

    def __len__(self):
        return len(self.counts)

    @property
    def indices(self):
        return tuple(range(1, len(self.counts) + 1))

    def count_at(self, index):
        """Actual image count at a 1-based axis index."""
        if not (1 <= index <= len(self.counts)):
            raise IndexError(f"axis index {index} outside 1..{len(self.counts)}")
        return self.counts[index - 1]

    def index_of(self, count):
        """1-based axis index of an exact image count."""
        try:
            return self.counts.index(count) + 1
        except ValueError:
            raise ValueError(f"count {count} is not on the axis {self.counts}") from None


# Image counts used by the reference experiment grid (training axis).
DEFAULT_TRAIN_AXIS = GridAxis((402, 801, 1229, 1519, 1879, 2296, 2739, 3230))


def eval_exponential(fit, ep):
    """Evaluate a * exp(-esr * ep) + c at epoch(s) ep >= 0."""
    ep_arr = np.asarray(ep, dtype=np.float64)
    if np.any(ep_arr < 0):
        raise ValueError("epoch must be nonnegative")
    out = fit.a * np.exp(-fit.esr * ep_arr) + fit.c
    return float(out) if np.isscalar(ep) or ep_arr.ndim == 0 else out


def _exp_residual_rms(epochs, values, a, esr, c):
    r = values - (a * np.exp(-esr * epochs) + c)
    return float(np.sqrt(np.mean(r ** 2)))


def _initial_guess(epochs, values):
    c0 = float(values[-1])
    a0 = float(values[0]) - c0
    # log-linear slope of |p - c0| over the first half gives the decay rate
    half = max(2, len(values) // 2)
    gap = np.abs(values[:half] - c0)
    usable = gap > 0
    esr0 = ESR_FLOOR
    if np.count_nonzero(usable) >= 2:
        slope = np.polyfit(epochs[:half][usable], np.log(gap[usable]), 1)[0]
        esr0 = max(-float(slope), ESR_FLOOR)
    return a0, esr0, c0


def fit_exponential(trace, max_iter=EXP_MAX_ITER, step_tol=EXP_STEP_TOL):
    """Least-squares fit of the exponential saturation curve to a trace.

    Runs damped Gauss-Newton steps on (a, log esr, c): the damping factor
    starts at 1e-3, grows x10 when a step is rejected and shrinks x0.1 when
    accepted, and iteration stops once the parameter step drops below
    step_tol. A constant trace short-circuits to a flagged degenerate fit;
    failing to meet step_tol within max_iter raises ExponentialFitError with
    the best parameters so far attached.
    """
    if len(trace) < 4:
        raise ValueError(f"exponential fit needs at least 4 points, got {len(trace)}")
    epochs, values = trace.epochs, trace.values

    if np.all(values == values[0]):
        return ExpFit(a=0.0, esr=0.0, c=float(values[0]),
                      residual_rms=0.0, degenerate=True)

    a, esr0, c = _initial_guess(epochs, values)
    theta = math.log(esr0)
    lam = 1e-3

    def sse(a_, theta_, c_):
        if theta_ > 700.0:
            # exp(theta) would overflow; report an infinite SSE so the step is rejected
            return math.inf, None
        r = values - (a_ * np.exp(-math.exp(theta_) * epochs) + c_)
        return float(np.dot(r, r)), r

    current_sse, residual = sse(a, theta, c)
    for _ in range(max_iter):
        esr = math.exp(theta)
        decay = np.exp(-esr * epochs)
        jac = np.column_stack([decay, -a * esr * epochs * decay, np.ones_like(epochs)])
        jtj = jac.T @ jac
        jtr = jac.T @ residual
        damped = jtj + lam * (np.diag(np.diag(jtj)) + 1e-12 * np.eye(3))
        try:
            step = np.linalg.solve(damped, jtr)
        except np.linalg.LinAlgError as exc:
            best = ExpFit(a=a, esr=esr, c=c,
                          residual_rms=_exp_residual_rms(epochs, values, a, esr, c))
            raise ExponentialFitError(f"singular normal equations: {exc}", best) from exc

        if float(np.max(np.abs(step))) < step_tol:
            break
        trial = (a + step[0], theta + step[1], c + step[2])
        trial_sse, trial_residual = sse(*trial)
        if math.isfinite(trial_sse) and trial_sse < current_sse:
            a, theta, c = trial
            current_sse, residual = trial_sse, trial_residual
            lam *= 0.1
        else:
            lam *= 10.0
    else:
        esr = math.exp(theta)
        best = ExpFit(a=a, esr=esr, c=c,
                      residual_rms=_exp_residual_rms(epochs, values, a, esr, c))
        raise ExponentialFitError(
            f"no convergence within {max_iter} iterations (last step above {step_tol})",
            best,
        )

    esr = math.exp(theta)
    return ExpFit(a=float(a), esr=esr, c=float(c),
                  residual_rms=_exp_residual_rms(epochs, values, a, esr, c))


def fit_surface(samples, units="index"):
    """Ordinary least-squares plane p ~ p00 + p10*ntr + p01*nte.

    samples is an iterable of (ntr, nte, p) triples. The design must span
    both axes; a rank-deficient design raises ValueError naming the axis
    that does not vary (or the collinearity if both vary).
    """
    data = np.asarray(list(samples), dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != 3:
        raise ValueError("samples must be (ntr, nte, p) triples")
    if data.shape[0] < 3:
        raise ValueError(
            f"rank-deficient design: a plane needs at least 3 samples, got {data.shape[0]}"
        )
    ntr, nte, p = data[:, 0], data[:, 1], data[:, 2]

    if np.ptp(ntr) == 0 and np.ptp(nte) == 0:
        raise ValueError("rank-deficient design: N-Train and N-Test axes are both constant")
    if np.ptp(ntr) == 0:
        raise ValueError("rank-deficient design: N-Train axis is constant")
    if np.ptp(nte) == 0:
        raise ValueError("rank-deficient design: N-Test axis is constant")
    centered = np.column_stack([ntr - ntr.mean(), nte - nte.mean()])
    if np.linalg.matrix_rank(centered, tol=1e-10 * max(1.0, np.abs(centered).max())) < 2:
        raise ValueError("rank-deficient design: N-Train and N-Test axes are collinear")

    design = np.column_stack([np.ones_like(ntr), ntr, nte])
    coef, _, _, _ = np.linalg.lstsq(design, p, rcond=None)
    residual = p - design @ coef
    return SurfaceFit(
        p00=float(coef[0]),
        p10=float(coef[1]),
        p01=float(coef[2]),
        axis_units=units,
        residual_rms=float(np.sqrt(np.mean(residual ** 2))),
    )


def eval_surface(fit, ntrain, ntest, units=None):
    """Evaluate p00 + p10*ntrain + p01*ntest.

    Pass units to assert that the point is expressed on the same axis scale
    the surface was fitted in; a mismatch raises ValueError.
    """
    if units is not None and units != fit.axis_units:
        raise ValueError(
            f"unit mismatch: surface fitted in {fit.axis_units!r} units, "
            f"point given in {units!r}"
        )
    return fit.p00 + fit.p10 * ntrain + fit.p01 * ntest


def fit_from_json_dict(payload):
    """Parse a serialized fit of either kind."""
    kind = payload.get("kind")
    if kind == "exp":
        return ExpFit.from_json_dict(payload)
    if kind == "surface":
        return SurfaceFit.from_json_dict(payload)
    raise ValueError(f"unknown fit kind {kind!r}")
