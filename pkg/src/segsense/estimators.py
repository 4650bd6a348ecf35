"""scikit-learn estimator wrappers around the fitting core.

These exist so the two fitted models compose with the wider ecosystem
(pipelines, cross-validation, ``clone``); the underlying math lives in
``segsense.fitting``.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from segsense.fitting import Trace, eval_exponential, eval_surface, fit_exponential, fit_surface


def _as_epoch_vector(X):
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"expected epochs of shape (n,) or (n, 1), got {arr.shape}")
    return arr


class ExponentialSaturationModel(BaseEstimator, RegressorMixin):
    """Regressor form of the exponential saturation curve.

    fit(X, y) takes epoch indices X (shape (n,) or (n, 1)) and metric values
    y; fitted parameters land in a_, esr_ and c_, and predict(X) evaluates
    the curve.
    """

    def __init__(self, max_iter=500, step_tol=1e-10):
        self.max_iter = max_iter
        self.step_tol = step_tol

    def fit(self, X, y):
        epochs = _as_epoch_vector(X)
        result = fit_exponential(
            Trace(epochs=epochs, values=np.asarray(y, dtype=np.float64)),
            max_iter=self.max_iter,
            step_tol=self.step_tol,
        )
        self.result_ = result
        self.a_ = result.a
        self.esr_ = result.esr
        self.c_ = result.c
        self.residual_rms_ = result.residual_rms
        self.degenerate_ = result.degenerate
        return self

    def predict(self, X):
        if not hasattr(self, "result_"):
            raise RuntimeError("call fit before predict")
        return np.asarray(eval_exponential(self.result_, _as_epoch_vector(X)))


class ScalingSurfaceModel(BaseEstimator, RegressorMixin):
    """Regressor form of the bilinear scaling surface.

    fit(X, y) takes (ntrain, ntest) rows X of shape (n, 2) and metric values
    y; intercept_ holds p00 and coef_ holds (p10, p01).
    """

    def __init__(self, units="index"):
        self.units = units

    def fit(self, X, y):
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError(f"expected X of shape (n, 2), got {arr.shape}")
        values = np.asarray(y, dtype=np.float64)
        result = fit_surface(np.column_stack([arr, values]), units=self.units)
        self.result_ = result
        self.intercept_ = result.p00
        self.coef_ = np.array([result.p10, result.p01])
        self.residual_rms_ = result.residual_rms
        return self

    def predict(self, X):
        if not hasattr(self, "result_"):
            raise RuntimeError("call fit before predict")
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError(f"expected X of shape (n, 2), got {arr.shape}")
        return np.array([eval_surface(self.result_, ntr, nte) for ntr, nte in arr])
