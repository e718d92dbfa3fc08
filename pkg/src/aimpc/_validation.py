"""Input validation helpers shared by the estimators and solvers."""

import numpy as np


def check_finite_array(a, name, ndim=None, shape=None):
    """Return ``a`` as a float ndarray, rejecting NaN/inf and wrong shapes."""
    arr = np.asarray(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got ndim={arr.ndim}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be a finite positive number, got {value!r}")
    return value


def check_nonnegative(value, name):
    value = float(value)
    if not np.isfinite(value) or value < 0.0:
        raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
    return value


def check_simplex(w, name="weights", atol=1e-9):
    """Validate a nonnegative weight vector summing to one."""
    w = check_finite_array(w, name, ndim=1)
    if np.any(w < -atol):
        raise ValueError(f"{name} must be nonnegative, got {w.tolist()}")
    if abs(w.sum() - 1.0) > atol:
        raise ValueError(f"{name} must sum to 1, got sum={w.sum():.12g}")
    return w


def project_simplex(w):
    """Euclidean projection onto the probability simplex (sort-based)."""
    w = np.asarray(w, dtype=float)
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, w.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(w - theta, 0.0)
