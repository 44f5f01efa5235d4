"""Penalized spline bases used by the expected-deaths models."""

import numpy as np
from scipy.interpolate import BSpline


def bspline_basis(x, lo, hi, n_segments, degree=3):
    """Dense B-spline design matrix on equally spaced knots over ``[lo, hi]``.

    Returns an array of shape ``(len(x), n_segments + degree)``.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
        raise ValueError("x outside the basis domain")
    h = (hi - lo) / n_segments
    knots = lo + h * np.arange(-degree, n_segments + degree + 1)
    xc = np.clip(x, lo, hi)
    return BSpline.design_matrix(xc, knots, degree).toarray()


def difference_penalty(n, order=2):
    """``D^T D`` for the ``order``-th difference operator on ``n`` coefficients."""
    d = np.diff(np.eye(n), n=order, axis=0)
    return d.T @ d


def _cardinal_cubic(u):
    """Cubic B-spline on unit knot spacing, centred at 0 (support |u| < 2)."""
    a = np.abs(u)
    out = np.zeros_like(a)
    inner = a < 1
    outer = (a >= 1) & (a < 2)
    out[inner] = (4.0 - 6.0 * a[inner] ** 2 + 3.0 * a[inner] ** 3) / 6.0
    out[outer] = (2.0 - a[outer]) ** 3 / 6.0
    return out


def cyclic_bspline_basis(x, period, n_knots):
    """Cyclic cubic B-spline basis with ``n_knots`` equally spaced knots.

    Basis ``j`` is the cardinal cubic centred on ``j * period / n_knots``,
    wrapped modulo ``period``; values and all derivatives agree at 0 and
    ``period``.
    """
    if n_knots < 4:
        raise ValueError("cyclic cubic basis needs at least 4 knots")
    x = np.asarray(x, dtype=float)
    h = period / n_knots
    centres = h * np.arange(n_knots)
    d = (x[:, None] - centres[None, :]) % period
    d = np.where(d > period / 2, d - period, d)
    return _cardinal_cubic(d / h)


def cyclic_difference_penalty(n, order=2):
    """Circulant difference penalty; its null space is the constant vector."""
    eye = np.eye(n)
    d = eye
    for _ in range(order):
        d = np.roll(d, -1, axis=1) - d
    return d.T @ d


def sum_to_zero_reparam(B):
    """Null-space matrix ``Q`` with ``1^T B Q = 0`` (centering constraint).

    The constrained basis is ``B @ Q`` with one fewer column.
    """
    c = B.sum(axis=0)[:, None]
    q, _ = np.linalg.qr(c, mode="complete")
    return q[:, 1:]
