"""Low-level numerical helpers shared by the kernels, engine and diagnostics.

Everything in here is either jitted with numba or a thin numpy wrapper.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from numba import njit

# Acklam's rational approximation for the standard normal quantile.
_A = np.array([-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
               1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00])
_B = np.array([-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
               6.680131188771972e01, -1.328068155288572e01])
_C = np.array([-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
               -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00])
_D = np.array([7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
               3.754408661907416e00])

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


@njit(cache=True, nogil=True)
def norm_cdf(z):
    return 0.5 * math.erfc(-z / _SQRT2)


@njit(cache=True, nogil=True)
def norm_sf(z):
    return 0.5 * math.erfc(z / _SQRT2)


@njit(cache=True, nogil=True)
def ndtri(p):
    """Inverse of the standard normal CDF (Acklam + one Halley refinement)."""
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    plow = 0.02425
    if p < plow:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= 1.0 - plow:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    # Halley step; the lower tail is refined on the cdf, the upper on the sf
    if p < 0.5:
        e = norm_cdf(x) - p
    else:
        e = -(norm_sf(x) - (1.0 - p))
    u = e * _SQRT2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@njit(cache=True, nogil=True)
def two_sum(a, b):
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return s, err


@njit(cache=True, nogil=True)
def neumaier_add(s, c, x):
    """One step of Neumaier summation; returns the updated (sum, compensation)."""
    t = s + x
    if abs(s) >= abs(x):
        c += (s - t) + x
    else:
        c += (x - t) + s
    return t, c


_SPLIT = 134217729.0  # 2**27 + 1


def two_product(a: float, b: float) -> tuple[float, float]:
    """Dekker's error-free product: a*b == p + e exactly."""
    p = a * b
    t = _SPLIT * a
    ahi = t - (t - a)
    alo = a - ahi
    t = _SPLIT * b
    bhi = t - (t - b)
    blo = b - bhi
    e = ((ahi * bhi - p) + ahi * blo + alo * bhi) + alo * blo
    return p, e


def weighted_fsum(weights, values) -> float:
    """Correctly rounded sum of ``w_i * v_i`` (products split error-free)."""
    parts = []
    for w, v in zip(weights, values):
        p, e = two_product(float(w), float(v))
        parts.append(p)
        parts.append(e)
    return math.fsum(parts)


@lru_cache(maxsize=16)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gl_interval(a: float, b: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = gauss_legendre(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def ols_slope(x, y, sigma=None) -> tuple[float, float, float]:
    """Weighted least-squares line fit; returns (slope, intercept, slope standard error).

    With ``sigma`` the fit is weighted by ``1/sigma**2`` and the slope error is the
    propagated one; without it the residual scatter is used.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if sigma is None:
        w = np.ones_like(x)
    else:
        w = 1.0 / np.asarray(sigma, dtype=float) ** 2
    sw = w.sum()
    xm = (w * x).sum() / sw
    ym = (w * y).sum() / sw
    sxx = (w * (x - xm) ** 2).sum()
    slope = (w * (x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    if sigma is None:
        dof = max(len(x) - 2, 1)
        resid = y - intercept - slope * x
        s2 = (resid ** 2).sum() / dof
        se = math.sqrt(s2 / sxx)
    else:
        se = math.sqrt(1.0 / sxx)
    return float(slope), float(intercept), float(se)
