"""Standard normal CDF, log-CDF and density for Probit links.

Every function accepts scalars or arrays and rejects non-finite input.
The log-CDF is built on the scaled complementary error function
``erfcx(x) = exp(x**2) * erfc(x)`` so the lower tail never underflows:

    log Phi(z) = log(erfcx(-z / sqrt 2) / 2) - z**2 / 2      for z < 0
    log Phi(z) = log1p(-erfc(z / sqrt 2) / 2)                 for z >= 0
"""

from __future__ import annotations

import numpy as np
from scipy.special import erfc, erfcx

from .errors import DomainError

CDF_FLOOR = 1e-300
CDF_CEIL = 1.0 - 1e-16

_SQRT2 = np.sqrt(2.0)
_TINY = np.finfo(float).tiny
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def _finite(z):
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError("normal CDF argument must be finite")
    return z


def _out(x, like):
    return float(x) if np.ndim(like) == 0 else x


def phi_cdf(z):
    """Standard normal CDF, clamped to ``[CDF_FLOOR, CDF_CEIL]``."""
    zz = _finite(z)
    p = 0.5 * erfc(-zz / _SQRT2)
    return _out(np.clip(p, CDF_FLOOR, CDF_CEIL), z)


def log_phi_cdf(z):
    """``log Phi(z)`` accurate to ~1e-15 relative over the whole real line."""
    zz = _finite(z)
    return _out(_log_ndtr(zz), z)


def log_phi_ccdf(z):
    """``log(1 - Phi(z))``, defined as ``log_phi_cdf(-z)``."""
    zz = _finite(z)
    return _out(_log_ndtr(-zz), z)


def phi_pdf(z):
    """Standard normal density."""
    zz = _finite(z)
    return _out(np.exp(-0.5 * zz * zz - _LOG_SQRT_2PI), z)


def mills(z):
    """``phi(z) / Phi(z)`` without forming either factor; tends to ``-z`` as z -> -inf."""
    zz = _finite(z)
    with np.errstate(over="ignore"):
        return _out(_SQRT_2_OVER_PI / erfcx(-zz / _SQRT2), z)


def _log_ndtr(z: np.ndarray) -> np.ndarray:
    # unchecked kernel used by the vectorized likelihood paths
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    neg = z < 0
    zn = z[neg]
    out[neg] = np.log(0.5 * erfcx(-zn / _SQRT2)) - 0.5 * zn * zn
    zp = z[~neg]
    q = 0.5 * erfc(zp / _SQRT2)
    sub = q < _TINY
    if sub.any():
        # erfc flushes subnormal results to zero; rebuild them from the scaled form
        zs = zp[sub]
        q[sub] = np.exp(np.log(0.5 * erfcx(zs / _SQRT2)) - 0.5 * zs * zs)
    out[~neg] = np.log1p(-q)
    return out


def _mills(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return _SQRT_2_OVER_PI / erfcx(-np.asarray(z, dtype=float) / _SQRT2)


def _cdf(z: np.ndarray) -> np.ndarray:
    return np.clip(0.5 * erfc(-np.asarray(z, dtype=float) / _SQRT2), CDF_FLOOR, CDF_CEIL)
