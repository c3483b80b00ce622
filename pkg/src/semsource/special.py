"""Scalar special functions used by the matching statistics and IRSA approximation.

All functions accept scalars or numpy arrays and broadcast. Scalar inputs
return Python floats.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as sc

__all__ = [
    "reg_gamma_upper",
    "reg_gamma_lower",
    "marcum_q",
    "bessel_i",
    "log_bessel_i",
    "gaussian_q",
]

# Poisson-tail bound for the Marcum series; the neglected mass is at most this.
_MARCUM_TAIL = 1e-16
_BESSEL_REL_TOL = 1e-17


def _out(x):
    if np.ndim(x) == 0:
        return float(x)
    return x


def _check_gamma_args(s, x):
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise ValueError("shape parameter s must be finite and > 0")
    if np.any(np.isnan(x)) or np.any(x < 0):
        raise ValueError("x must be >= 0")
    return s, x


def reg_gamma_upper(s, x):
    """Regularized upper incomplete gamma function Γ(s, x) / Γ(s)."""
    s, x = _check_gamma_args(s, x)
    return _out(sc.gammaincc(s, x))


def reg_gamma_lower(s, x):
    """Regularized lower incomplete gamma function, ``1 - reg_gamma_upper``.

    Computed as the complement so the two always sum to exactly one.
    """
    return _out(1.0 - np.asarray(reg_gamma_upper(s, x)))


def gaussian_q(x):
    """Standard normal tail probability Pr(N(0, 1) > x)."""
    x = np.asarray(x, dtype=float)
    return _out(0.5 * sc.erfc(x / math.sqrt(2.0)))


def marcum_q(order, a, b):
    """Generalized Marcum Q-function Q_M(a, b).

    Evaluated as a Poisson(a²/2) mixture of regularized upper incomplete
    gamma functions, ``Σ_k Pois(k; a²/2) Γ(M+k, b²/2)/Γ(M+k)``. The series
    is truncated once the Poisson tail mass falls below 1e-16, which bounds
    the absolute truncation error because every gamma term is at most one.
    The gamma terms are advanced with the recurrence
    ``Q(s+1, x) = Q(s, x) + x^s e^{-x} / Γ(s+1)``.
    """
    order = np.asarray(order, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(~np.isfinite(order)) or np.any(order <= 0):
        raise ValueError("order must be finite and > 0")
    for name, v in (("a", a), ("b", b)):
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise ValueError(f"{name} must be finite and >= 0")

    order, a, b = np.broadcast_arrays(order, a, b)
    lam = 0.5 * a * a
    x = 0.5 * b * b

    lam_max = float(lam.max()) if lam.size else 0.0
    n_terms = _poisson_terms(lam_max)

    with np.errstate(divide="ignore", invalid="ignore"):
        log_lam = np.where(lam > 0, np.log(lam), -np.inf)
        log_x = np.where(x > 0, np.log(x), -np.inf)
    q = sc.gammaincc(order, x)
    total = np.zeros_like(q)
    has_lam = lam > 0
    has_x = x > 0
    log_w = -lam
    log_step = order * log_x - x - sc.gammaln(order + 1.0)
    for k in range(n_terms):
        if k > 0:
            log_w = log_w + log_lam - math.log(k)
        w = np.exp(log_w) if k > 0 else np.where(has_lam, np.exp(log_w), 1.0)
        if k > 0:
            w = np.where(has_lam, w, 0.0)
        total += w * q
        q = np.minimum(q + np.where(has_x, np.exp(log_step), 0.0), 1.0)
        log_step = log_step + log_x - np.log(order + k + 1.0)
    # Q_M(a, 0) = 1 exactly; the truncated sum would leave a ~1e-16 gap.
    total = np.where(x == 0, 1.0, total)
    return _out(np.clip(total, 0.0, 1.0))


def _poisson_terms(lam):
    """Number of Poisson terms needed so the neglected tail is below the bound."""
    k = int(math.ceil(lam + 10.0 * math.sqrt(lam) + 20.0))
    # Pr(Pois(lam) >= k) = P(k, lam) (regularized lower gamma).
    while lam > 0 and sc.gammainc(k, lam) > _MARCUM_TAIL:
        k += 10
    return k


def log_bessel_i(order, x):
    """Natural log of the modified Bessel function I_ν(x).

    Uses the ascending series ``I_ν(x) = (x/2)^ν Σ_k (x²/4)^k / (k! Γ(ν+k+1))``
    summed in the log domain, which is the scaled evaluation that keeps large
    arguments finite. Returns ``-inf`` where I_ν(x) = 0.
    """
    order = np.asarray(order, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(order)) or np.any(order < -1):
        raise ValueError("order must be finite and >= -1")
    if np.any(~np.isfinite(x)) or np.any(x < 0):
        raise ValueError("x must be finite and >= 0")
    order, x = np.broadcast_arrays(order, x)
    out = np.full(order.shape, -np.inf)

    zero = x == 0
    # I_ν(0) = 1 for ν = 0 and 0 for ν > 0; ν = -1 gives I_{-1} = I_1.
    out[zero & (order == 0)] = 0.0
    pos = ~zero
    if np.any(pos):
        nu = order[pos]
        xv = x[pos]
        out[pos] = _log_bessel_series(nu, xv)
    return _out(out)


def _log_bessel_series(nu, x):
    # Integer ν = -1 reduces to I_1; Γ(ν+k+1) has a pole at k=0 otherwise.
    nu = np.where(nu == -1, 1.0, nu)
    half = np.log(0.5 * x)
    t = 2.0 * half  # log(x²/4)
    # The largest term sits near k ≈ x/2, so go comfortably past it.
    xmax = float(np.max(x))
    n_terms = int(xmax / 2.0 + 12.0 * math.sqrt(xmax + 1.0) + 50.0)
    k = np.arange(n_terms, dtype=float)[:, None]
    log_terms = k * t[None, :] - sc.gammaln(k + 1.0) - sc.gammaln(nu[None, :] + k + 1.0)
    peak = log_terms.max(axis=0)
    tail = log_terms[-1] - peak
    if np.any(tail > math.log(_BESSEL_REL_TOL)):
        raise ArithmeticError("Bessel series did not converge")
    s = np.exp(log_terms - peak[None, :]).sum(axis=0)
    return nu * half + peak + np.log(s)


def bessel_i(order, x):
    """Modified Bessel function of the first kind I_ν(x) for real ν >= -1, x >= 0.

    Raises:
        OverflowError: the value exceeds the float range.
    """
    lv = np.asarray(log_bessel_i(order, x))
    if np.any(lv > np.log(np.finfo(float).max)):
        raise OverflowError("I_nu(x) exceeds the representable range")
    return _out(np.exp(lv))
