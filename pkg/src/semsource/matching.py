"""Matching statistics, transmission rates, and matching-threshold optimization.

Per-device probabilities of missed detection (MD) and false alarm (FA) in the
matching stage have closed forms under the GMM: a central chi-square tail for
query-class devices and an average of Marcum Q-functions over class pairs for
the rest. Under a Poisson model of the uplink traffic these give the expected
number of received true positives, which the solvers maximize over τ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelParams
from .special import log_bessel_i, marcum_q, reg_gamma_lower

TAU_MIN = 1e-6
ROOT_TOL = 1e-9  # |ψ| <= ROOT_TOL * L at the returned root


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def _check_tau(tau):
    t = np.asarray(tau, dtype=float)
    if np.any(~(t > 0)) or np.any(t > 1):
        raise ValueError("tau must lie in (0, 1]")
    return t


def tau_tilde(tau, query_dim: int):
    """l·ln(1/τ)."""
    t = _check_tau(tau)
    return -query_dim * np.log(t)


@dataclass(frozen=True)
class EmpiricalCurves:
    """Empirical matching-score distributions for positive and negative pairs.

    Matching uses ``score >= tau``, so the conditional MD rate at τ is the
    fraction of positive scores strictly below τ and the conditional FA rate
    the fraction of negative scores at or above τ.
    """

    positive: np.ndarray
    negative: np.ndarray
    p_err_dl: float = 0.0

    def __post_init__(self):
        pos = np.sort(np.asarray(self.positive, dtype=float).ravel())
        neg = np.sort(np.asarray(self.negative, dtype=float).ravel())
        if pos.size == 0 or neg.size == 0:
            raise ValueError("both positive and negative score samples are required")
        if not 0.0 <= self.p_err_dl <= 1.0:
            raise ValueError("p_err_dl must lie in [0, 1]")
        pos.setflags(write=False)
        neg.setflags(write=False)
        object.__setattr__(self, "positive", pos)
        object.__setattr__(self, "negative", neg)

    def cdf_positive(self, t):
        return _scalar(np.searchsorted(self.positive, t, side="right") / self.positive.size)

    def cdf_negative(self, t):
        return _scalar(np.searchsorted(self.negative, t, side="right") / self.negative.size)

    def md_conditional(self, tau):
        return _scalar(np.searchsorted(self.positive, tau, side="left") / self.positive.size)

    def fa_conditional(self, tau):
        below = np.searchsorted(self.negative, tau, side="left")
        return _scalar(1.0 - below / self.negative.size)

    def md_match(self, tau):
        p = self.p_err_dl
        return _scalar(p + (1.0 - p) * np.asarray(self.md_conditional(tau)))

    def fa_match(self, tau):
        return _scalar((1.0 - self.p_err_dl) * np.asarray(self.fa_conditional(tau)))


def calibrate_empirical(positive_scores, negative_scores, p_err_dl: float) -> EmpiricalCurves:
    return EmpiricalCurves(positive_scores, negative_scores, p_err_dl)


def load_score_file(path):
    """Read a two-column ``score label`` file (label is ``pos`` or ``neg``).

    Columns may be separated by whitespace or a comma; blank lines, ``#``
    comments and a ``score,label`` header are skipped.
    """
    pos, neg = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected two columns")
            if parts[0].lower() == "score":
                continue
            try:
                score = float(parts[0])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad score {parts[0]!r}") from None
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"{path}:{lineno}: score must lie in [0, 1]")
            label = parts[1].lower()
            if label == "pos":
                pos.append(score)
            elif label == "neg":
                neg.append(score)
            else:
                raise ValueError(f"{path}:{lineno}: label must be 'pos' or 'neg'")
    return np.array(pos), np.array(neg)


@dataclass(frozen=True)
class MatchParams:
    """Inputs to the matching statistics.

    ``gains`` is the matrix of pairwise discriminant gains under the active
    projection. When ``curves`` is given, the matching-stage MD/FA come from
    the empirical distributions instead of the GMM closed forms.
    """

    query_dim: int
    num_classes: int
    gains: np.ndarray
    p_err_dl: float
    p_pos: float
    num_devices: int
    curves: EmpiricalCurves | None = None
    _pair_gains: np.ndarray = field(init=False, repr=False, compare=False)
    _pair_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.query_dim < 1:
            raise ValueError("query_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for name in ("p_err_dl", "p_pos"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.num_devices < 0:
            raise ValueError("num_devices must be >= 0")
        g = np.array(self.gains, dtype=float)
        z = self.num_classes
        if g.shape != (z, z):
            raise ValueError("gains must be a num_classes x num_classes matrix")
        if np.any(g < 0) or not np.allclose(g, g.T, rtol=0, atol=1e-12):
            raise ValueError("gains must be symmetric and nonnegative")
        if self.curves is not None and self.curves.p_err_dl != self.p_err_dl:
            raise ValueError("empirical curves were folded with a different p_err_dl")
        g.setflags(write=False)
        object.__setattr__(self, "gains", g)
        upper = g[np.triu_indices(z, k=1)]
        vals, counts = np.unique(upper, return_counts=True)
        object.__setattr__(self, "_pair_gains", vals)
        object.__setattr__(self, "_pair_weights", counts / upper.size)

    @classmethod
    def from_projection(cls, projection, p_err_dl: float, p_pos: float,
                        num_devices: int) -> "MatchParams":
        return cls(projection.query_dim, projection.gains.shape[0], projection.gains,
                   p_err_dl, p_pos, num_devices)

    def with_curves(self, curves: EmpiricalCurves) -> "MatchParams":
        return replace(self, curves=curves)


def md_match_prob(tau, params: MatchParams):
    """Per-device MD probability of the matching stage (downlink outage included)."""
    if params.curves is not None:
        _check_tau(tau)
        return params.curves.md_match(tau)
    l = params.query_dim
    tt = tau_tilde(tau, l)
    hit = reg_gamma_lower(l / 2.0, tt / 4.0)
    return _scalar(1.0 - (1.0 - params.p_err_dl) * np.asarray(hit))


def fa_match_prob(tau, params: MatchParams):
    """Per-device FA probability of the matching stage (downlink outage included)."""
    if params.curves is not None:
        _check_tau(tau)
        return params.curves.fa_match(tau)
    l = params.query_dim
    tt = np.asarray(tau_tilde(tau, l))
    b = np.sqrt(tt / 2.0)[..., None]
    a = np.sqrt(params._pair_gains / 2.0)
    q = np.asarray(marcum_q(l / 2.0, a, b))
    miss = (1.0 - q) @ params._pair_weights  # exact 0 where every Q is 1
    return _scalar((1.0 - params.p_err_dl) * miss)


def tx_rates(tau, params: MatchParams):
    """Poisson rates (λ_TP, λ_FA) of true-positive and false-alarm transmissions."""
    md = np.asarray(md_match_prob(tau, params))
    fa = np.asarray(fa_match_prob(tau, params))
    lam_tp = params.num_devices * params.p_pos * (1.0 - md)
    lam_fa = params.num_devices * (1.0 - params.p_pos) * fa
    return _scalar(lam_tp), _scalar(lam_fa)


def uplink_error(tau, params: MatchParams, channel: ChannelParams):
    lam_tp, lam_fa = tx_rates(tau, params)
    return channel.uplink_error(np.asarray(lam_tp) + np.asarray(lam_fa))


def expected_tp(tau, params: MatchParams, channel: ChannelParams):
    """Expected number of received true positives, λ_TP (1 - p_err^ul).

    Zero for IRSA once the total rate reaches the frame length.
    """
    lam_tp, lam_fa = tx_rates(tau, params)
    p_ul = channel.uplink_error(np.asarray(lam_tp) + np.asarray(lam_fa))
    return _scalar(np.asarray(lam_tp) * (1.0 - np.asarray(p_ul)))


def end_to_end_md_fa(tau, params: MatchParams, channel: ChannelParams):
    """Approximate (ε_MD, ε_FA) after matching and the uplink."""
    md = np.asarray(md_match_prob(tau, params))
    fa = np.asarray(fa_match_prob(tau, params))
    p_ul = np.asarray(uplink_error(tau, params, channel))
    eps_md = md + p_ul * (1.0 - md)
    eps_fa = (1.0 - p_ul) * fa
    return _scalar(eps_md), _scalar(eps_fa)


def _fa_density_ratio(g, params: MatchParams):
    """Mean over class pairs of f_nc(g/2; l, G/2) / f_c(g/2; l).

    Ratio of the noncentral to central chi-square densities at the matching
    boundary, which is also λ_FA'(τ) / λ_TP'(τ) · p_pos / (1 - p_pos). Pairs
    with G = 0 contribute exactly 1.
    """
    g = np.asarray(g, dtype=float)
    l = params.query_dim
    nu = l / 2.0 - 1.0
    gains = params._pair_gains
    weights = params._pair_weights
    out = np.zeros(g.shape)
    pos_g = g > 0
    gg = g[pos_g][:, None]
    ratio = np.ones((gg.shape[0], gains.size))
    nz = gains > 0
    if np.any(nz):
        G = gains[nz][None, :]
        x = 0.5 * np.sqrt(G * gg)
        log_r = (math.lgamma(l / 2.0) + (l - 2.0) * math.log(2.0)
                 + (0.5 - l / 4.0) * (np.log(gg) + np.log(G)) - G / 4.0
                 + np.asarray(log_bessel_i(nu, x)))
        ratio[:, nz] = np.exp(log_r)
    out[pos_g] = ratio @ weights
    return out


def psi(tau, params: MatchParams, slots: int):
    """Optimality residual of the ALOHA expected-true-positive objective.

    ψ(τ) = L - M (1 - p_dl) P(l/2, τ̃/4) (p_pos + (1 - p_pos) R(τ̃)), where P is
    the regularized lower incomplete gamma function and R the pairwise-mean
    density ratio. ψ is increasing in τ, equals L at τ = 1, and its root is
    the maximizer of λ_TP e^{-λ/L}.
    """
    if params.curves is not None:
        raise ValueError("psi needs the closed-form matching model")
    l = params.query_dim
    g = np.asarray(tau_tilde(tau, l))
    lower = np.asarray(reg_gamma_lower(l / 2.0, g / 4.0))
    r = _fa_density_ratio(g, params)
    m = params.num_devices * (1.0 - params.p_err_dl)
    val = slots - m * lower * (params.p_pos + (1.0 - params.p_pos) * r)
    val = np.where(g == 0, float(slots), val)
    if np.any(~np.isfinite(val)):
        raise OverflowError("psi evaluation overflowed")
    return _scalar(val)


@dataclass(frozen=True)
class ThresholdSolution:
    tau: float
    expected_tp: float
    lambda_tp: float
    lambda_fa: float
    p_err_ul: float
    solver: str  # "aloha_root" | "irsa_multistart" | "grid"
    iterations: int
    residual: float
    boundary: bool = False
    tau_lb: float | None = None

    @property
    def total_rate(self) -> float:
        return self.lambda_tp + self.lambda_fa

    def to_dict(self) -> dict:
        return {
            "tau": self.tau, "expected_tp": self.expected_tp,
            "lambda_tp": self.lambda_tp, "lambda_fa": self.lambda_fa,
            "lambda_total": self.total_rate, "p_err_ul": self.p_err_ul,
            "solver": self.solver, "iterations": self.iterations,
            "residual": self.residual, "boundary": self.boundary,
            "tau_lb": self.tau_lb,
        }


def _solution(tau, params, channel, solver, iterations, residual, boundary=False,
              tau_lb=None):
    lam_tp, lam_fa = tx_rates(tau, params)
    return ThresholdSolution(
        tau=float(tau), expected_tp=float(expected_tp(tau, params, channel)),
        lambda_tp=float(lam_tp), lambda_fa=float(lam_fa),
        p_err_ul=float(channel.uplink_error(lam_tp + lam_fa)), solver=solver,
        iterations=iterations, residual=float(residual), boundary=bool(boundary),
        tau_lb=tau_lb)


def solve_threshold_aloha(params: MatchParams, slots: int,
                          bracket=(TAU_MIN, 1.0), max_iter: int = 200) -> ThresholdSolution:
    """Unique root of ψ on the bracket by bisection.

    If ψ is already nonnegative at the lower end the objective is increasing
    towards τ → 0 and the lower end is returned with ``boundary=True``.
    """
    channel = ChannelParams(params.p_err_dl, slots)
    lo, hi = float(bracket[0]), float(bracket[1])
    if not 0 < lo < hi <= 1:
        raise ValueError("bracket must satisfy 0 < lo < hi <= 1")
    tol = ROOT_TOL * slots
    f_lo = psi(lo, params, slots)
    if f_lo >= 0:
        return _solution(lo, params, channel, "aloha_root", 0, f_lo, boundary=True)
    f_hi = psi(hi, params, slots)
    if f_hi <= 0:
        return _solution(hi, params, channel, "aloha_root", 0, f_hi, boundary=True)
    it = 0
    mid, f_mid = hi, f_hi
    while it < max_iter:
        it += 1
        mid = 0.5 * (lo + hi)
        f_mid = psi(mid, params, slots)
        if abs(f_mid) <= tol or mid in (lo, hi):
            break
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    return _solution(mid, params, channel, "aloha_root", it, f_mid)


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_max(f, a: float, b: float, tol: float = 1e-10, max_iter: int = 200):
    """Golden-section search for a maximum of ``f`` on [a, b].

    Returns (x, f(x), iterations); the end points are also considered.
    """
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while b - a > tol and it < max_iter:
        it += 1
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    cands = [(fc, c), (fd, d), (f(a), a), (f(b), b)]
    fx, x = max(cands)
    return x, fx, it


def total_rate(tau, params: MatchParams):
    lam_tp, lam_fa = tx_rates(tau, params)
    return _scalar(np.asarray(lam_tp) + np.asarray(lam_fa))


def rate_lower_bound(params: MatchParams, slots: int, tol: float = 1e-13) -> float:
    """Smallest τ with λ(τ) <= L (λ is nonincreasing in τ); TAU_MIN if none binds."""
    if total_rate(TAU_MIN, params) <= slots:
        return TAU_MIN
    lo, hi = TAU_MIN, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if total_rate(mid, params) <= slots:
            hi = mid
        else:
            lo = mid
    return hi


def _objective(params, channel):
    def f(t):
        return float(expected_tp(t, params, channel))
    return f


def solve_threshold_irsa(params: MatchParams, channel: ChannelParams,
                         starts: int = 10) -> ThresholdSolution:
    """Multistart golden-section maximization of λ_TP (1 - p_err^ul) s.t. λ < L.

    The starts are equally spaced over [τ_lb, 1]; each local search runs on the
    neighbouring sub-bracket of one start spacing on either side.
    """
    if starts < 1:
        raise ValueError("starts must be >= 1")
    tau_lb = rate_lower_bound(params, channel.slots)
    f = _objective(params, channel)
    grid = np.linspace(tau_lb, 1.0, starts)
    h = (1.0 - tau_lb) / max(starts - 1, 1)
    best = (-math.inf, tau_lb)
    total_it = 0
    for s in grid:
        a, b = max(tau_lb, s - h), min(1.0, s + h)
        x, fx, it = golden_max(f, a, b)
        total_it += it
        if fx > best[0]:
            best = (fx, x)
    return _solution(best[1], params, channel, "irsa_multistart", total_it, 0.0,
                     boundary=best[1] <= tau_lb, tau_lb=tau_lb)


def solve_threshold_grid(params: MatchParams, channel: ChannelParams,
                         points: int = 2001) -> ThresholdSolution:
    """Dense grid over [τ_lb, 1] refined by golden-section search.

    Used when the matching curves are empirical step functions.
    """
    tau_lb = rate_lower_bound(params, channel.slots)
    taus = np.linspace(tau_lb, 1.0, points)
    vals = np.asarray(expected_tp(taus, params, channel))
    k = int(np.argmax(vals))
    a = taus[max(k - 1, 0)]
    b = taus[min(k + 1, points - 1)]
    x, fx, it = golden_max(_objective(params, channel), a, b)
    if vals[k] >= fx:
        x = taus[k]
    return _solution(x, params, channel, "grid", it, 0.0, boundary=x <= tau_lb,
                     tau_lb=tau_lb)


def solve_threshold(params: MatchParams, channel: ChannelParams) -> ThresholdSolution:
    """Pick the solver that fits the matching model and uplink."""
    if params.curves is not None:
        return solve_threshold_grid(params, channel)
    if channel.is_aloha:
        return solve_threshold_aloha(params, channel.slots)
    return solve_threshold_irsa(params, channel)
