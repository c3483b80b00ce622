"""End-to-end Monte Carlo of query broadcast, matching, random access and fusion.

Every trial draws from its own generator ``default_rng([seed, trial])`` in a
fixed order: the scenario (classes, then features), per-device downlink
outage, per-device replica degrees and slot choices, then one uniform per
device used by the benchmark schemes. Slot choices are drawn for all devices
whether or not they end up transmitting, so the same trial can be replayed at
any number of thresholds (common random numbers) and any trial can be rerun
alone with :func:`run_trial`.

Trials are evaluated in fixed-size chunks and the per-chunk sums are added in
chunk order, so results do not depend on the number of worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .channel import (ChannelParams, DegreeDistribution, IrsaConstants, draw_slots,
                      irsa_error_prob_approx, peel_batch, sic_decode)
from .matching import (MatchParams, ThresholdSolution, end_to_end_md_fa, expected_tp,
                       golden_max, solve_threshold)
from .query import encode_key, encode_query, matching_score, optimal_projection
from .sensing import (fuse_features, map_classify, reference_model, relevancy_score,
                      sample_scenario)
from .special import reg_gamma_lower

CHUNK = 250
Z95 = 1.959963984540054
SCHEMES = ("proposed", "query_free", "perfect_matching")
AXES = ("tau", "gain", "p_pos", "query_dim")


@dataclass(frozen=True)
class ExperimentConfig:
    """Full protocol configuration.

    ``tau`` is a threshold in (0, 1] or ``"auto"`` for the analytic optimum.
    ``fusion_weights`` selects the server-side fusion weights: the relevancy
    score (default) or the matching score the device computed.
    """

    num_classes: int = 21
    feature_dim: int = 75
    target_gain: float = 40.0
    num_devices: int = 200
    p_pos: float = 0.1
    query_dim: int = 20
    p_err_dl: float = 0.1
    slots: int = 10
    degrees: DegreeDistribution = field(default_factory=DegreeDistribution.aloha)
    irsa_constants: IrsaConstants | None = None
    tau: float | str = "auto"
    trials: int = 10_000
    seed: int = 0
    fusion_weights: str = "relevancy"
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not self.target_gain >= 0:
            raise ValueError("target_gain must be >= 0")
        if self.num_devices < 1:
            raise ValueError("num_devices must be >= 1")
        for name in ("p_pos", "p_err_dl"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 1 <= self.query_dim <= self.feature_dim:
            raise ValueError("query_dim must lie in [1, feature_dim]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.tau != "auto":
            if isinstance(self.tau, str) or not 0.0 < float(self.tau) <= 1.0:
                raise ValueError("tau must lie in (0, 1] or be 'auto'")
        if self.fusion_weights not in ("relevancy", "matching"):
            raise ValueError("fusion_weights must be 'relevancy' or 'matching'")
        self.channel  # validates slots, degrees and IRSA constants

    @cached_property
    def model(self):
        return reference_model(self.num_classes, self.feature_dim, self.target_gain)

    @cached_property
    def projection(self):
        return optimal_projection(self.model, self.query_dim)

    @cached_property
    def match_params(self) -> MatchParams:
        return MatchParams.from_projection(self.projection, self.p_err_dl, self.p_pos,
                                           self.num_devices)

    @cached_property
    def channel(self) -> ChannelParams:
        return ChannelParams(self.p_err_dl, self.slots, self.degrees, self.irsa_constants)

    def solve(self) -> ThresholdSolution:
        return solve_threshold(self.match_params, self.channel)

    def resolve_tau(self):
        """(τ to use, solver output or None when τ is fixed)."""
        if self.tau == "auto":
            sol = self.solve()
            return sol.tau, sol
        return float(self.tau), None

    def with_axis(self, axis: str, value) -> "ExperimentConfig":
        if axis == "tau":
            return replace(self, tau=float(value))
        if axis == "gain":
            return replace(self, target_gain=float(value))
        if axis == "p_pos":
            return replace(self, p_pos=float(value))
        if axis == "query_dim":
            if float(value) != int(value):
                raise ValueError("query_dim values must be integers")
            return replace(self, query_dim=int(value))
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")

    def __getstate__(self):
        # Derived objects are rebuilt lazily in worker processes.
        keep = ("model", "projection", "match_params", "channel")
        return {k: v for k, v in self.__dict__.items() if k not in keep}

    def __setstate__(self, state):
        self.__dict__.update(state)


@dataclass(frozen=True)
class TrialOutcome:
    query_class: int
    device_classes: np.ndarray
    matched_set: frozenset
    transmitted_set: frozenset
    decoded_set: frozenset
    n_tp_received: int
    predicted_class: int | None
    md_events: int  # query-class devices whose observation was not received
    fa_events: int  # received observations of another class
    n_query_class: int

    @property
    def correct(self) -> bool:
        return self.predicted_class == self.query_class


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    acc_ci: float
    eps_md: float
    md_ci: float
    eps_fa: float
    fa_ci: float
    mean_n_tp: float
    ntp_ci: float
    trials: int
    md_trials: int  # trials with at least one query-class device
    fa_trials: int  # trials with a nonempty reception
    tau: float | None = None
    scheme: str = "proposed"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# Per-trial draws ------------------------------------------------------------

@dataclass
class _Draws:
    query_class: int
    classes: np.ndarray
    xq: np.ndarray
    xm: np.ndarray
    outage: np.ndarray
    picks: np.ndarray
    u: np.ndarray


def _draw_trial(cfg: ExperimentConfig, rng, dmax: int) -> _Draws:
    sc = sample_scenario(cfg.model, cfg.num_devices, cfg.p_pos, rng)
    m = cfg.num_devices
    outage = rng.random(m) < cfg.p_err_dl
    deg = cfg.degrees.sample(rng, m)
    picks = draw_slots(rng, deg, cfg.slots)
    if picks.shape[1] < dmax:
        pad = np.full((m, dmax - picks.shape[1]), -1, dtype=np.int64)
        picks = np.hstack([picks, pad])
    u = rng.random(m)
    return _Draws(sc.query_class, sc.device_classes, sc.query_feature,
                  sc.device_features, outage, picks, u)


def trial_rng(seed: int, trial: int):
    return np.random.default_rng([seed, trial])


def _admit(mode: str, param, tau, d: _Draws, scores):
    """Transmit mask for one trial and threshold."""
    ok = ~d.outage
    if mode == "proposed":
        return ok & (scores >= tau)
    if mode == "query_free":
        return ok & (d.u < param)
    if mode == "perfect_matching":
        return ok & (d.classes == d.query_class) & (d.u < param[tau])
    raise ValueError(f"unknown scheme {mode!r}")


def run_trial(config: ExperimentConfig, tau: float, rng, scheme: str = "proposed",
              scheme_param=None) -> TrialOutcome:
    """Simulate one protocol round, device by device.

    This is the reference path; bulk estimation uses a vectorized version of
    the same draws and must agree with it trial for trial.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    cfg = config
    d = _draw_trial(cfg, rng, cfg.degrees.max_degree)
    model, proj = cfg.model, cfg.projection
    q = encode_query(d.xq, proj, model)
    keys = encode_key(d.xm, proj, model)
    scores = np.asarray(matching_score(keys, q, cfg.feature_dim)).reshape(-1)
    param = _scheme_param(cfg, scheme, [tau]) if scheme_param is None else scheme_param
    tx = _admit(scheme, param, tau, d, scores)
    matched = frozenset(np.flatnonzero((~d.outage) & (scores >= tau)).tolist()) \
        if scheme == "proposed" else frozenset(np.flatnonzero(tx).tolist())
    transmitted = frozenset(np.flatnonzero(tx).tolist())
    placements = {int(u): [int(s) for s in d.picks[u] if s >= 0] for u in transmitted}
    decoded, _ = sic_decode(placements, cfg.slots)
    decoded = frozenset(decoded)
    pos = d.classes == d.query_class
    rec = np.zeros(cfg.num_devices, dtype=bool)
    rec[list(decoded)] = True
    predicted = None
    if decoded:
        idx = np.array(sorted(decoded))
        if cfg.fusion_weights == "relevancy":
            w = np.asarray(relevancy_score(d.xm[idx], d.xq, model)).reshape(-1)
        else:
            w = scores[idx]
        fused = fuse_features(d.xm[idx], w)
        predicted = map_classify(fused, w, model)
    return TrialOutcome(
        query_class=d.query_class, device_classes=d.classes, matched_set=matched,
        transmitted_set=transmitted, decoded_set=decoded,
        n_tp_received=int(np.count_nonzero(rec & pos)), predicted_class=predicted,
        md_events=int(np.count_nonzero(pos & ~rec)),
        fa_events=int(np.count_nonzero(rec & ~pos)),
        n_query_class=int(np.count_nonzero(pos)))


# Vectorized chunks ----------------------------------------------------------

# Columns of the per-threshold sum array.
_ACC, _MD, _MD2, _MDN, _FA, _FA2, _FAN, _NTP, _NTP2 = range(9)
_NSUM = 9


def _chunk_sums(cfg: ExperimentConfig, scheme: str, param, taus, start: int,
                stop: int) -> np.ndarray:
    model, proj = cfg.model, cfg.projection
    dmax = cfg.degrees.max_degree
    draws = [_draw_trial(cfg, trial_rng(cfg.seed, t), dmax) for t in range(start, stop)]
    zq = np.array([d.query_class for d in draws])
    classes = np.stack([d.classes for d in draws])
    xq = np.stack([d.xq for d in draws])
    xm = np.stack([d.xm for d in draws])
    outage = np.stack([d.outage for d in draws])
    picks = np.stack([d.picks for d in draws])
    u = np.stack([d.u for d in draws])

    q = encode_query(xq, proj, model)
    keys = encode_key(xm, proj, model)
    diff = keys - q[:, None, :]
    scores = np.exp(-np.sum(diff * diff, axis=-1) / cfg.feature_dim)
    if cfg.fusion_weights == "relevancy":
        weights = np.asarray(relevancy_score(xm, xq[:, None, :], model))
    else:
        weights = scores
    pos = classes == zq[:, None]
    n_pos = pos.sum(axis=1)
    has_pos = n_pos > 0
    ok = ~outage
    inv_sd = 1.0 / np.sqrt(model.cov_diag)
    cw = model.centroids * inv_sd

    out = np.zeros((len(taus), _NSUM))
    for k, tau in enumerate(taus):
        if scheme == "proposed":
            tx = ok & (scores >= tau)
        elif scheme == "query_free":
            tx = ok & (u < param)
        else:
            tx = ok & pos & (u < param[tau])
        rec = peel_batch(tx, picks, cfg.slots)
        n_rec = rec.sum(axis=1)
        ntp = (rec & pos).sum(axis=1)
        w = np.where(rec, weights, 0.0)
        wsum = w.sum(axis=1)
        got = n_rec > 0
        correct = np.zeros(len(draws), dtype=bool)
        if np.any(got):
            fused = np.einsum("bm,bmd->bd", w[got], xm[got]) / wsum[got, None]
            dist = np.sum((fused[:, None, :] * inv_sd - cw[None]) ** 2, axis=-1)
            correct[got] = np.argmin(dist, axis=1) == zq[got]
        md = np.where(has_pos, (n_pos - ntp) / np.maximum(n_pos, 1), 0.0)
        fa = np.where(got, (n_rec - ntp) / np.maximum(n_rec, 1), 0.0)
        out[k] = (correct.sum(), md.sum(), (md * md).sum(), has_pos.sum(), fa.sum(),
                  (fa * fa).sum(), got.sum(), ntp.sum(), (ntp * ntp).sum())
    return out


def _chunk_job(args):
    return _chunk_sums(*args)


def _half_width(s, s2, n):
    if n == 0:
        return math.nan
    mean = s / n
    var = max(s2 / n - mean * mean, 0.0)
    if n > 1:
        var *= n / (n - 1)
    return Z95 * math.sqrt(var / n)


def _report(sums, trials, tau, scheme) -> MetricsReport:
    acc = sums[_ACC] / trials
    md_n, fa_n = int(sums[_MDN]), int(sums[_FAN])
    return MetricsReport(
        accuracy=acc, acc_ci=_half_width(sums[_ACC], sums[_ACC], trials),
        eps_md=sums[_MD] / md_n if md_n else math.nan,
        md_ci=_half_width(sums[_MD], sums[_MD2], md_n),
        eps_fa=sums[_FA] / fa_n if fa_n else math.nan,
        fa_ci=_half_width(sums[_FA], sums[_FA2], fa_n),
        mean_n_tp=sums[_NTP] / trials,
        ntp_ci=_half_width(sums[_NTP], sums[_NTP2], trials),
        trials=trials, md_trials=md_n, fa_trials=fa_n,
        tau=None if tau is None else float(tau), scheme=scheme)


def _scheme_param(cfg: ExperimentConfig, scheme: str, taus):
    if scheme == "proposed":
        return None
    if scheme == "query_free":
        return query_free_probability(cfg.channel, cfg.num_devices)
    if scheme == "perfect_matching":
        return {float(t): perfect_match_probability(t, cfg.query_dim) for t in taus}
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def _simulate(cfg: ExperimentConfig, taus, trials: int, scheme: str = "proposed",
              workers: int = 1) -> list:
    taus = [float(t) for t in taus]
    for t in taus:
        if not 0.0 < t <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    param = _scheme_param(cfg, scheme, taus)
    jobs = [(cfg, scheme, param, taus, a, min(a + CHUNK, trials))
            for a in range(0, trials, CHUNK)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_chunk_job, jobs))
    else:
        parts = [_chunk_job(j) for j in jobs]
    total = np.zeros((len(taus), _NSUM))
    for p in parts:  # fixed order keeps the sums bit-identical
        total += p
    return [_report(total[k], trials, t, scheme) for k, t in enumerate(taus)]


def estimate_metrics(config: ExperimentConfig, tau=None, trials: int | None = None,
                     workers: int = 1) -> MetricsReport:
    """Monte Carlo accuracy, MD, FA and received true positives at one threshold."""
    if tau is None:
        tau, _ = config.resolve_tau()
    trials = config.trials if trials is None else trials
    return _simulate(config, [tau], trials, "proposed", workers)[0]


def estimate_metrics_grid(config: ExperimentConfig, taus, trials: int | None = None,
                          workers: int = 1, scheme: str = "proposed") -> list:
    """Metrics at several thresholds from the same simulated trials."""
    trials = config.trials if trials is None else trials
    return _simulate(config, taus, trials, scheme, workers)


# Benchmarks -----------------------------------------------------------------

def query_free_probability(channel: ChannelParams, num_devices: int) -> float:
    """Activation probability maximizing one device's chance of success.

    ALOHA: p (1 - p/L)^{M-1}, maximized at min(1, L/M). IRSA: p (1 - p_err(Mp))
    with the IRSA approximation, maximized numerically over Mp < L.
    """
    m, slots = num_devices, channel.slots
    if channel.is_aloha:
        return 1.0 if m <= 1 else min(1.0, slots / m)

    def f(p):
        lam = m * p
        if lam >= slots:
            return 0.0
        err = float(irsa_error_prob_approx(lam, slots, channel.degrees, channel.constants))
        return p * (1.0 - err)

    hi = min(1.0, slots / m)
    grid = np.linspace(0.0, hi, 401)
    vals = [f(p) for p in grid]
    k = int(np.argmax(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    x, fx, _ = golden_max(f, a, b, tol=1e-12)
    return float(x if fx >= vals[k] else grid[k])


def perfect_match_probability(tau: float, query_dim: int) -> float:
    """Closed-form chance that a query-class device passes matching at τ."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    return float(reg_gamma_lower(query_dim / 2.0, -query_dim * math.log(tau) / 4.0))


def baseline_query_free(config: ExperimentConfig, trials: int | None = None,
                        workers: int = 1) -> MetricsReport:
    trials = config.trials if trials is None else trials
    rep = _simulate(config, [1.0], trials, "query_free", workers)[0]
    return replace(rep, tau=None)


def baseline_perfect_matching(config: ExperimentConfig, trials: int | None, tau_grid,
                              workers: int = 1, criterion: str = "md") -> MetricsReport:
    """Oracle matching without false alarms, threshold picked by grid search.

    ``criterion`` is ``"md"`` (lowest ε_MD) or ``"accuracy"`` (highest accuracy).
    """
    tau_grid = list(tau_grid)
    if not tau_grid:
        raise ValueError("tau_grid must be nonempty")
    if criterion not in ("md", "accuracy"):
        raise ValueError("criterion must be 'md' or 'accuracy'")
    trials = config.trials if trials is None else trials
    reps = _simulate(config, tau_grid, trials, "perfect_matching", workers)
    if criterion == "md":
        key = [r.eps_md if not math.isnan(r.eps_md) else math.inf for r in reps]
        return reps[int(np.argmin(key))]
    return reps[int(np.argmax([r.accuracy for r in reps]))]


# Analytic overlays ------------------------------------------------------------

def analytic_point(cfg: ExperimentConfig, tau: float, scheme: str = "proposed") -> dict:
    """Closed-form ε_MD, ε_FA and E[N_TP] matching a simulated point."""
    ch = cfg.channel
    if scheme == "proposed":
        md, fa = end_to_end_md_fa(tau, cfg.match_params, ch)
        return {"analytic_md": float(md), "analytic_fa": float(fa),
                "analytic_entp": float(expected_tp(tau, cfg.match_params, ch))}
    m, p_dl = cfg.num_devices, cfg.p_err_dl
    if scheme == "query_free":
        p = query_free_probability(ch, m)
        lam_tp = m * cfg.p_pos * (1 - p_dl) * p
        lam = m * (1 - p_dl) * p
        md_match = 1.0 - (1 - p_dl) * p
        fa_match = (1 - p_dl) * p
    else:
        hit = perfect_match_probability(tau, cfg.query_dim)
        lam_tp = lam = m * cfg.p_pos * (1 - p_dl) * hit
        md_match = 1.0 - (1 - p_dl) * hit
        fa_match = 0.0
    p_ul = float(ch.uplink_error(lam))
    return {"analytic_md": md_match + p_ul * (1 - md_match),
            "analytic_fa": (1 - p_ul) * fa_match,
            "analytic_entp": lam_tp * (1 - p_ul)}


@dataclass(frozen=True)
class SweepRow:
    axis_value: float
    tau_used: float
    report: MetricsReport
    analytic: dict
    solution: ThresholdSolution | None = None

    def as_record(self) -> dict:
        r = self.report
        return {"axis_value": self.axis_value, "tau_used": self.tau_used,
                "accuracy": r.accuracy, "acc_ci": r.acc_ci, "eps_md": r.eps_md,
                "md_ci": r.md_ci, "eps_fa": r.eps_fa, "fa_ci": r.fa_ci,
                "mean_ntp": r.mean_n_tp, **self.analytic}


SWEEP_COLUMNS = ("axis_value", "tau_used", "accuracy", "acc_ci", "eps_md", "md_ci",
                 "eps_fa", "fa_ci", "mean_ntp", "analytic_md", "analytic_fa",
                 "analytic_entp")


def _check_axis_value(axis, v):
    if axis == "tau" and not 0.0 < v <= 1.0:
        raise ValueError(f"tau value {v} outside (0, 1]")
    if axis == "gain" and not v > 0:
        raise ValueError(f"gain value {v} must be > 0")
    if axis == "p_pos" and not 0.0 <= v <= 1.0:
        raise ValueError(f"p_pos value {v} outside [0, 1]")


def sweep(config: ExperimentConfig, axis: str, values, trials: int | None = None,
          workers: int = 1, scheme: str = "proposed", tau_grid=None) -> list:
    """Metrics and analytic overlays along one configuration axis.

    On the ``tau`` axis all points share the same simulated trials. On the
    other axes the threshold is the configured one, or the solver optimum
    when ``config.tau == "auto"``. The perfect-matching scheme picks its own
    threshold from ``tau_grid`` at each point.
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    values = [float(v) for v in values]
    if not values:
        raise ValueError("sweep needs at least one value")
    for v in values:
        _check_axis_value(axis, v)
    cfgs = [config.with_axis(axis, v) for v in values]  # validates every value first
    trials = config.trials if trials is None else trials
    rows = []
    if axis == "tau" and scheme == "proposed":
        reps = estimate_metrics_grid(config, values, trials, workers)
        for v, rep in zip(values, reps):
            rows.append(SweepRow(v, v, rep, analytic_point(config, v)))
        return rows
    for v, cfg in zip(values, cfgs):
        sol = None
        if scheme == "perfect_matching":
            grid = tau_grid if tau_grid is not None else default_tau_grid()
            if axis == "tau":
                grid = [v]
            rep = baseline_perfect_matching(cfg, trials, grid, workers)
            tau = rep.tau
        elif scheme == "query_free":
            rep = baseline_query_free(cfg, trials, workers)
            tau = math.nan
        else:
            tau, sol = cfg.resolve_tau()
            rep = estimate_metrics(cfg, tau, trials, workers)
        an = analytic_point(cfg, tau if scheme != "query_free" else 1.0, scheme)
        rows.append(SweepRow(v, tau, rep, an, sol))
    return rows


def default_tau_grid(points: int = 50) -> list:
    return [float(t) for t in np.linspace(0.02, 1.0, points)]


# Matching-score samples -------------------------------------------------------

def sample_match_scores(config: ExperimentConfig, n: int, seed: int,
                        chunk: int = 100_000):
    """Independent positive and negative matching scores from the GMM pipeline.

    Each positive sample pairs a fresh query with a device of the same class;
    each negative sample pairs it with a device of a uniformly drawn other
    class. Downlink outage is not applied.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    model, proj = config.model, config.projection
    z, d = model.num_classes, model.feature_dim
    sd = np.sqrt(model.cov_diag)
    rng = np.random.default_rng([seed, 0x5C0E])
    pos, neg = [], []
    for a in range(0, n, chunk):
        b = min(chunk, n - a)
        zq = rng.integers(z, size=b)
        other = rng.integers(z - 1, size=b)
        other = other + (other >= zq)
        x = rng.standard_normal((3, b, d)) * sd
        q = encode_query(model.centroids[zq] + x[0], proj, model)
        kp = encode_key(model.centroids[zq] + x[1], proj, model)
        kn = encode_key(model.centroids[other] + x[2], proj, model)
        pos.append(matching_score(kp, q, d))
        neg.append(matching_score(kn, q, d))
    return np.concatenate(pos), np.concatenate(neg)
