import math
import pickle
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from semsource.channel import ChannelParams, DegreeDistribution
from semsource.experiment import (ExperimentConfig, _chunk_sums, analytic_point,
                                  baseline_perfect_matching, baseline_query_free,
                                  default_tau_grid, estimate_metrics, estimate_metrics_grid,
                                  query_free_probability, run_trial, sample_match_scores,
                                  sweep, trial_rng)
from semsource.matching import TAU_MIN
from semsource.sensing import map_classify

CFG = ExperimentConfig(trials=400, seed=11)
IRSA_CFG = replace(CFG, degrees=DegreeDistribution.regular(3))


def aggregate_run_trial(cfg, tau, trials, scheme="proposed", param=None):
    acc = md = fa = ntp = 0.0
    md_n = fa_n = 0
    for t in range(trials):
        o = run_trial(cfg, tau, trial_rng(cfg.seed, t), scheme, param)
        assert o.decoded_set <= o.transmitted_set <= o.matched_set
        acc += o.correct
        ntp += o.n_tp_received
        if o.n_query_class:
            md += o.md_events / o.n_query_class
            md_n += 1
        if o.decoded_set:
            fa += o.fa_events / len(o.decoded_set)
            fa_n += 1
    return acc, md, md_n, fa, fa_n, ntp


@pytest.mark.parametrize("cfg", [CFG, IRSA_CFG, replace(CFG, fusion_weights="matching")])
def test_reference_trial_matches_vectorized(cfg):
    tau, n = 0.2, 120
    acc, md, md_n, fa, fa_n, ntp = aggregate_run_trial(cfg, tau, n)
    s = _chunk_sums(cfg, "proposed", None, [tau], 0, n)[0]
    assert s[0] == acc and s[3] == md_n and s[6] == fa_n and s[7] == ntp
    assert s[1] == pytest.approx(md, abs=1e-12) and s[4] == pytest.approx(fa, abs=1e-12)


def test_reference_trial_matches_vectorized_baselines():
    n = 80
    p = query_free_probability(CFG.channel, CFG.num_devices)
    acc, md, md_n, fa, fa_n, ntp = aggregate_run_trial(CFG, 1.0, n, "query_free", p)
    s = _chunk_sums(CFG, "query_free", p, [1.0], 0, n)[0]
    assert (s[0], s[3], s[6], s[7]) == (acc, md_n, fa_n, ntp)
    from semsource.experiment import perfect_match_probability
    param = {0.15: perfect_match_probability(0.15, 20)}
    acc, md, md_n, fa, fa_n, ntp = aggregate_run_trial(CFG, 0.15, n, "perfect_matching", param)
    s = _chunk_sums(CFG, "perfect_matching", param, [0.15], 0, n)[0]
    assert (s[0], s[3], s[6], s[7]) == (acc, md_n, fa_n, ntp)
    assert fa == 0.0


def test_tau_one_transmits_nothing():
    o = run_trial(CFG, 1.0, trial_rng(0, 0))
    assert o.transmitted_set == frozenset() and o.predicted_class is None and not o.correct
    r = estimate_metrics(CFG, 1.0, 50)
    assert r.eps_md == 1.0 and r.accuracy == 0.0 and r.fa_trials == 0 and math.isnan(r.eps_fa)


def test_single_device_degenerate_pipeline():
    cfg = ExperimentConfig(num_devices=1, p_pos=1.0, p_err_dl=0.0, slots=10, trials=20)
    for t in range(20):
        o = run_trial(cfg, TAU_MIN, trial_rng(3, t))
        assert o.decoded_set == {0}
        assert o.n_query_class == 1 and o.md_events == 0
    # fused feature is the device's own observation
    from semsource.experiment import _draw_trial
    d = _draw_trial(cfg, trial_rng(3, 5), 1)
    o = run_trial(cfg, TAU_MIN, trial_rng(3, 5))
    assert o.predicted_class == map_classify(d.xm[0], [1.0], cfg.model)


def test_invalid_tau():
    with pytest.raises(ValueError):
        run_trial(CFG, 0.0, trial_rng(0, 0))
    with pytest.raises(ValueError):
        estimate_metrics(CFG, 1.5, 10)


def test_seed_determinism_and_worker_independence():
    a = estimate_metrics(CFG, 0.2, 600)
    b = estimate_metrics(CFG, 0.2, 600)
    c = estimate_metrics(CFG, 0.2, 600, workers=2)
    assert a == b == c
    d = estimate_metrics(replace(CFG, seed=12), 0.2, 600)
    assert d != a


def test_grid_matches_single_threshold_runs():
    grid = estimate_metrics_grid(CFG, [0.15, 0.3], 300)
    assert grid[1] == estimate_metrics(CFG, 0.3, 300)


def test_report_ranges():
    for r in estimate_metrics_grid(CFG, [0.05, 0.2, 0.6], 300):
        assert 0 <= r.accuracy <= 1 and 0 <= r.eps_md <= 1
        assert math.isnan(r.eps_fa) or 0 <= r.eps_fa <= 1
        assert 0 <= r.mean_n_tp <= CFG.num_devices
        assert r.acc_ci >= 0 and r.md_ci >= 0


def test_noiseless_limit():
    cfg = ExperimentConfig(target_gain=1e6, num_devices=50, p_err_dl=0.0, slots=100_000,
                           trials=200)
    r = estimate_metrics(cfg, TAU_MIN, 200)
    assert r.accuracy == 1.0
    assert r.eps_md < 0.01


def test_query_free_probability_numeric_oracle():
    m, L = 200, 10
    res = minimize_scalar(lambda p: -p * (1 - p / L) ** (m - 1), bounds=(0, 1),
                          method="bounded", options={"xatol": 1e-10})
    p = query_free_probability(ChannelParams(0.1, L), m)
    assert p == pytest.approx(res.x, abs=1e-3) and p == pytest.approx(0.05)
    assert query_free_probability(ChannelParams(0.1, 300), 200) == 1.0


def test_query_free_probability_irsa():
    ch = ChannelParams(0.1, 10, DegreeDistribution.regular(3))
    p = query_free_probability(ch, 200)
    assert 0 < p and 200 * p < 10
    from semsource.channel import irsa_error_prob_approx
    f = lambda q: q * (1 - irsa_error_prob_approx(200 * q, 10, ch.degrees, ch.constants))
    grid = np.linspace(1e-4, 0.0499, 2000)
    assert f(p) >= max(f(q) for q in grid) - 1e-9


def test_query_free_false_alarm_share():
    r = baseline_query_free(CFG, 2000)
    assert r.eps_fa == pytest.approx(1 - CFG.p_pos, abs=0.03)
    assert r.tau is None and r.scheme == "query_free"


def test_perfect_matching_no_false_alarms_and_dominance():
    cfg = replace(CFG, trials=1500)
    pm = baseline_perfect_matching(cfg, None, default_tau_grid(25))
    assert pm.eps_fa == 0.0
    tau, _ = cfg.resolve_tau()
    prop = estimate_metrics(cfg, tau)
    assert pm.eps_md <= prop.eps_md


def test_perfect_matching_floor_is_downlink_error():
    cfg = ExperimentConfig(p_pos=0.005, p_err_dl=0.2, trials=4000, seed=2)
    pm = baseline_perfect_matching(cfg, None, [0.01, 0.05, 0.1])
    assert pm.eps_md == pytest.approx(0.2, abs=3 * pm.md_ci + 0.01)


def test_perfect_matching_validation():
    with pytest.raises(ValueError):
        baseline_perfect_matching(CFG, 10, [])
    with pytest.raises(ValueError):
        baseline_perfect_matching(CFG, 10, [0.2], criterion="fa")
    r = baseline_perfect_matching(CFG, 300, [0.1, 0.2], criterion="accuracy")
    assert r.tau in (0.1, 0.2)


def test_sweep_tau_axis_shares_trials():
    rows = sweep(CFG, "tau", [0.1, 0.3], 200)
    assert [r.tau_used for r in rows] == [0.1, 0.3]
    assert rows[0].report == estimate_metrics_grid(CFG, [0.1, 0.3], 200)[0]
    assert set(rows[0].analytic) == {"analytic_md", "analytic_fa", "analytic_entp"}


def test_sweep_gain_axis_uses_solver():
    rows = sweep(CFG, "gain", [20, 60], 100)
    assert rows[0].solution is not None
    assert rows[0].tau_used == rows[0].solution.tau != rows[1].tau_used


def test_sweep_baseline_schemes():
    rows = sweep(CFG, "p_pos", [0.05, 0.2], 100, scheme="query_free")
    assert all(r.report.scheme == "query_free" for r in rows)
    rows = sweep(CFG, "query_dim", [5], 100, scheme="perfect_matching", tau_grid=[0.1, 0.2])
    assert rows[0].report.eps_fa == 0.0


@pytest.mark.parametrize("axis,values", [("tau", [0.0]), ("tau", [1.2]), ("gain", [-1]),
                                         ("p_pos", [1.5]), ("query_dim", [2.5]),
                                         ("query_dim", [80]), ("bogus", [1]), ("tau", [])])
def test_sweep_domain_errors(axis, values):
    with pytest.raises(ValueError):
        sweep(CFG, axis, values, 10)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(trials=0)
    with pytest.raises(ValueError):
        ExperimentConfig(tau="best")
    with pytest.raises(ValueError):
        ExperimentConfig(query_dim=100)
    with pytest.raises(ValueError):
        ExperimentConfig(fusion_weights="uniform")
    with pytest.raises(ValueError):
        ExperimentConfig(slots=2, degrees=DegreeDistribution.regular(3))


def test_config_pickles_without_derived_state():
    cfg = ExperimentConfig()
    cfg.projection
    clone = pickle.loads(pickle.dumps(cfg))
    assert "projection" not in clone.__dict__ and clone == cfg
    assert np.array_equal(clone.projection.rows, cfg.projection.rows)


def test_analytic_point_schemes():
    a = analytic_point(CFG, 0.2)
    assert 0 < a["analytic_md"] < 1
    q = analytic_point(CFG, 1.0, "query_free")
    p = analytic_point(CFG, 0.2, "perfect_matching")
    assert p["analytic_fa"] == 0.0 and q["analytic_fa"] > 0


def test_sample_match_scores_shapes_and_separation():
    pos, neg = sample_match_scores(CFG, 5000, 1)
    assert pos.shape == neg.shape == (5000,)
    assert pos.mean() > neg.mean()
    pos2, _ = sample_match_scores(CFG, 5000, 1)
    assert np.array_equal(pos, pos2)
