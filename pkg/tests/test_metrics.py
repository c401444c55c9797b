from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from neuroquant.errors import SchemaError, SingleClass, TooSmall
from neuroquant.metrics import (DEGENERATE_VAR, ScoreTable, analyze_roc, auc_mann_whitney, bootstrap_ci, delong_ci,
                                delong_paired_test, delong_variance, discordant_counts, evaluate_subgroups,
                                mcnemar_test, per_fold_spread, read_scores, roc_points, summarize, threshold_metrics,
                                trapezoid_auc, write_scores, youden_threshold)


def labeled(pos, neg):
    return np.r_[pos, neg], np.r_[np.ones(len(pos), int), np.zeros(len(neg), int)]


def random_instance(rng, n, ties=False):
    y = rng.integers(0, 2, n)
    y[:2], y[2:4] = 1, 0
    s = rng.integers(0, 6, n).astype(float) if ties else rng.normal(size=n) + 0.8 * y
    return s, y


# -- AUC ------------------------------------------------------------------------------------------

def test_auc_examples():
    assert auc_mann_whitney(*labeled([0.9, 0.8], [0.7, 0.4])) == 1.0
    assert auc_mann_whitney(*labeled([0.8, 0.5], [0.5, 0.2])) == 0.875
    with pytest.raises(SingleClass):
        auc_mann_whitney([0.1, 0.2], [1, 1])


def test_auc_random_labels_near_half():
    rng = np.random.default_rng(7)
    assert abs(auc_mann_whitney(rng.random(2000), rng.integers(0, 2, 2000)) - 0.5) < 0.04


@pytest.mark.parametrize("ties", [False, True])
def test_auc_matches_pair_count(ties, rng):
    for _ in range(20):
        s, y = random_instance(rng, 25, ties)
        assert auc_mann_whitney(s, y) == pytest.approx(oracles.auc_pairs(s, y), abs=1e-12)


def test_auc_equals_trapezoid_200_instances(rng):
    for i in range(200):
        s, y = random_instance(rng, int(rng.integers(5, 60)), ties=i % 2 == 0)
        pts = roc_points(s, y)
        assert np.all(np.diff(pts, axis=0) >= 0)
        assert tuple(pts[0]) == (0.0, 0.0) and tuple(pts[-1]) == (1.0, 1.0)
        assert abs(trapezoid_auc(pts) - auc_mann_whitney(s, y)) < 1e-12


@given(st.lists(st.integers(-50, 50), min_size=4, max_size=40), st.randoms(use_true_random=False))
def test_auc_symmetry_and_monotone_invariance(vals, r):
    s = np.array(vals, dtype=float) / 10
    y = np.array([r.randint(0, 1) for _ in vals])
    y[0], y[1] = 0, 1
    a = auc_mann_whitney(s, y)
    assert 0 <= a <= 1
    assert abs(a - (1 - auc_mann_whitney(-s, y))) < 1e-12
    assert abs(a - auc_mann_whitney(np.exp(s), y)) < 1e-12
    assert abs(a - auc_mann_whitney(3 * s - 7, y)) < 1e-12


# -- DeLong ---------------------------------------------------------------------------------------

def test_delong_separated():
    s, y = labeled([0.9, 0.8, 0.95], [0.1, 0.3, 0.2])
    assert delong_variance(s, y) == 0.0
    assert delong_ci(1.0, 0.0) == (1.0, 1.0)


@pytest.mark.parametrize("ties", [False, True])
def test_delong_variance_oracle(ties, rng):
    for _ in range(10):
        s, y = random_instance(rng, 30, ties)
        assert delong_variance(s, y) == pytest.approx(oracles.delong_var(s, y), abs=1e-12)


def test_delong_duplication_halves_variance(rng):
    s, y = random_instance(rng, 80)
    v1 = oracles.delong_var(s, y)
    v2 = delong_variance(np.r_[s, s], np.r_[y, y])
    assert abs(v2 / v1 - 0.5) < 0.15 * 0.5


def test_delong_ci_clamped():
    lo, hi = delong_ci(0.98, 0.01)
    assert lo == pytest.approx(0.98 - 1.959963984540054 * 0.1) and hi == 1.0


def test_paired_identical_degenerate(rng):
    s, y = random_instance(rng, 40)
    res = delong_paired_test(s, s, y)
    assert res.degenerate and res.p == 1.0


def test_paired_opposite_classifiers():
    rng = np.random.default_rng(3)
    y = np.r_[np.ones(50, int), np.zeros(50, int)]
    a = np.clip(0.5 + 0.3 * (2 * y - 1) + rng.normal(0, 0.15, 100), 0, 1)
    res = delong_paired_test(a, 1 - a, y)
    assert abs(res.z) > 3 and res.p < 0.01
    assert res.z == pytest.approx(oracles.delong_z(a, 1 - a, y), rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_paired_z_oracle(seed):
    rng = np.random.default_rng(seed)
    y = np.r_[np.ones(10, int), np.zeros(10, int)]
    a = rng.normal(size=20) + y
    b = a + rng.normal(0, 0.7, 20)
    res = delong_paired_test(a, b, y)
    assert res.z == pytest.approx(oracles.delong_z(a, b, y), abs=1e-10)
    assert 0 <= res.p <= 1


@given(st.lists(st.floats(0, 1), min_size=6, max_size=30))
def test_paired_self_always_degenerate(vals):
    s = np.array(vals)
    y = np.arange(len(s)) % 2
    res = delong_paired_test(s, s.copy(), y)
    assert res.degenerate and res.p == 1.0 and res.var_diff < DEGENERATE_VAR


# -- McNemar --------------------------------------------------------------------------------------------

def test_mcnemar_examples():
    assert mcnemar_test(10, 10).p == 1.0
    r = mcnemar_test(5, 15)
    assert r.method == "exact" and r.p == pytest.approx(0.04139, abs=5e-6)
    r = mcnemar_test(50, 100)
    assert r.method == "chi2" and r.statistic == pytest.approx(49 ** 2 / 150)
    assert r.p == pytest.approx(math.erfc(math.sqrt(r.statistic / 2)), rel=1e-9) and r.p < 1e-4
    assert mcnemar_test(0, 0).p == 1.0


@given(st.integers(0, 24), st.integers(0, 24))
def test_mcnemar_exact_oracle(b, c):
    if b + c >= 25:
        return
    assert abs(mcnemar_test(b, c).p - oracles.mcnemar_exact(b, c)) < 1e-10


@given(st.integers(0, 300), st.integers(0, 300))
def test_mcnemar_p_range(b, c):
    r = mcnemar_test(b, c)
    assert 0 <= r.p <= 1
    if b == c:
        assert r.p == 1.0


def test_discordant_counts():
    assert discordant_counts([1, 1, 0, 0, 1], [1, 0, 1, 0, 0]) == (2, 1)


# -- Youden and thresholds ----------------------------------------------------------------------------------

def test_youden_examples():
    thr, j = youden_threshold(*labeled([0.9, 0.8], [0.3, 0.1]))
    assert thr == pytest.approx(0.55) and j == 1.0
    s, y = labeled([0.9, 0.6, 0.4], [0.5, 0.3, 0.1])
    assert youden_threshold(s, y) == pytest.approx(oracles.youden_scan(s, y))


def test_youden_oracle_200(rng):
    for i in range(200):
        s, y = random_instance(rng, int(rng.integers(4, 40)), ties=i % 3 == 0)
        thr, j = youden_threshold(s, y)
        o_thr, o_j = oracles.youden_scan(s.tolist(), y.tolist())
        assert thr == o_thr and abs(j - o_j) < 1e-12


def test_threshold_metrics_examples():
    s, y = labeled([0.8, 0.4], [0.6, 0.2])
    tm = threshold_metrics(s, y, 0.5)
    assert (tm.sensitivity, tm.specificity, tm.accuracy) == (0.5, 0.5, 0.5)
    tm = threshold_metrics(s, y, -np.inf)
    assert (tm.sensitivity, tm.specificity) == (1.0, 0.0)
    tm = threshold_metrics(s, y, np.inf)
    assert (tm.sensitivity, tm.specificity) == (0.0, 1.0)
    assert threshold_metrics([0.8], [1], 0.5).sensitivity == 1.0
    assert math.isnan(threshold_metrics([0.8], [1], 0.5).specificity)


# -- bootstrap ---------------------------------------------------------------------------------------------------

def test_bootstrap_constant_and_deterministic(rng):
    s, y = random_instance(rng, 50)
    perfect = lambda ss, yy: 1.0
    b = bootstrap_ci(s, y, perfect, n_boot=200)
    assert (b.lo, b.hi) == (1.0, 1.0)
    acc = lambda ss, yy: np.mean((ss >= 0.4) == (yy == 1))
    assert bootstrap_ci(s, y, acc, 300, seed=4) == bootstrap_ci(s, y, acc, 300, seed=4)
    with pytest.raises(TooSmall):
        bootstrap_ci(s[:9], y[:9], acc)


def test_bootstrap_subject_level(rng):
    s, y = random_instance(rng, 60)
    groups = np.repeat(np.arange(30), 2)
    y = np.repeat(y[:30], 2)
    b = bootstrap_ci(s, y, lambda ss, yy: np.mean(ss), 200, groups=groups)
    assert b.n_used + b.n_skipped == 200 and b.lo <= b.hi


def test_bootstrap_vectorized_matches_loop(rng):
    s, y = random_instance(rng, 40)
    fn = lambda ss, yy: np.mean((ss >= 0.3) == (yy == 1), axis=-1)
    a = bootstrap_ci(s, y, fn, 300, seed=1)
    b = bootstrap_ci(s, y, fn, 300, seed=1, vectorized=True)
    assert (a.lo, a.hi) == (b.lo, b.hi)


def test_bootstrap_coverage():
    """Bernoulli(0.7) correctness, n=200, 500 repetitions: the 95% interval covers 0.7 about 95% of the time."""
    rng = np.random.default_rng(2024)
    fn = lambda ss, yy: np.mean(ss, axis=-1)
    hits = 0
    for rep in range(500):
        correct = (rng.random(200) < 0.7).astype(float)
        labels = np.arange(200) % 2
        b = bootstrap_ci(correct, labels, fn, n_boot=1000, seed=rep, vectorized=True)
        hits += b.lo <= 0.7 <= b.hi
    assert 0.90 <= hits / 500 <= 0.99


# -- summaries and subgroups ---------------------------------------------------------------------------------------

def test_analyze_roc(rng):
    s, y = random_instance(rng, 60)
    r = analyze_roc(s, y, threshold=0.4)
    assert 0 <= r.ci95[0] <= r.auc <= r.ci95[1] <= 1
    assert r.accuracy == threshold_metrics(s, y, 0.4).accuracy


def test_subgroups(rng):
    s, y = random_instance(rng, 80)
    groups = np.where(np.arange(80) < 40, "CN", "MCI")
    y[40:60] = 1
    y[60:] = 1
    out = evaluate_subgroups(s, y, groups, 0.4, n_boot=200)
    assert out["CN"].n + out["MCI"].n == 80
    assert out["MCI"].auc is None and "auc_undefined_single_class" in out["MCI"].flags
    assert out["MCI"].sensitivity == threshold_metrics(s[40:], y[40:], 0.4).sensitivity
    single = evaluate_subgroups(s, y, ["all"] * 80, 0.4, n_boot=200)["all"]
    whole = summarize(s, y, 0.4, n_boot=200)
    assert single == whole


def test_per_fold_spread(rng):
    s, y = random_instance(rng, 40)
    out = per_fold_spread([s, s + rng.normal(0, 0.5, 40)], y)
    assert out["min"] <= out["mean"] <= out["max"]


# -- score files ---------------------------------------------------------------------------------------------------------

def test_scores_roundtrip(tmp_path, rng):
    t = ScoreTable(["a", "b", "c"], rng.random(3), np.array([1, 0, 1]), ["CN", "MCI", "CN"], rng.random(3))
    p = write_scores(tmp_path / "s.csv", t, comment="x")
    back = read_scores(p)
    assert back.exam_ids == t.exam_ids and back.groups == t.groups
    assert np.array_equal(back.score_a, t.score_a) and np.array_equal(back.score_b, t.score_b)
    assert np.array_equal(back.labels, t.labels)


@pytest.mark.parametrize("text", ["exam_id,score_a\na,0.1\n", "exam_id,score_a,label\na,x,1\n",
                                  "exam_id,score_a,label\na,0.1,2\n", "exam_id,score_a,label\na,nan,1\n",
                                  "exam_id,score_a,label\n", "exam_id,score_a,label\na,0.1,1\na,0.2,0\n"])
def test_scores_schema_errors(tmp_path, text):
    p = tmp_path / "s.csv"
    p.write_text(text)
    with pytest.raises(SchemaError):
        read_scores(p)


def test_scores_default_group(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("# comment\nexam_id,score_a,label\na,0.1,1\nb,0.2,0\n")
    t = read_scores(p)
    assert t.groups == ["all", "all"] and t.score_b is None
