"""ROC analysis and the statistical tests used to compare classifiers.

AUC is the Mann-Whitney statistic computed from midranks.  Its variance and
the paired comparison of two correlated AUCs use DeLong's structural
components, obtained in O(N log N) from within-class and pooled midranks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import SchemaError, SingleClass, TooSmall

DEGENERATE_VAR = 1e-15


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y


def _split_classes(scores, labels):
    s, y = _as_arrays(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClass("both positive and negative labels are required")
    return pos, neg


def structural_components(scores, labels):
    """DeLong placement values: ``V10`` per positive and ``V01`` per negative.

    ``V10[i]`` is the fraction of negatives scored below positive ``i``
    (ties count half); ``V01[j]`` the fraction of positives above negative ``j``.
    """
    pos, neg = _split_classes(scores, labels)
    m, n = len(pos), len(neg)
    pooled = stats.rankdata(np.concatenate([pos, neg]))
    v10 = (pooled[:m] - stats.rankdata(pos)) / n
    v01 = 1.0 - (pooled[m:] - stats.rankdata(neg)) / m
    return v10, v01


def auc_mann_whitney(scores, labels) -> float:
    pos, neg = _split_classes(scores, labels)
    m, n = len(pos), len(neg)
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    return float((ranks[:m].sum() - m * (m + 1) / 2.0) / (m * n))


def delong_variance(scores, labels) -> float:
    v10, v01 = structural_components(scores, labels)
    m, n = len(v10), len(v01)
    if m < 2 or n < 2:
        raise SingleClass("DeLong variance needs at least two exams per class")
    return float(np.var(v10, ddof=1) / m + np.var(v01, ddof=1) / n)


def delong_ci(auc: float, var: float, level: float = 0.95) -> tuple[float, float]:
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * math.sqrt(max(var, 0.0))
    return max(0.0, auc - half), min(1.0, auc + half)


@dataclass
class DelongResult:
    auc_a: float
    auc_b: float
    delta_auc: float
    z: float
    p: float
    var_diff: float
    degenerate: bool = False


def delong_paired_test(scores_a, scores_b, labels) -> DelongResult:
    """Two-sided DeLong test for two AUCs measured on the same exams."""
    _, y = _as_arrays(scores_a, labels)
    sb, _ = _as_arrays(scores_b, labels)
    a10, a01 = structural_components(scores_a, y)
    b10, b01 = structural_components(sb, y)
    m, n = len(a10), len(a01)
    if m < 2 or n < 2:
        raise SingleClass("DeLong test needs at least two exams per class")
    s10 = np.cov(np.vstack([a10, b10]), ddof=1)
    s01 = np.cov(np.vstack([a01, b01]), ddof=1)
    cov = s10 / m + s01 / n
    auc_a, auc_b = float(a10.mean()), float(b10.mean())
    var_diff = float(cov[0, 0] + cov[1, 1] - 2 * cov[0, 1])
    delta = auc_a - auc_b
    if var_diff < DEGENERATE_VAR:
        return DelongResult(auc_a, auc_b, delta, 0.0, 1.0, var_diff, degenerate=True)
    z = delta / math.sqrt(var_diff)
    p = float(2.0 * stats.norm.sf(abs(z)))
    return DelongResult(auc_a, auc_b, delta, z, min(1.0, p), var_diff)


@dataclass
class McNemarResult:
    b: int
    c: int
    statistic: float
    p: float
    method: str


def mcnemar_test(b: int, c: int, exact_below: int = 25) -> McNemarResult:
    """McNemar test on discordant counts.

    ``b``: exams model A got right and B wrong; ``c``: the reverse.  Uses the
    exact two-sided binomial test when ``b + c < exact_below``, else the
    continuity-corrected chi-square.
    """
    b, c = int(b), int(c)
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    n = b + c
    if n == 0:
        return McNemarResult(b, c, 0.0, 1.0, "none")
    if n < exact_below:
        p = min(1.0, 2.0 * float(stats.binom.cdf(min(b, c), n, 0.5)))
        return McNemarResult(b, c, float(min(b, c)), p, "exact")
    stat = max(abs(b - c) - 1.0, 0.0) ** 2 / n
    return McNemarResult(b, c, stat, float(stats.chi2.sf(stat, 1)), "chi2")


def discordant_counts(correct_a, correct_b) -> tuple[int, int]:
    ca = np.asarray(correct_a, dtype=bool)
    cb = np.asarray(correct_b, dtype=bool)
    return int(np.sum(ca & ~cb)), int(np.sum(~ca & cb))


def youden_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximising sensitivity + specificity - 1.

    Candidates are midpoints between adjacent distinct scores plus
    ``-inf``/``+inf``; an exam is called positive when ``score >= threshold``.
    Ties go to the lowest threshold.
    """
    pos, neg = _split_classes(scores, labels)
    m, n = len(pos), len(neg)
    uniq = np.unique(np.concatenate([pos, neg]))
    cands = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2.0, [np.inf]])
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    tp = m - np.searchsorted(pos_sorted, cands, side="left")
    tn = np.searchsorted(neg_sorted, cands, side="left")
    # J * m * n in exact integers so ties are detected exactly
    j_scaled = tp * n + tn * m - m * n
    k = int(np.argmax(j_scaled))
    return float(cands[k]), float(j_scaled[k]) / (m * n)


@dataclass
class ThresholdMetrics:
    accuracy: float
    sensitivity: float
    specificity: float
    n_pos: int
    n_neg: int


def threshold_metrics(scores, labels, threshold: float) -> ThresholdMetrics:
    """Accuracy, sensitivity and specificity at ``score >= threshold``.

    Sensitivity (specificity) is NaN when there are no positives (negatives).
    """
    s, y = _as_arrays(scores, labels)
    if len(s) == 0:
        raise SingleClass("no exams")
    pred = s >= threshold
    pos, neg = y == 1, y == 0
    sens = float(np.mean(pred[pos])) if pos.any() else math.nan
    spec = float(np.mean(~pred[neg])) if neg.any() else math.nan
    return ThresholdMetrics(float(np.mean(pred == pos)), sens, spec, int(pos.sum()), int(neg.sum()))


def roc_points(scores, labels) -> np.ndarray:
    """Empirical ROC vertices (fpr, tpr) from (0, 0) to (1, 1), one per distinct score."""
    pos, neg = _split_classes(scores, labels)
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = (len(pos) - np.searchsorted(np.sort(pos), thr, side="left")) / len(pos)
    fpr = (len(neg) - np.searchsorted(np.sort(neg), thr, side="left")) / len(neg)
    return np.vstack([[0.0, 0.0], np.column_stack([fpr, tpr])])


def trapezoid_auc(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


@dataclass
class BootstrapCI:
    lo: float
    hi: float
    n_used: int
    n_skipped: int


def bootstrap_ci(scores, labels, metric_fn: Callable, n_boot: int = 2000, seed: int = 0,
                 level: float = 0.95, groups=None, vectorized: bool = False,
                 max_retries: int = 10) -> BootstrapCI:
    """Percentile bootstrap interval for ``metric_fn(scores, labels)``.

    Resampling is by subject when ``groups`` (subject ids) is given, else by
    exam.  Resamples with a single label class are redrawn up to
    ``max_retries`` times and otherwise skipped.  With ``vectorized=True``
    the metric receives (n_boot, n) arrays and returns n_boot values.
    """
    s, y = _as_arrays(scores, labels)
    if len(s) < 10:
        raise TooSmall(f"bootstrap needs at least 10 exams, got {len(s)}")
    rng = np.random.default_rng(seed)
    if groups is None:
        members = None
        n_units = len(s)
    else:
        _, inverse = np.unique(np.asarray(groups), return_inverse=True)
        members = [np.nonzero(inverse == g)[0] for g in range(inverse.max() + 1)]
        n_units = len(members)

    def draw():
        units = rng.integers(0, n_units, n_units)
        if members is None:
            return units
        return np.concatenate([members[u] for u in units])

    samples = []
    skipped = 0
    for _ in range(n_boot):
        for _attempt in range(max_retries + 1):
            idx = draw()
            yy = y[idx]
            if 0 < yy.sum() < len(yy):
                samples.append(idx)
                break
        else:
            skipped += 1
    if not samples:
        raise TooSmall("every bootstrap resample had a single class")
    if vectorized and members is None:
        idx = np.vstack(samples)
        values = np.asarray(metric_fn(s[idx], y[idx]), dtype=float)
    else:
        values = np.array([metric_fn(s[i], y[i]) for i in samples], dtype=float)
    values = values[np.isfinite(values)]
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapCI(float(lo), float(hi), len(samples), skipped)


@dataclass
class RocAnalysis:
    scores: np.ndarray
    labels: np.ndarray
    auc: float
    delong_variance: float
    ci95: tuple
    roc_points: np.ndarray
    threshold: float | None = None
    accuracy: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    degenerate_variance: bool = False


def analyze_roc(scores, labels, threshold: float | None = None, level: float = 0.95) -> RocAnalysis:
    s, y = _as_arrays(scores, labels)
    auc = auc_mann_whitney(s, y)
    var = delong_variance(s, y)
    analysis = RocAnalysis(s, y, auc, var, delong_ci(auc, var, level), roc_points(s, y),
                           degenerate_variance=var < DEGENERATE_VAR)
    if threshold is not None:
        tm = threshold_metrics(s, y, threshold)
        analysis.threshold = threshold
        analysis.accuracy, analysis.sensitivity, analysis.specificity = tm.accuracy, tm.sensitivity, tm.specificity
    return analysis


# -- per-model summary -----------------------------------------------------------------------

@dataclass
class MetricSummary:
    """Headline metrics with intervals for one model on one exam set."""

    n: int
    prevalence: float
    auc: float | None
    auc_ci: tuple | None
    accuracy: float
    accuracy_ci: tuple
    sensitivity: float
    sensitivity_ci: tuple
    specificity: float
    specificity_ci: tuple
    threshold: float
    flags: list = field(default_factory=list)


def _accuracy_at(threshold):
    def fn(s, y):
        return np.mean((s >= threshold) == (y == 1), axis=-1)
    return fn


def _class_rate_at(threshold, positive: bool):
    def fn(s, y):
        cls = y == (1 if positive else 0)
        called = (s >= threshold) if positive else (s < threshold)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sum(called & cls, axis=-1) / np.sum(cls, axis=-1)
    return fn


def _single_class_ci(s, y, fn, n_boot, seed, level):
    """Bootstrap for a group lacking one class: resample without the two-class requirement."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(s), (n_boot, len(s)))
    vals = np.asarray(fn(s[idx], y[idx]), dtype=float)
    vals = vals[np.isfinite(vals)]
    if len(vals) == 0:
        return (math.nan, math.nan)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(vals, [100 * alpha, 100 * (1 - alpha)])
    return (float(lo), float(hi))


def summarize(scores, labels, threshold: float, n_boot: int = 2000, seed: int = 0,
              level: float = 0.95, groups=None) -> MetricSummary:
    """AUC with DeLong CI plus thresholded metrics with bootstrap CIs."""
    s, y = _as_arrays(scores, labels)
    flags = []
    tm = threshold_metrics(s, y, threshold)
    fns = {"accuracy": _accuracy_at(threshold),
           "sensitivity": _class_rate_at(threshold, True),
           "specificity": _class_rate_at(threshold, False)}
    both = 0 < y.sum() < len(y)
    auc = auc_ci = None
    if both and min(y.sum(), len(y) - y.sum()) >= 2:
        auc = auc_mann_whitney(s, y)
        var = delong_variance(s, y)
        auc_ci = delong_ci(auc, var, level)
        if var < DEGENERATE_VAR:
            flags.append("degenerate_auc_variance")
    else:
        flags.append("auc_undefined_single_class" if not both else "auc_undefined_too_few")
    cis = {}
    for k, (name, fn) in enumerate(fns.items()):
        if len(s) < 10:
            cis[name] = (math.nan, math.nan)
            if "too_small_for_bootstrap" not in flags:
                flags.append("too_small_for_bootstrap")
        elif both:
            b = bootstrap_ci(s, y, fn, n_boot, seed + k, level, groups=groups, vectorized=groups is None)
            cis[name] = (b.lo, b.hi)
        else:
            cis[name] = _single_class_ci(s, y, fn, n_boot, seed + k, level)
    if not both:
        flags.append("sensitivity_undefined" if tm.n_pos == 0 else "specificity_undefined")
    return MetricSummary(
        n=len(s), prevalence=float(y.mean()), auc=auc, auc_ci=auc_ci,
        accuracy=tm.accuracy, accuracy_ci=cis["accuracy"],
        sensitivity=tm.sensitivity, sensitivity_ci=cis["sensitivity"],
        specificity=tm.specificity, specificity_ci=cis["specificity"],
        threshold=threshold, flags=flags,
    )


def evaluate_subgroups(scores, labels, groups: Sequence, threshold: float, n_boot: int = 2000,
                       seed: int = 0, level: float = 0.95) -> dict:
    """Apply :func:`summarize` inside each group (e.g. cognitive status).

    Groups holding a single label class are reported with flags rather
    than raising.
    """
    s, y = _as_arrays(scores, labels)
    g = np.asarray(groups)
    out = {}
    for name in sorted(set(g.tolist()), key=str):
        sel = g == name
        out[name] = summarize(s[sel], y[sel], threshold, n_boot, seed, level)
    return out


def per_fold_spread(fold_scores: Sequence, labels) -> dict:
    """Mean, sd, min and max of the AUC across per-fold score vectors."""
    aucs = np.array([auc_mann_whitney(fs, labels) for fs in fold_scores])
    return {"mean": float(aucs.mean()), "sd": float(aucs.std(ddof=1)) if len(aucs) > 1 else 0.0,
            "min": float(aucs.min()), "max": float(aucs.max())}


# -- score files -------------------------------------------------------------------------------

SCORE_COLUMNS = ("exam_id", "score_a", "score_b", "label", "group")


@dataclass
class ScoreTable:
    exam_ids: list
    score_a: np.ndarray
    labels: np.ndarray
    groups: list
    score_b: np.ndarray | None = None


def _data_lines(fh):
    for line in fh:
        if not line.startswith("#"):
            yield line


def read_scores(path) -> ScoreTable:
    """Parse a score file: ``exam_id, score_a[, score_b], label[, group]``.

    Lines starting with ``#`` are comments.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(_data_lines(fh))
        cols = reader.fieldnames or []
        missing = [c for c in ("exam_id", "score_a", "label") if c not in cols]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        has_b = "score_b" in cols
        ids, a, b, y, g = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                sa = float(row["score_a"])
                sb = float(row["score_b"]) if has_b else 0.0
                lab = int(row["label"])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path} line {lineno}: {exc}") from exc
            if lab not in (0, 1):
                raise SchemaError(f"{path} line {lineno}: label must be 0 or 1, got {lab}")
            if not (math.isfinite(sa) and math.isfinite(sb)):
                raise SchemaError(f"{path} line {lineno}: non-finite score")
            ids.append(row["exam_id"])
            a.append(sa)
            b.append(sb)
            y.append(lab)
            g.append(row.get("group") or "all")
    if not ids:
        raise SchemaError(f"{path}: no score rows")
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate exam ids")
    return ScoreTable(ids, np.array(a), np.array(y), g, np.array(b) if has_b else None)


def write_scores(path, table: ScoreTable, comment: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        has_b = table.score_b is not None
        w.writerow(["exam_id", "score_a"] + (["score_b"] if has_b else []) + ["label", "group"])
        for i, eid in enumerate(table.exam_ids):
            row = [eid, repr(float(table.score_a[i]))]
            if has_b:
                row.append(repr(float(table.score_b[i])))
            w.writerow(row + [int(table.labels[i]), table.groups[i]])
    return path
