"""Metrics reports: structured records plus an aligned text table that parses back."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import (DEGENERATE_VAR, MetricSummary, delong_paired_test, discordant_counts, mcnemar_test,
                      summarize)

SCHEMA_VERSION = 1
METRICS = ("auc", "accuracy", "sensitivity", "specificity")


@dataclass
class ReportRow:
    model: str
    split: str
    subgroup: str
    n: int
    prevalence: float
    auc: float | None
    auc_lo: float | None
    auc_hi: float | None
    accuracy: float | None
    accuracy_lo: float | None
    accuracy_hi: float | None
    sensitivity: float | None
    sensitivity_lo: float | None
    sensitivity_hi: float | None
    specificity: float | None
    specificity_lo: float | None
    specificity_hi: float | None
    threshold: float
    p_delong: float | None = None
    p_mcnemar: float | None = None
    flags: list = field(default_factory=list)

    @classmethod
    def from_summary(cls, model: str, split: str, subgroup: str, s: MetricSummary) -> "ReportRow":
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)

        vals = {}
        flags = list(s.flags)
        for m in METRICS:
            point = clean(getattr(s, m))
            ci = getattr(s, f"{m}_ci") or (None, None)
            lo, hi = clean(ci[0]), clean(ci[1])
            if point is not None and lo is not None and not lo <= point <= hi:
                # percentile intervals can exclude the point estimate on tiny or skewed samples
                lo, hi = min(lo, point), max(hi, point)
                flags.append(f"{m}_ci_widened")
            vals.update({m: point, f"{m}_lo": lo if point is not None else None,
                         f"{m}_hi": hi if point is not None else None})
        return cls(model=model, split=split, subgroup=subgroup, n=int(s.n), prevalence=float(s.prevalence),
                   threshold=float(s.threshold), flags=flags, **vals)


@dataclass
class Comparison:
    model_a: str
    model_b: str
    split: str
    subgroup: str
    delta_auc: float | None
    z: float | None
    p_delong: float | None
    accuracy_a: float
    accuracy_b: float
    discordant_b: int
    discordant_c: int
    p_mcnemar: float
    flags: list = field(default_factory=list)


@dataclass
class MetricsReport:
    provenance: dict
    rows: list = field(default_factory=list)
    comparisons: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "provenance": self.provenance,
                "rows": [asdict(r) for r in self.rows], "comparisons": [asdict(c) for c in self.comparisons]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')}")
        return cls(d["provenance"], [ReportRow(**r) for r in d["rows"]],
                   [Comparison(**c) for c in d["comparisons"]], d["schema_version"])

    def to_text(self) -> str:
        return format_table(self)

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jp, tp = out / f"{stem}.json", out / f"{stem}.txt"
        jp.write_text(self.to_json())
        tp.write_text(self.to_text())
        return jp, tp


# -- text rendering ---------------------------------------------------------------------------

def fmt2(v) -> str:
    return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"


def fmt_p(p) -> str:
    if p is None or (isinstance(p, float) and math.isnan(p)):
        return "NA"
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def _cell(row: ReportRow, m: str) -> str:
    point = getattr(row, m)
    if point is None:
        return "NA"
    return f"{fmt2(point)} ({fmt2(getattr(row, m + '_lo'))}, {fmt2(getattr(row, m + '_hi'))})"


ROW_HEADER = ["Model", "Split", "Group", "n", "Prev", "AUC", "Accuracy", "Sensitivity", "Specificity",
              "Threshold", "p DeLong", "p McNemar"]


def _align(rows: list) -> list:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]


def format_table(report: MetricsReport) -> str:
    p = report.provenance
    lines = [f"# config_hash={p.get('config_hash', '')} seed={p.get('seed', '')} version={p.get('version', '')}"]
    cells = [ROW_HEADER]
    for r in report.rows:
        cells.append([r.model, r.split, r.subgroup, str(r.n), fmt2(r.prevalence)]
                     + [_cell(r, m) for m in METRICS]
                     + [fmt2(r.threshold), fmt_p(r.p_delong), fmt_p(r.p_mcnemar)])
    lines += _align(cells)
    if report.comparisons:
        lines.append("")
        comp = [["Model A", "Model B", "Split", "Group", "dAUC", "z", "p DeLong", "Acc A", "Acc B", "b", "c",
                 "p McNemar"]]
        for c in report.comparisons:
            comp.append([c.model_a, c.model_b, c.split, c.subgroup, fmt2(c.delta_auc), fmt2(c.z), fmt_p(c.p_delong),
                         fmt2(c.accuracy_a), fmt2(c.accuracy_b), str(c.discordant_b), str(c.discordant_c),
                         fmt_p(c.p_mcnemar)])
        lines += _align(comp)
    return "\n".join(lines) + "\n"


# -- parsing back -------------------------------------------------------------------------------

_CI = re.compile(r"^(-?\d+\.\d+|NA) \((-?\d+\.\d+|NA), (-?\d+\.\d+|NA)\)$")


def _num(tok: str):
    if tok == "NA":
        return None
    if tok == "<0.001":
        return "<0.001"
    return float(tok)


def _split_cells(line: str, starts: list) -> list:
    bounds = starts[1:] + [None]
    return [line[a:b].strip() for a, b in zip(starts, bounds)]


def parse_table(text: str) -> dict:
    """Recover numbers from :func:`format_table` output (rows and comparisons)."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    blocks, cur = [], []
    for ln in lines:
        if ln.strip():
            cur.append(ln)
        elif cur:
            blocks.append(cur)
            cur = []
    if cur:
        blocks.append(cur)
    out = {"rows": [], "comparisons": []}
    for block in blocks:
        header = block[0]
        names = re.split(r"\s{2,}", header.strip())
        starts, pos = [], 0
        for n in names:
            pos = header.index(n, pos)
            starts.append(pos)
            pos += len(n)
        # header positions are exact because every column is left-justified to a shared width
        key = "rows" if names[0] == "Model" else "comparisons"
        for ln in block[1:]:
            cells = dict(zip(names, _split_cells(ln.ljust(len(header)), starts)))
            parsed = {}
            for name, cell in cells.items():
                m = _CI.match(cell)
                if m:
                    parsed[name] = tuple(_num(t) for t in m.groups())
                elif name in ("Model", "Split", "Group", "Model A", "Model B"):
                    parsed[name] = cell
                else:
                    parsed[name] = _num(cell)
            out[key].append(parsed)
    return out


def _same(text_val, machine_val, kind: str = "2") -> bool:
    if machine_val is None or (isinstance(machine_val, float) and math.isnan(machine_val)):
        return text_val is None
    if kind == "p":
        if text_val == "<0.001":
            return machine_val < 0.001
        return text_val == float(fmt_p(machine_val))
    if kind == "int":
        return text_val == machine_val
    return text_val == float(fmt2(machine_val))


def cross_check(report: MetricsReport, text: str | None = None) -> list:
    """Differences between the text table and the structured records (empty when consistent)."""
    parsed = parse_table(report.to_text() if text is None else text)
    problems = []
    if len(parsed["rows"]) != len(report.rows) or len(parsed["comparisons"]) != len(report.comparisons):
        return ["row count differs"]
    for i, (t, r) in enumerate(zip(parsed["rows"], report.rows)):
        checks = [(t["n"], r.n, "int"), (t["Prev"], r.prevalence, "2"), (t["Threshold"], r.threshold, "2"),
                  (t["p DeLong"], r.p_delong, "p"), (t["p McNemar"], r.p_mcnemar, "p")]
        for m, col in zip(METRICS, ("AUC", "Accuracy", "Sensitivity", "Specificity")):
            cell = t[col]
            if getattr(r, m) is None:
                checks.append((cell, None, "2"))
            else:
                checks += [(cell[0], getattr(r, m), "2"), (cell[1], getattr(r, m + "_lo"), "2"),
                           (cell[2], getattr(r, m + "_hi"), "2")]
        if (t["Model"], t["Split"], t["Group"]) != (r.model, r.split, r.subgroup):
            problems.append(f"row {i}: labels differ")
        problems += [f"row {i}: {tv!r} vs {mv!r}" for tv, mv, k in checks if not _same(tv, mv, k)]
    for i, (t, c) in enumerate(zip(parsed["comparisons"], report.comparisons)):
        checks = [(t["dAUC"], c.delta_auc, "2"), (t["z"], c.z, "2"), (t["p DeLong"], c.p_delong, "p"),
                  (t["Acc A"], c.accuracy_a, "2"), (t["Acc B"], c.accuracy_b, "2"),
                  (t["b"], float(c.discordant_b), "int"), (t["c"], float(c.discordant_c), "int"),
                  (t["p McNemar"], c.p_mcnemar, "p")]
        problems += [f"comparison {i}: {tv!r} vs {mv!r}" for tv, mv, k in checks if not _same(tv, mv, k)]
    return problems


# -- building ---------------------------------------------------------------------------------------

def _groups_of(groups, n):
    return ["all"] * n if groups is None else [str(g) for g in groups]


def model_rows(model: str, split: str, scores, labels, threshold: float, groups=None, n_boot: int = 2000,
               seed: int = 0, level: float = 0.95) -> list:
    """Overall row plus one row per subgroup."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    rows = [ReportRow.from_summary(model, split, "all", summarize(s, y, threshold, n_boot, seed, level))]
    g = np.array(_groups_of(groups, len(s)))
    names = sorted(set(g.tolist()))
    if groups is not None and names != ["all"]:
        for name in names:
            sel = g == name
            rows.append(ReportRow.from_summary(model, split, name,
                                               summarize(s[sel], y[sel], threshold, n_boot, seed, level)))
    return rows


def compare_models(name_a: str, name_b: str, split: str, subgroup: str, scores_a, scores_b, labels,
                   threshold_a: float, threshold_b: float) -> Comparison:
    y = np.asarray(labels, dtype=int)
    sa, sb = np.asarray(scores_a, dtype=float), np.asarray(scores_b, dtype=float)
    flags = []
    if 0 < y.sum() < len(y) and min(y.sum(), len(y) - y.sum()) >= 2:
        d = delong_paired_test(sa, sb, y)
        delta, z, p = d.delta_auc, d.z, d.p
        if d.degenerate:
            flags.append("delong_degenerate")
    else:
        delta = z = p = None
        flags.append("delong_undefined_single_class")
    correct_a = (sa >= threshold_a) == (y == 1)
    correct_b = (sb >= threshold_b) == (y == 1)
    b, c = discordant_counts(correct_a, correct_b)
    mc = mcnemar_test(b, c)
    return Comparison(name_a, name_b, split, subgroup, delta, z, p, float(correct_a.mean()),
                      float(correct_b.mean()), b, c, mc.p, flags)
