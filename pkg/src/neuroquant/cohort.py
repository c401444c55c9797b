"""Exam manifests: MRI-PET pairing, inclusion filters, splits, folds and demographics."""

from __future__ import annotations

import csv
import datetime as dt
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import DegenerateGroup, InsufficientSubjects, SchemaError

MANIFEST_COLUMNS = [
    "subject_id", "date", "t1w_path", "flair_path", "pet_path", "tracer",
    "age", "sex", "cognitive_status", "dataset",
]
DERIVED_COLUMNS = ["centiloid", "label", "partition", "fold"]

PARTITIONS = ("train", "validation", "test")
COGNITIVE_STATUSES = ("CN", "MCI", "dementia")
DATE_RANGE = (dt.date(2010, 1, 1), dt.date(2023, 12, 31))


@dataclass
class ExamRecord:
    subject_id: str
    exam_date: dt.date
    t1w_path: str = ""
    flair_path: str = ""
    pet_path: str = ""
    tracer: str = ""
    age: float = math.nan
    sex: str = ""
    cognitive_status: str = ""
    dataset: str = ""
    centiloid: float | None = None
    label: str | None = None
    partition: str | None = None
    fold: int | None = None

    @property
    def exam_id(self) -> str:
        return f"{self.subject_id}_{self.exam_date.isoformat()}"

    @property
    def label_int(self) -> int:
        if self.label is None:
            raise ValueError(f"exam {self.exam_id} has no label")
        return int(self.label == "positive")


@dataclass(frozen=True)
class SplitAssignment:
    partition: str
    fold: int | None = None

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise ValueError(f"unknown partition {self.partition!r}")
        if self.fold is not None and self.partition != "train":
            raise ValueError("only training exams carry a fold")


# -- manifest I/O --------------------------------------------------------------------

def _parse_row(row: dict, lineno: int) -> ExamRecord:
    missing = [c for c in ("subject_id", "date") if not row.get(c)]
    if missing:
        raise SchemaError(f"manifest line {lineno}: missing {missing}")
    try:
        date = dt.date.fromisoformat(row["date"])
        age = float(row["age"]) if row.get("age") else math.nan
        centiloid = float(row["centiloid"]) if row.get("centiloid") else None
        fold = int(row["fold"]) if row.get("fold") else None
    except ValueError as exc:
        raise SchemaError(f"manifest line {lineno}: {exc}") from exc
    return ExamRecord(
        subject_id=row["subject_id"],
        exam_date=date,
        t1w_path=row.get("t1w_path", "") or "",
        flair_path=row.get("flair_path", "") or "",
        pet_path=row.get("pet_path", "") or "",
        tracer=row.get("tracer", "") or "",
        age=age,
        sex=row.get("sex", "") or "",
        cognitive_status=row.get("cognitive_status", "") or "",
        dataset=row.get("dataset", "") or "",
        centiloid=centiloid,
        label=row.get("label") or None,
        partition=row.get("partition") or None,
        fold=fold,
    )


def read_manifest(path) -> list[ExamRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        if reader.fieldnames is None or not {"subject_id", "date"} <= set(reader.fieldnames):
            raise SchemaError(f"{path}: manifest needs at least subject_id and date columns")
        return [_parse_row(row, i + 2) for i, row in enumerate(reader)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, dt.date):
        return v.isoformat()
    return str(v)


def write_manifest(records: Iterable[ExamRecord], path, comment: str | None = None) -> Path:
    """Write a manifest CSV; ``comment`` becomes a leading ``#`` line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS + DERIVED_COLUMNS)
        for r in records:
            writer.writerow([
                r.subject_id, _fmt(r.exam_date), r.t1w_path, r.flair_path, r.pet_path, r.tracer,
                _fmt(r.age), r.sex, r.cognitive_status, r.dataset,
                _fmt(r.centiloid), _fmt(r.label), _fmt(r.partition), _fmt(r.fold),
            ])
    return path


# -- pairing and filtering ----------------------------------------------------------------

@dataclass
class MriExam:
    subject_id: str
    date: dt.date
    t1w_path: str = ""
    flair_path: str = ""
    info: dict = field(default_factory=dict)


@dataclass
class PetExam:
    subject_id: str
    date: dt.date
    pet_path: str = ""
    tracer: str = ""


@dataclass
class PairingResult:
    records: list[ExamRecord]
    unpaired_mri: int
    unpaired_pet: int


def pair_mri_pet(mri_exams: Sequence[MriExam], pet_exams: Sequence[PetExam], window_days: int = 30) -> PairingResult:
    """Pair each MRI with the nearest PET of the same subject within ``window_days``.

    Ties in distance go to the earlier PET.  The window is inclusive.
    """
    pets_by_subject = defaultdict(list)
    for p in pet_exams:
        pets_by_subject[p.subject_id].append(p)
    used_pets = set()
    records = []
    unpaired_mri = 0
    for m in mri_exams:
        best = None
        for p in pets_by_subject.get(m.subject_id, []):
            gap = (p.date - m.date).days
            if abs(gap) > window_days:
                continue
            key = (abs(gap), p.date)
            if best is None or key < best[0]:
                best = (key, p)
        if best is None:
            unpaired_mri += 1
            continue
        pet = best[1]
        used_pets.add(id(pet))
        info = dict(m.info)
        records.append(ExamRecord(
            subject_id=m.subject_id,
            exam_date=m.date,
            t1w_path=m.t1w_path,
            flair_path=m.flair_path,
            pet_path=pet.pet_path,
            tracer=pet.tracer,
            age=float(info.get("age", math.nan)),
            sex=info.get("sex", ""),
            cognitive_status=info.get("cognitive_status", ""),
            dataset=info.get("dataset", ""),
        ))
    unpaired_pet = sum(1 for p in pet_exams if id(p) not in used_pets)
    return PairingResult(records, unpaired_mri, unpaired_pet)


def filter_inclusion(records: Iterable[ExamRecord], date_range=DATE_RANGE,
                     tracers=("FBP", "FBB")) -> list[ExamRecord]:
    """Keep exams inside the calendar window and acquired with an accepted tracer."""
    lo, hi = date_range
    return [r for r in records if lo <= r.exam_date <= hi and (not tracers or r.tracer in tracers)]


# -- splitting -----------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_cohort(records: Sequence[ExamRecord], fractions=(0.64, 0.16, 0.20), seed: int = 0) -> list[SplitAssignment]:
    """Subject-level train/validation/test split, done independently per dataset.

    Subjects with more than one exam never enter the test partition.  The
    returned list is aligned with ``records``.  Datasets are processed in
    sorted order from one ``numpy`` generator seeded with ``seed``.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions {fractions} do not sum to 1")
    _, f_val, f_test = fractions
    exams_per_subject = Counter((r.dataset, r.subject_id) for r in records)
    by_dataset = defaultdict(set)
    for r in records:
        by_dataset[r.dataset].add(r.subject_id)
    if len(exams_per_subject) < 5:
        raise InsufficientSubjects(f"{len(exams_per_subject)} subjects; at least 5 are needed")

    rng = np.random.default_rng(seed)
    part_of = {}
    for dataset in sorted(by_dataset):
        subjects = sorted(by_dataset[dataset])
        n = len(subjects)
        order = [subjects[i] for i in rng.permutation(n)]
        n_test = _round_half_up(f_test * n)
        n_val = _round_half_up(f_val * n)
        singles = [s for s in order if exams_per_subject[(dataset, s)] == 1]
        test = set(singles[:n_test])
        rest = [s for s in order if s not in test]
        for i, s in enumerate(rest):
            part_of[(dataset, s)] = "validation" if i < n_val else "train"
        for s in test:
            part_of[(dataset, s)] = "test"
    return [SplitAssignment(part_of[(r.dataset, r.subject_id)]) for r in records]


def make_folds(records: Sequence[ExamRecord], k: int = 5, seed: int = 0) -> list[int]:
    """Assign each exam a fold in ``0..k-1``; all exams of a subject share a fold.

    Subjects are shuffled and dealt round-robin, so fold sizes (in subjects)
    differ by at most one with the larger folds first.  When labels are
    present the deal runs through shuffled positives, then shuffled negatives,
    which spreads each class evenly over the folds.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    subjects = sorted({(r.dataset, r.subject_id) for r in records})
    if len(subjects) < k:
        raise InsufficientSubjects(f"{len(subjects)} subjects cannot fill {k} folds")
    positive = {}
    for r in sorted(records, key=lambda r: (r.dataset, r.subject_id, r.exam_date)):
        positive.setdefault((r.dataset, r.subject_id), r.label_int if r.label is not None else 0)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    order = [j for j in order if positive[subjects[j]] == 1] + [j for j in order if positive[subjects[j]] != 1]
    fold_of = {subjects[j]: pos % k for pos, j in enumerate(order)}
    return [fold_of[(r.dataset, r.subject_id)] for r in records]


def assign_splits(records: Sequence[ExamRecord], fractions=(0.64, 0.16, 0.20), k: int = 5,
                  seed: int = 0) -> list[ExamRecord]:
    """Return copies of ``records`` with ``partition`` and (for training exams) ``fold`` filled in."""
    splits = split_cohort(records, fractions, seed)
    out = [replace(r, partition=s.partition, fold=None) for r, s in zip(records, splits)]
    train = [r for r in out if r.partition == "train"]
    for r, f in zip(train, make_folds(train, k, seed)):
        r.fold = f
    return out


# -- demographics -----------------------------------------------------------------------------

def chi_square_p(table) -> tuple[float, float]:
    """Pearson chi-square (no continuity correction) on a groups x categories table."""
    t = np.asarray(table, dtype=float)
    t = t[:, t.sum(axis=0) > 0]
    if t.shape[1] < 2:
        return 0.0, 1.0
    res = stats.chi2_contingency(t, correction=False)
    return float(res.statistic), float(res.pvalue)


def welch_t_from_stats(mean1, sd1, n1, mean2, sd2, n2) -> tuple[float, float]:
    if n1 < 2 or n2 < 2:
        raise DegenerateGroup("each group needs at least two observations")
    if sd1 == 0 and sd2 == 0:
        raise DegenerateGroup("both groups have zero variance")
    res = stats.ttest_ind_from_stats(mean1, sd1, n1, mean2, sd2, n2, equal_var=False)
    return float(res.statistic), float(res.pvalue)


@dataclass
class DemographicsTable:
    n: dict
    age_mean: dict
    age_sd: dict
    age_p: float
    sex_counts: dict
    sex_p: float
    cognitive_counts: dict
    cognitive_p: float

    def to_text(self) -> str:
        groups = ("positive", "negative")
        lines = [f"{'':20s}{'Amyloid +':>18s}{'Amyloid -':>18s}{'P-value':>10s}",
                 f"{'n':20s}{self.n['positive']:>18d}{self.n['negative']:>18d}",
                 f"{'Age (years)':20s}" + "".join(f"{self.age_mean[g]:>11.1f} ± {self.age_sd[g]:<4.1f}" for g in groups)
                 + f"{_fmt_p(self.age_p):>10s}",
                 f"{'Sex':20s}{'':36s}{_fmt_p(self.sex_p):>10s}"]
        for cat in sorted(self.sex_counts["positive"]):
            lines.append(f"{'  ' + cat:20s}" + "".join(f"{self.sex_counts[g][cat]:>18d}" for g in groups))
        lines.append(f"{'Cognitive status':20s}{'':36s}{_fmt_p(self.cognitive_p):>10s}")
        for cat in self.cognitive_counts["positive"]:
            lines.append(f"{'  ' + cat:20s}" + "".join(f"{self.cognitive_counts[g][cat]:>18d}" for g in groups))
        return "\n".join(lines)


def _fmt_p(p: float) -> str:
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def demographics_table(records: Sequence[ExamRecord]) -> DemographicsTable:
    """Demographic comparison of amyloid-positive vs negative exams."""
    groups = {"positive": [r for r in records if r.label == "positive"],
              "negative": [r for r in records if r.label == "negative"]}
    if not groups["positive"] or not groups["negative"]:
        raise DegenerateGroup("both label groups must be non-empty")
    ages = {g: np.array([r.age for r in rs], dtype=float) for g, rs in groups.items()}
    mean = {g: float(np.mean(a)) for g, a in ages.items()}
    sd = {g: float(np.std(a, ddof=1)) if len(a) > 1 else 0.0 for g, a in ages.items()}
    _, age_p = welch_t_from_stats(mean["positive"], sd["positive"], len(ages["positive"]),
                                  mean["negative"], sd["negative"], len(ages["negative"]))
    sexes = sorted({r.sex for r in records})
    sex_counts = {g: {s: sum(r.sex == s for r in rs) for s in sexes} for g, rs in groups.items()}
    _, sex_p = chi_square_p([[sex_counts[g][s] for s in sexes] for g in groups])
    cats = [c for c in COGNITIVE_STATUSES if any(r.cognitive_status == c for r in records)]
    cats += sorted({r.cognitive_status for r in records} - set(cats))
    cog_counts = {g: {c: sum(r.cognitive_status == c for r in rs) for c in cats} for g, rs in groups.items()}
    _, cog_p = chi_square_p([[cog_counts[g][c] for c in cats] for g in groups])
    return DemographicsTable(
        n={g: len(rs) for g, rs in groups.items()},
        age_mean=mean, age_sd=sd, age_p=age_p,
        sex_counts=sex_counts, sex_p=sex_p,
        cognitive_counts=cog_counts, cognitive_p=cog_p,
    )
