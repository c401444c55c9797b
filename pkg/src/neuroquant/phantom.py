"""Deterministic synthetic cohorts: two-channel MRI-like volumes, PET and demographics.

Geometry (voxel units, LPI grid, 1 mm voxels by default):

* brain: ellipsoid near the grid center with per-subject jitter;
* ventricle: central ellipsoid, dilated by ``ch1_effect_mm`` in positives;
* channel 1 (T1w-like): brain 0.7, ventricle 0.2, background 0;
* channel 2 (FLAIR-like): brain 0.5, ventricle 0.1, plus in positives
  3-6 balls of radius 2-4 placed 1-3 voxels outside the ventricle
  surface, brightened by ``ch2_effect``;
* PET: shared template masks (cortical shell target, inferior-posterior
  "cerebellum" reference), reference uptake ``g`` and target uptake
  ``g * SUVR`` where SUVR comes from a centiloid drawn on the intended
  side of the tracer cutoff.

Every subject draws from its own generator seeded by ``(seed, index)``,
and the random stream is consumed identically for both labels.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cohort import ExamRecord, write_manifest
from .nifti import save_nifti
from .quant import TracerCalibration, load_calibration_profiles, profile_for, suvr_from_centiloid
from .volume import BrainMask
from .volume3d import Volume3D, affine_for_orientation

log = logging.getLogger(__name__)

COGNITIVE_PROBS = {0: (0.70, 0.25, 0.05), 1: (0.45, 0.40, 0.15)}
COGNITIVE_LABELS = ("CN", "MCI", "dementia")


COHORT_STREAM = 0x5EED


@dataclass(frozen=True)
class PhantomSpec:
    n_subjects: int = 100
    grid: int = 32
    spacing_mm: float = 1.0
    positive_fraction: float = 0.55
    ch1_effect_mm: float = 1.0
    ch2_effect: float = 0.6
    noise_sd: float = 0.05
    longitudinal_fraction: float = 0.1
    seed: int = 0
    pet_noise_sd: float = 0.05
    cl_margin: float = 2.0
    fbb_fraction: float = 0.5
    dataset: str = "PHANTOM"
    blob_count: tuple = (3, 6)
    blob_radius: tuple = (2, 4)

    def __post_init__(self):
        if not 0 < self.positive_fraction < 1:
            raise ValueError("positive_fraction must lie in (0, 1)")
        if self.ch1_effect_mm < 0 or self.ch2_effect < 0:
            raise ValueError("effect sizes must be >= 0")
        if not 0 <= self.longitudinal_fraction <= 1:
            raise ValueError("longitudinal_fraction must lie in [0, 1]")
        if self.n_subjects < 1 or self.grid < 16:
            raise ValueError("need at least one subject and a grid of at least 16 voxels")
        if self.noise_sd < 0 or self.pet_noise_sd < 0:
            raise ValueError("noise levels must be >= 0")
        object.__setattr__(self, "blob_count", tuple(self.blob_count))
        object.__setattr__(self, "blob_radius", tuple(self.blob_radius))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blob_count"], d["blob_radius"] = list(self.blob_count), list(self.blob_radius)
        return d


@dataclass
class SubjectDraw:
    """Subject-level parameters shared by all of a subject's exams."""

    index: int
    positive: bool
    brain_axes: np.ndarray
    brain_center: np.ndarray
    ventricle_axes: np.ndarray
    exams: list = field(default_factory=list)   # (date, age, centiloid, tracer)


def _grid(n: int):
    ax = np.arange(n, dtype=np.float64)
    return np.meshgrid(ax, ax, ax, indexing="ij")


def _ellipsoid_radius(coords, center, axes) -> np.ndarray:
    """Normalized ellipsoidal radius; <= 1 inside."""
    return np.sqrt(sum(((c - c0) / a) ** 2 for c, c0, a in zip(coords, center, axes)))


def template_masks(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Target (cortical shell) and reference (cerebellum stand-in) masks on the template brain."""
    n = spec.grid
    coords = _grid(n)
    c = np.full(3, (n - 1) / 2.0)
    rho = _ellipsoid_radius(coords, c, np.array([0.40, 0.44, 0.38]) * n)
    ref_center = c + np.array([0.0, 0.20, 0.17]) * n
    reference = _ellipsoid_radius(coords, ref_center, np.array([0.16, 0.10, 0.08]) * n) <= 1.0
    target = (rho >= 0.72) & (rho <= 0.95) & ~reference
    reference &= rho <= 0.95
    return target, reference


def _draw_subject(spec: PhantomSpec, index: int, positive: bool, n_exams: int,
                  profiles: dict) -> SubjectDraw:
    rng = np.random.default_rng([spec.seed, index, 0])
    n = spec.grid
    brain_axes = np.array([0.40, 0.44, 0.38]) * n * rng.uniform(0.96, 1.04, 3)
    brain_center = np.full(3, (n - 1) / 2.0) + rng.uniform(-0.75, 0.75, 3)
    vent_axes = np.array([0.09, 0.15, 0.08]) * n * rng.uniform(0.85, 1.15, 3)
    if positive:
        vent_axes = vent_axes + spec.ch1_effect_mm / spec.spacing_mm
    base_age = float(np.clip(rng.normal(72.0, 6.0), 55.0, 90.0))
    first = dt.date(2012, 1, 1) + dt.timedelta(days=int(rng.integers(0, 365 * 8)))
    tracer = "FBB" if rng.random() < spec.fbb_fraction else "FBP"
    cal = profile_for(spec.dataset, tracer, profiles)
    draw = SubjectDraw(index, positive, brain_axes, brain_center, vent_axes)
    date, age = first, base_age
    for e in range(n_exams):
        if e:
            gap = int(rng.integers(365, 3 * 365))
            date = date + dt.timedelta(days=gap)
            age += gap / 365.25
        if positive:
            cl = cal.cutoff_cl + spec.cl_margin + float(rng.gamma(2.0, 15.0))
        else:
            cl = cal.cutoff_cl - spec.cl_margin - float(rng.gamma(2.0, 8.0))
        draw.exams.append((date, round(age, 1), cl, tracer))
    return draw


def _blob_centers(rng, spec: PhantomSpec, draw: SubjectDraw) -> list:
    """Blob centers 1-3 voxels outside the ventricle surface, plus radii."""
    count = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    out = []
    for _ in range(spec.blob_count[1]):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        surface = 1.0 / np.sqrt(np.sum((u / draw.ventricle_axes) ** 2))
        d = rng.uniform(1.0, 3.0)
        r = int(rng.integers(spec.blob_radius[0], spec.blob_radius[1] + 1))
        out.append((draw.brain_center + u * (surface + d + r * 0.5), r))
    return out[:count]


def render_exam(spec: PhantomSpec, draw: SubjectDraw, exam: int, cal: TracerCalibration,
                masks=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Channel-1, channel-2 and PET arrays for one exam."""
    rng = np.random.default_rng([spec.seed, draw.index, exam + 1])
    n = spec.grid
    coords = _grid(n)
    brain = _ellipsoid_radius(coords, draw.brain_center, draw.brain_axes) <= 1.0
    vent = _ellipsoid_radius(coords, draw.brain_center, draw.ventricle_axes) <= 1.0
    t1 = np.where(brain, 0.7, 0.0)
    t1[vent] = 0.2
    flair = np.where(brain, 0.5, 0.0)
    flair[vent] = 0.1
    blobs = _blob_centers(rng, spec, draw)
    if draw.positive and spec.ch2_effect > 0:
        for center, r in blobs:
            ball = _ellipsoid_radius(coords, center, (r, r, r)) <= 1.0
            flair[ball & brain & ~vent] += spec.ch2_effect
    t1 += rng.normal(0.0, spec.noise_sd, t1.shape)
    flair += rng.normal(0.0, spec.noise_sd, flair.shape)

    target, reference = masks if masks is not None else template_masks(spec)
    _, _, cl, _ = draw.exams[exam]
    g = rng.uniform(0.8, 1.2)
    template_brain = target | reference | (_ellipsoid_radius(coords, np.full(3, (n - 1) / 2.0),
                                                             np.array([0.40, 0.44, 0.38]) * n) <= 1.0)
    pet = np.where(template_brain, g, 0.0)
    pet[target] = g * suvr_from_centiloid(cl, cal)
    pet += rng.normal(0.0, spec.pet_noise_sd * g, pet.shape)
    return t1, flair, pet


@dataclass
class PhantomCohort:
    spec: PhantomSpec
    records: list
    subjects: list
    exam_index: list            # (subject position, exam number) per record
    calibrations: list          # per record
    target_mask: BrainMask
    reference_mask: BrainMask
    affine: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label_int for r in self.records])

    def render(self, i: int) -> tuple[Volume3D, Volume3D, Volume3D]:
        s, e = self.exam_index[i]
        masks = (self.target_mask.bool_data, self.reference_mask.bool_data)
        t1, flair, pet = render_exam(self.spec, self.subjects[s], e, self.calibrations[i], masks)
        return Volume3D(t1, self.affine), Volume3D(flair, self.affine), Volume3D(pet, self.affine)

    def arrays(self, indices=None, channels: int = 2, dtype=np.float64) -> np.ndarray:
        """Stacked MRI channels, shape (N, channels, X, Y, Z)."""
        idx = range(len(self.records)) if indices is None else indices
        out = []
        for i in idx:
            t1, flair, _ = self.render(i)
            out.append(np.stack([t1.data, flair.data][:channels]))
        return np.asarray(out, dtype=dtype)


def generate_cohort(spec: PhantomSpec, out_dir=None, render: bool = True,
                    profiles: dict | None = None) -> PhantomCohort:
    """Build the cohort; with ``out_dir`` also write volumes, masks and ``manifest.csv``.

    File layout: ``<subject>/<date>/{t1w,flair,pet}.nii.gz`` plus
    ``masks/{target,reference}.nii.gz``.  Paths in the manifest are
    relative to ``out_dir``.
    """
    profiles = profiles if profiles is not None else load_calibration_profiles()
    # tagged stream: a bare default_rng(seed) would replay the permutation split_cohort draws
    master = np.random.default_rng([spec.seed, COHORT_STREAM])
    n = spec.n_subjects
    n_pos = int(np.floor(spec.positive_fraction * n + 0.5))
    positive = np.zeros(n, dtype=bool)
    positive[master.permutation(n)[:n_pos]] = True
    n_long = int(np.floor(spec.longitudinal_fraction * n + 0.5))
    longitudinal = np.zeros(n, dtype=bool)
    longitudinal[master.permutation(n)[:n_long]] = True

    affine = affine_for_orientation("LPI", (spec.spacing_mm,) * 3,
                                    origin=(spec.spacing_mm * (spec.grid - 1) / 2.0,) * 3)
    target, reference = template_masks(spec)
    cohort = PhantomCohort(spec, [], [], [], [], BrainMask(target, affine), BrainMask(reference, affine), affine)
    for i in range(n):
        draw = _draw_subject(spec, i, bool(positive[i]), 2 if longitudinal[i] else 1, profiles)
        cohort.subjects.append(draw)
        srng = np.random.default_rng([spec.seed, i, 1000])
        sex = "F" if srng.random() < 0.55 else "M"
        for e, (date, age, cl, tracer) in enumerate(draw.exams):
            probs = COGNITIVE_PROBS[int(draw.positive)]
            status = COGNITIVE_LABELS[int(srng.choice(3, p=probs))]
            rec = ExamRecord(
                subject_id=f"PH{i:04d}", exam_date=date, tracer=tracer, age=age, sex=sex,
                cognitive_status=status, dataset=spec.dataset, centiloid=cl,
                label="positive" if draw.positive else "negative",
            )
            cohort.records.append(rec)
            cohort.exam_index.append((i, e))
            cohort.calibrations.append(profile_for(spec.dataset, tracer, profiles))

    if out_dir is not None:
        out = Path(out_dir)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        save_nifti(cohort.target_mask, out / "masks" / "target.nii.gz", "uint8")
        save_nifti(cohort.reference_mask, out / "masks" / "reference.nii.gz", "uint8")
        for k, rec in enumerate(cohort.records):
            rel = Path(rec.subject_id) / rec.exam_date.isoformat()
            rec.t1w_path = str(rel / "t1w.nii.gz")
            rec.flair_path = str(rel / "flair.nii.gz")
            rec.pet_path = str(rel / "pet.nii.gz")
            if render:
                (out / rel).mkdir(parents=True, exist_ok=True)
                for vol, p in zip(cohort.render(k), (rec.t1w_path, rec.flair_path, rec.pet_path)):
                    save_nifti(vol, out / p, "float32")
        write_manifest(cohort.records, out / "manifest.csv")
        log.info("wrote %d exams of %d subjects to %s", len(cohort.records), n, out)
    return cohort
