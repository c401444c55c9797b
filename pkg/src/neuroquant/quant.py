"""Amyloid PET quantification: SUVR, centiloid conversion and status."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from importlib import resources

import numpy as np

from .errors import ConfigError, EmptyMask, GridMismatch, ZeroReference
from .volume3d import Volume3D


class Tracer(str, Enum):
    FBP = "FBP"
    FBB = "FBB"
    CUSTOM = "custom"


class Status(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class TracerCalibration:
    """Linear SUVR-to-centiloid map plus the positivity cutoff.

    ``inclusive`` selects whether a centiloid exactly at the cutoff counts
    as positive (the default).
    """

    tracer: Tracer
    slope: float
    intercept: float
    cutoff_cl: float
    inclusive: bool = True

    def __post_init__(self):
        object.__setattr__(self, "tracer", Tracer(self.tracer))
        if not self.slope > 0:
            raise ConfigError(f"calibration slope must be positive, got {self.slope}")
        if not np.isfinite(self.cutoff_cl) or not np.isfinite(self.intercept):
            raise ConfigError("calibration intercept and cutoff must be finite")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tracer"] = self.tracer.value
        return d


@dataclass(frozen=True)
class AmyloidResult:
    suvr: float
    centiloid: float
    status: Status
    tracer: Tracer


def load_calibration_profiles(path=None) -> dict[str, TracerCalibration]:
    """Read named calibration profiles from JSON (packaged defaults when ``path`` is None)."""
    if path is None:
        text = resources.files("neuroquant").joinpath("data/calibration.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = json.loads(text)
    profiles = {}
    for name, entry in raw["profiles"].items():
        profiles[name] = TracerCalibration(
            tracer=entry["tracer"],
            slope=float(entry["slope"]),
            intercept=float(entry["intercept"]),
            cutoff_cl=float(entry["cutoff_cl"]),
            inclusive=bool(entry.get("inclusive", True)),
        )
    return profiles


def _mask_mean(pet: Volume3D, mask: Volume3D, what: str) -> float:
    if mask.shape != pet.shape:
        raise GridMismatch(f"{what} mask grid {mask.shape} differs from PET grid {pet.shape}")
    sel = mask.data > 0.5
    if not sel.any():
        raise EmptyMask(f"{what} mask is empty")
    return float(np.mean(pet.data[sel]))


def compute_suvr(pet: Volume3D, target: Volume3D, reference: Volume3D) -> float:
    """Mean uptake in ``target`` divided by mean uptake in ``reference``."""
    num = _mask_mean(pet, target, "target")
    den = _mask_mean(pet, reference, "reference")
    if abs(den) < 1e-12:
        raise ZeroReference("reference region mean is zero")
    return num / den


def centiloid_from_suvr(suvr: float, cal: TracerCalibration) -> float:
    return cal.slope * suvr + cal.intercept


def suvr_from_centiloid(centiloid: float, cal: TracerCalibration) -> float:
    return (centiloid - cal.intercept) / cal.slope


def classify_status(centiloid: float, cal: TracerCalibration) -> Status:
    positive = centiloid >= cal.cutoff_cl if cal.inclusive else centiloid > cal.cutoff_cl
    return Status.POSITIVE if positive else Status.NEGATIVE


def quantify(pet: Volume3D, target: Volume3D, reference: Volume3D, cal: TracerCalibration) -> AmyloidResult:
    suvr = compute_suvr(pet, target, reference)
    cl = centiloid_from_suvr(suvr, cal)
    return AmyloidResult(suvr, cl, classify_status(cl, cal), cal.tracer)


def profile_for(dataset: str, tracer: str, profiles: dict[str, TracerCalibration]) -> TracerCalibration:
    """Pick a calibration: a dataset-specific profile wins over the tracer default."""
    for key in (f"{dataset}:{tracer}", dataset, tracer):
        if key in profiles:
            return profiles[key]
    raise ConfigError(f"no calibration profile for dataset={dataset!r} tracer={tracer!r}")
