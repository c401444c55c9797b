"""Rigid intra-subject registration and a simple brain extractor.

These are desk-scale stand-ins for external tools.  The registrar minimises
the mean squared intensity difference over a three-level pyramid with a
derivative-free coordinate search; the extractor is Otsu thresholding,
largest 6-connected component and a morphological closing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, EmptyOverlap
from .volume import BrainMask, RigidTransform, _grid_indices, _trilinear, resample_isotropic
from .volume3d import Volume3D

log = logging.getLogger(__name__)

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class RegistrationConfig:
    levels: tuple = (4, 2, 1)
    max_iterations: int = 100
    tolerance: float = 1e-4
    # half-width of the initial search bracket at the coarsest level
    rotation_bracket: float = 0.25
    translation_bracket: float = 8.0
    golden_steps: int = 18
    min_overlap: float = 0.10
    # evaluate the finest level on every n-th fixed voxel per axis
    sample_stride: int = 2


@dataclass
class RegistrationResult:
    transform: RigidTransform
    final_mse: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


class _MseObjective:
    """MSE between ``fixed`` and the moved ``moving`` over their overlap."""

    def __init__(self, moving: Volume3D, fixed: Volume3D, center, stride: int = 1):
        self.moving = moving
        sub = fixed.data[::stride, ::stride, ::stride]
        self.fixed_vals = sub.reshape(-1)
        idx = _grid_indices(sub.shape) * stride
        self.world = idx @ fixed.affine[:3, :3].T + fixed.affine[:3, 3]
        self.center = np.asarray(center, dtype=float)
        inv = np.linalg.inv(moving.affine)
        self.inv_rot, self.inv_off = inv[:3, :3], inv[:3, 3]
        self.upper = np.array(moving.shape, dtype=float) - 1.0
        self.evaluations = 0

    def overlap_fraction(self, params) -> float:
        src = self._source(params)
        return float(np.mean(np.all((src >= 0) & (src <= self.upper), axis=1)))

    def _source(self, params) -> np.ndarray:
        t = RigidTransform.from_params(params)
        world = t.inverse_apply(self.world, self.center)
        return world @ self.inv_rot.T + self.inv_off

    def __call__(self, params) -> float:
        self.evaluations += 1
        src = self._source(params)
        inside = np.all((src >= -1e-9) & (src <= self.upper + 1e-9), axis=1)
        if not inside.any():
            return math.inf
        vals = _trilinear(self.moving.data, src[inside])
        diff = vals - self.fixed_vals[inside]
        return float(np.mean(diff * diff))


def _golden_line_search(f, lo: float, hi: float, steps: int):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(steps):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _golden_steps_for(width: float, tolerance: float, cap: int) -> int:
    """Golden-section steps needed to shrink a bracket of ``width`` below ``tolerance``."""
    if width <= tolerance:
        return 1
    return max(1, min(cap, int(math.ceil(math.log(tolerance / width) / math.log(_GOLDEN)))))


def _coordinate_search(obj, params, brackets, cfg: RegistrationConfig, history):
    params = params.copy()
    best = obj(params)
    brackets = brackets.copy()
    iterations = 0
    converged = False
    while iterations < cfg.max_iterations:
        iterations += 1
        step = np.zeros_like(params)
        for k in range(len(params)):
            def line(v, k=k):
                trial = params.copy()
                trial[k] = v
                return obj(trial)
            steps = _golden_steps_for(2 * brackets[k], cfg.tolerance, cfg.golden_steps)
            x, fx = _golden_line_search(line, params[k] - brackets[k], params[k] + brackets[k], steps)
            if fx < best:
                step[k] = x - params[k]
                params[k] = x
                best = fx
                history.append(best)
        # shrink around the current estimate; keep some room to move
        brackets = np.maximum(brackets * 0.5, np.abs(step) * 2.0)
        if np.max(np.abs(step)) < cfg.tolerance or np.max(brackets) < cfg.tolerance:
            converged = True
            break
    return params, best, iterations, converged


def _downsample(vol: Volume3D, factor: int) -> Volume3D:
    if factor == 1:
        return vol
    sigma = [0.4 * factor] * 3
    smooth = vol.with_data(ndimage.gaussian_filter(vol.data, sigma, mode="constant"))
    return resample_isotropic(smooth, max(vol.spacing) * factor)


def rigid_register(moving: Volume3D, fixed: Volume3D, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Find the rigid transform taking ``moving`` onto ``fixed``.

    The returned transform ``T`` minimises ``MSE(fixed, moving moved by T)``
    with rotations about the fixed grid's center, so for volumes on one grid
    ``apply_rigid(moving, T)`` approximates ``fixed``.
    """
    cfg = cfg or RegistrationConfig()
    center = fixed.center_world
    full = _MseObjective(moving, fixed, center)
    if full.overlap_fraction(np.zeros(6)) < cfg.min_overlap:
        raise EmptyOverlap("moving and fixed volumes barely overlap under the initial pose")

    params = np.zeros(6)
    brackets = np.array([cfg.rotation_bracket] * 3 + [cfg.translation_bracket] * 3)
    history: list[float] = []
    total_iter = 0
    converged = False
    best = full(params)
    for level, factor in enumerate(cfg.levels):
        stride = cfg.sample_stride if factor == 1 else 1
        obj = _MseObjective(_downsample(moving, factor), _downsample(fixed, factor), center, stride)
        params, best, it, converged = _coordinate_search(obj, params, brackets, cfg, history)
        total_iter += it
        log.debug("level x%d: params=%s mse=%.6g iterations=%d", factor, np.round(params, 4), best, it)
        # finer levels start with tighter brackets
        brackets = np.maximum(brackets * 0.25, 4 * cfg.tolerance)
    final = full(params)
    return RegistrationResult(RigidTransform.from_params(params), final, total_iter, converged, history)


# -- brain extraction ----------------------------------------------------------------------

def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's threshold maximising the between-class variance.

    Foreground is ``values > threshold``.  With few distinct values the scan
    runs over midpoints between them exactly; otherwise over a histogram.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    uniq, counts = np.unique(v, return_counts=True)
    if len(uniq) < 2:
        raise EmptyMask("no intensity contrast to threshold")
    if len(uniq) > 4096:
        counts, edges = np.histogram(v, bins=bins)
        centers = 0.5 * (edges[:-1] + edges[1:])
        cuts = edges[1:-1]
    else:
        centers = uniq
        cuts = 0.5 * (uniq[:-1] + uniq[1:])
    w = counts.astype(np.float64)
    total = w.sum()
    w0 = np.cumsum(w)[:-1]
    w1 = total - w0
    s0 = np.cumsum(w * centers)[:-1]
    mu0 = s0 / np.where(w0 > 0, w0, 1)
    mu1 = (np.sum(w * centers) - s0) / np.where(w1 > 0, w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -1.0
    return float(cuts[int(np.argmax(between))])


def ball(radius_mm: float, spacing) -> np.ndarray:
    """Ellipsoidal structuring element covering ``radius_mm`` on an anisotropic grid."""
    half = [max(0, int(math.floor(radius_mm / s))) for s in spacing]
    grids = np.meshgrid(*[np.arange(-h, h + 1) * s for h, s in zip(half, spacing)], indexing="ij")
    return sum(g * g for g in grids) <= radius_mm * radius_mm + 1e-9


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=ndimage.generate_binary_structure(3, 1))
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


@dataclass
class ExtractionConfig:
    radius_mm: float = 2.0


def extract_brain(vol: Volume3D, cfg: ExtractionConfig | None = None) -> BrainMask:
    """Otsu threshold, keep the largest 6-connected component, close with a ball."""
    cfg = cfg or ExtractionConfig()
    if float(vol.data.max() - vol.data.min()) <= 0:
        raise EmptyMask("volume has no dynamic range")
    thr = otsu_threshold(vol.data)
    fg = vol.data > thr
    if not fg.any():
        raise EmptyMask("no voxel above the Otsu threshold")
    comp = largest_component(fg)
    se = ball(cfg.radius_mm, vol.spacing)
    pad = [(h, h) for h in (np.array(se.shape) // 2)]
    closed = ndimage.binary_closing(np.pad(comp, pad), structure=se)
    sl = tuple(slice(p[0], p[0] + n) for p, n in zip(pad, vol.shape))
    return BrainMask.like(vol, closed[sl])
