"""Occlusion activation maps and per-case image bundles."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import expit

from .errors import GridMismatch, ScorerChannelMismatch
from .nifti import save_nifti
from .volume3d import Volume3D

log = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-12


class Scorer(Protocol):
    """Maps (C, X, Y, Z) inputs to probabilities; must be deterministic."""

    in_channels: int

    def score_batch(self, batch: np.ndarray) -> np.ndarray:
        ...


class LinearScorer:
    """``sigmoid(sum(w * v) + b)``; analytic reference for occlusion."""

    def __init__(self, weights, bias: float = 0.0):
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ValueError("weights must have shape (C, X, Y, Z)")
        self.bias = float(bias)
        self.in_channels = self.weights.shape[0]

    def logit(self, x) -> float:
        return float(np.sum(self.weights * x) + self.bias)

    def score_batch(self, batch) -> np.ndarray:
        b = np.asarray(batch, dtype=np.float64)
        z = b.reshape(len(b), -1) @ self.weights.ravel() + self.bias
        return expit(z)

    def __call__(self, x) -> float:
        return float(self.score_batch(np.asarray(x)[None])[0])


class ConstantScorer:
    def __init__(self, value: float = 0.5, in_channels: int = 1):
        self.value, self.in_channels = float(value), in_channels

    def score_batch(self, batch) -> np.ndarray:
        return np.full(len(batch), self.value)


class NetworkScorer:
    """Wraps a trained network, or an ensemble of fold models whose probabilities are averaged."""

    def __init__(self, net, params, batch_size: int = 16):
        self.net = net
        self.params = list(params) if isinstance(params, (list, tuple)) else [params]
        self.batch_size = batch_size
        self.in_channels = net.config.in_channels

    def score_batch(self, batch) -> np.ndarray:
        batch = np.asarray(batch)
        return np.mean([self.net.predict(p, batch, self.batch_size) for p in self.params], axis=0)


@dataclass
class ActivationMap:
    values: np.ndarray          # final map in [0, 1]; low = high impact
    raw: np.ndarray             # masked-input score assigned to each voxel
    delta: np.ndarray           # |raw - baseline|
    affine: np.ndarray
    kernel: int
    stride: int
    baseline: float
    channels: tuple
    degenerate: bool = False

    def to_volume(self) -> Volume3D:
        return Volume3D(self.values, self.affine)


def _stack_input(inp) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(inp, np.ndarray):
        arr = np.asarray(inp, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        return arr, np.eye(4)
    vols = list(inp) if not isinstance(inp, Volume3D) else [inp]
    for v in vols[1:]:
        if not v.same_grid(vols[0]):
            raise GridMismatch("input channels must share one grid")
    return np.stack([v.data for v in vols]), vols[0].affine


def _nearest_center(n: int, centers: np.ndarray, stride: int) -> np.ndarray:
    """Index into ``centers`` of the nearest center for each voxel; ties go to the lower center."""
    idx = np.ceil(np.arange(n) / stride - 0.5).astype(int)
    return np.clip(idx, 0, len(centers) - 1)


def occlusion_map(inp, scorer: Scorer, kernel: int = 7, stride: int = 1, channels="all",
                  batch_size: int = 64) -> ActivationMap:
    """Zero a ``kernel``-cube around every center, score it, and build the impact map.

    Kernels are clipped at the volume edges.  ``channels`` is ``"all"`` or
    a sequence of channel indices to mask.  With ``stride > 1`` each voxel
    takes the score of its nearest center.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel must be an odd integer >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    arr, affine = _stack_input(inp)
    C = arr.shape[0]
    if getattr(scorer, "in_channels", C) != C:
        raise ScorerChannelMismatch(f"scorer expects {scorer.in_channels} channels, input has {C}")
    chans = tuple(range(C)) if channels == "all" else tuple(int(c) for c in channels)
    if not chans or any(not 0 <= c < C for c in chans):
        raise ValueError(f"invalid channel selection {channels!r}")
    shape = arr.shape[1:]
    h = kernel // 2
    baseline = float(scorer.score_batch(arr[None])[0])

    grids = [np.arange(0, n, stride) for n in shape]
    centers = [(a, b, c) for a in grids[0] for b in grids[1] for c in grids[2]]
    scores = np.empty(len(centers))
    for start in range(0, len(centers), batch_size):
        chunk = centers[start:start + batch_size]
        batch = np.repeat(arr[None], len(chunk), axis=0)
        for i, (a, b, c) in enumerate(chunk):
            batch[i][np.ix_(chans, range(max(a - h, 0), min(a + h + 1, shape[0])),
                            range(max(b - h, 0), min(b + h + 1, shape[1])),
                            range(max(c - h, 0), min(c + h + 1, shape[2])))] = 0.0
        scores[start:start + len(chunk)] = scorer.score_batch(batch)
    coarse = scores.reshape([len(g) for g in grids])
    near = [_nearest_center(n, g, stride) for n, g in zip(shape, grids)]
    raw = coarse[np.ix_(*near)]

    delta = np.abs(raw - baseline)
    lo, hi = float(delta.min()), float(delta.max())
    if hi < DEGENERATE_TOL:
        log.warning("occlusion map is degenerate: max |delta| = %.3g", hi)
        values, degenerate = np.ones(shape), True
    else:
        values, degenerate = 1.0 - (delta - lo) / (hi - lo), False
    return ActivationMap(values, raw, delta, affine, kernel, stride, baseline, chans, degenerate)


def _to_u8(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-12:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round(255.0 * (img - lo) / (hi - lo)).astype(np.uint8)


def mid_slice_montage(data: np.ndarray) -> np.ndarray:
    """Three orthogonal mid-slices side by side, each scaled to 0-255."""
    x, y, z = (n // 2 for n in data.shape)
    tiles = [data[x, :, :], data[:, y, :], data[:, :, z]]
    height = max(t.shape[0] for t in tiles)
    padded = [np.pad(_to_u8(t), ((0, height - t.shape[0]), (0, 1))) for t in tiles]
    return np.concatenate(padded, axis=1)


def write_pgm(img: np.ndarray, path) -> Path:
    path = Path(path)
    img = np.asarray(img, dtype=np.uint8)
    path.write_bytes(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header: four whitespace-separated tokens, then exactly one whitespace byte before the pixels
    m = re.match(rb"(P5)\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None or int(m.group(4)) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(m.group(2)), int(m.group(3))
    body = raw[m.end():]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def case_report(inputs: Sequence[Volume3D], pet: Volume3D, amap: ActivationMap, out_dir,
                names: Sequence[str] = ("t1w", "flair")) -> dict:
    """Write input channels, PET and the map as NIfTI plus PGM mid-slice montages."""
    vols = list(inputs)
    ref = vols[0]
    for v in vols[1:] + [pet]:
        if not v.same_grid(ref):
            raise GridMismatch("input channels and PET must share one grid")
    if amap.values.shape != ref.shape or not np.allclose(amap.affine, ref.affine, atol=1e-9):
        raise GridMismatch("activation map grid differs from the input grid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = list(zip(names, vols)) + [("pet", pet), ("map", amap.to_volume())]
    written = {}
    for name, vol in items:
        written[name] = save_nifti(vol, out / f"{name}.nii.gz", "float64")
        written[f"{name}_montage"] = write_pgm(mid_slice_montage(vol.data), out / f"{name}.pgm")
    return written
