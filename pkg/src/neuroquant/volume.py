"""Geometric and intensity preprocessing of volumes.

Covers reorientation to LPI, trilinear sampling and isotropic resampling,
mask-restricted percentile normalisation, rigid transforms about the grid
center, and the random-rotation augmentation used during training.
Everything outside the sampled grid is filled with 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateIntensityRange, EmptyMask, GridMismatch, ObliqueAffine
from .volume3d import Volume3D

_BOUNDS_TOL = 1e-9


class BrainMask(Volume3D):
    """Binary volume sharing a companion image's grid."""

    def __init__(self, data, affine=None):
        arr = np.asarray(data)
        if arr.dtype == bool:
            arr = arr.astype(np.float64)
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask values must be 0 or 1")
        super().__init__(arr, affine)

    @classmethod
    def like(cls, vol: Volume3D, data) -> "BrainMask":
        return cls(np.asarray(data), vol.affine)

    @property
    def bool_data(self) -> np.ndarray:
        return self.data > 0.5

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))


# -- reorientation ------------------------------------------------------------------

def reorient_to_lpi(vol: Volume3D, tol: float = 1e-3) -> Volume3D:
    """Re-index the voxel array so axes increase toward Left, Posterior, Inferior.

    Each voxel keeps its value and its world coordinate; only the index
    order and the affine change.  Raises :class:`ObliqueAffine` when an axis
    direction is more than ``tol`` away from a world axis.
    """
    rot = vol.affine[:3, :3]
    dirs = rot / np.linalg.norm(rot, axis=0)
    world_of_axis = np.argmax(np.abs(dirs), axis=0)
    if sorted(world_of_axis.tolist()) != [0, 1, 2]:
        raise ObliqueAffine("voxel axes do not map onto distinct world axes")
    for j, w in enumerate(world_of_axis):
        target = np.zeros(3)
        target[w] = np.sign(dirs[w, j])
        if np.max(np.abs(dirs[:, j] - target)) > tol:
            raise ObliqueAffine(f"axis {j} direction {dirs[:, j]} is not axis-aligned")

    # output axis w is input axis j with world_of_axis[j] == w
    in_axis_for_out = [int(np.nonzero(world_of_axis == w)[0][0]) for w in range(3)]
    data = np.transpose(vol.data, in_axis_for_out)
    # LPI wants every axis pointing toward negative world
    perm = np.zeros((4, 4))
    perm[3, 3] = 1.0
    flips = []
    for w, j in enumerate(in_axis_for_out):
        n = vol.shape[j]
        if dirs[w, j] > 0:
            flips.append(w)
            perm[j, w] = -1.0
            perm[j, 3] = n - 1
        else:
            perm[j, w] = 1.0
    if flips:
        data = np.flip(data, axis=tuple(flips))
    return Volume3D(np.ascontiguousarray(data), vol.affine @ perm)


# -- sampling -------------------------------------------------------------------------

def _trilinear(data: np.ndarray, pts: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample ``data`` (X, Y, Z) or (C, X, Y, Z) at continuous indices ``pts`` (N, 3)."""
    squeeze = data.ndim == 3
    arr = data[None] if squeeze else data
    shape = np.array(arr.shape[1:])
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    inside = np.all((pts >= -_BOUNDS_TOL) & (pts <= shape - 1 + _BOUNDS_TOL), axis=1)
    p = np.clip(pts, 0.0, shape - 1)
    i0 = np.minimum(np.floor(p).astype(np.intp), np.maximum(shape - 2, 0))
    frac = p - i0
    i1 = np.minimum(i0 + 1, shape - 1)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    x0, y0, z0 = i0.T
    x1, y1, z1 = i1.T
    out = (
        arr[:, x0, y0, z0] * ((1 - fx) * (1 - fy) * (1 - fz))
        + arr[:, x1, y0, z0] * (fx * (1 - fy) * (1 - fz))
        + arr[:, x0, y1, z0] * ((1 - fx) * fy * (1 - fz))
        + arr[:, x1, y1, z0] * (fx * fy * (1 - fz))
        + arr[:, x0, y0, z1] * ((1 - fx) * (1 - fy) * fz)
        + arr[:, x1, y0, z1] * (fx * (1 - fy) * fz)
        + arr[:, x0, y1, z1] * ((1 - fx) * fy * fz)
        + arr[:, x1, y1, z1] * (fx * fy * fz)
    )
    out[:, ~inside] = fill
    return out[0] if squeeze else out


def trilinear_sample(vol: Volume3D, point) -> float | np.ndarray:
    """Trilinear interpolation at continuous voxel index ``point``.

    ``point`` may be a single (3,) index or an (..., 3) array of them.
    Points outside ``[0, n - 1]`` on any axis return 0.
    """
    pts = np.asarray(point, dtype=np.float64)
    vals = _trilinear(vol.data, pts.reshape(-1, 3))
    if pts.ndim == 1:
        return float(vals[0])
    return vals.reshape(pts.shape[:-1])


def _grid_indices(shape) -> np.ndarray:
    """All voxel indices of ``shape`` as an (N, 3) array in C order."""
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), axis=-1).reshape(-1, 3)


def resample_isotropic(vol: Volume3D, target_spacing_mm: float = 1.0) -> Volume3D:
    """Resample onto a grid with ``target_spacing_mm`` on every axis.

    New dims are ``floor(n * s / target + 0.5)`` (at least 1).  Axis
    directions are kept and the grid is centered on the old grid's center,
    so the field of view is preserved whenever ``n * s`` divides evenly.
    """
    if target_spacing_mm <= 0:
        raise ValueError("target spacing must be positive")
    spacing = np.array(vol.spacing)
    n_old = np.array(vol.shape, dtype=float)
    n_new = np.maximum(1, np.floor(n_old * spacing / target_spacing_mm + 0.5)).astype(int)
    dirs = vol.affine[:3, :3] / spacing
    new_aff = np.eye(4)
    new_aff[:3, :3] = dirs * target_spacing_mm
    new_aff[:3, 3] = vol.center_world - new_aff[:3, :3] @ ((n_new - 1) / 2.0)
    return resample_to_grid(vol, new_aff, tuple(int(n) for n in n_new))


def resample_to_grid(vol: Volume3D, affine: np.ndarray, shape, transform: "RigidTransform | None" = None,
                     center=None) -> Volume3D:
    """Sample ``vol`` on an arbitrary target grid, optionally through a rigid transform.

    The value at target voxel ``p`` is ``vol`` at world point ``T^-1(A p)``.
    """
    idx = _grid_indices(shape)
    world = idx @ affine[:3, :3].T + affine[:3, 3]
    if transform is not None and not transform.is_identity():
        c = vol.center_world if center is None else np.asarray(center, dtype=float)
        world = transform.inverse_apply(world, c)
    src = vol.voxel_coords(world)
    return Volume3D(_trilinear(vol.data, src).reshape(shape), affine)


# -- intensity ---------------------------------------------------------------------------

def percentile_normalize(vol: Volume3D, mask: Volume3D | None = None, lo_pct: float = 5.0,
                         hi_pct: float = 95.0) -> Volume3D:
    """Map the in-mask ``[p_lo, p_hi]`` intensity range onto ``[0, 1]``.

    Percentiles use linear interpolation between sorted samples.  Values are
    clamped to ``[0, 1]`` and voxels outside the mask become 0.  With
    ``mask=None`` the whole volume is the normalisation domain.
    """
    if not lo_pct < hi_pct:
        raise ValueError("lo_pct must be below hi_pct")
    if mask is None:
        inside = np.ones(vol.shape, dtype=bool)
    else:
        if mask.shape != vol.shape:
            raise GridMismatch("mask and volume grids differ")
        inside = mask.data > 0.5
    if not inside.any():
        raise EmptyMask("normalisation mask is empty")
    p_lo, p_hi = np.percentile(vol.data[inside], [lo_pct, hi_pct], method="linear")
    if p_hi - p_lo < 1e-12:
        raise DegenerateIntensityRange(f"in-mask percentile range {p_hi - p_lo:g} is degenerate")
    out = np.clip((vol.data - p_lo) / (p_hi - p_lo), 0.0, 1.0)
    out[~inside] = 0.0
    return vol.with_data(out)


def apply_mask(vol: Volume3D, mask: Volume3D) -> Volume3D:
    if mask.shape != vol.shape:
        raise GridMismatch("mask and volume grids differ")
    return vol.with_data(np.where(mask.data > 0.5, vol.data, 0.0))


def fit_to_shape(arr: np.ndarray, shape) -> np.ndarray:
    """Center-crop or zero-pad the trailing three axes of ``arr`` to ``shape``."""
    out = arr
    for ax_off, target in enumerate(shape):
        ax = arr.ndim - 3 + ax_off
        n = out.shape[ax]
        if n > target:
            start = (n - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=ax)
        elif n < target:
            before = (target - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[ax] = (before, target - n - before)
            out = np.pad(out, pad)
    return out


def fit_volume(vol: Volume3D, shape) -> Volume3D:
    """:func:`fit_to_shape` for a volume, shifting the affine so world positions are kept."""
    shift = np.zeros(3)
    for ax, target in enumerate(shape):
        n = vol.shape[ax]
        shift[ax] = (n - target) // 2 if n > target else -((target - n) // 2)
    aff = vol.affine.copy()
    aff[:3, 3] = aff[:3, 3] + aff[:3, :3] @ shift
    return Volume3D(fit_to_shape(vol.data, shape), aff)


# -- rigid transforms ----------------------------------------------------------------------

def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """``Rz @ Ry @ Rx`` (x rotation applied first)."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_z @ rot_y @ rot_x


def euler_from_matrix(rot: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_matrix` (valid for |ry| < pi/2)."""
    ry = math.atan2(-rot[2, 0], math.hypot(rot[2, 1], rot[2, 2]))
    rx = math.atan2(rot[2, 1], rot[2, 2])
    rz = math.atan2(rot[1, 0], rot[0, 0])
    return rx, ry, rz


@dataclass(frozen=True)
class RigidTransform:
    """Six-DOF rigid motion: rotation about a center (radians), then translation (mm).

    Maps world point ``x`` to ``R (x - c) + c + t`` where the center ``c`` is
    supplied by the volume being transformed.
    """

    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    @classmethod
    def from_params(cls, params: Sequence[float]) -> "RigidTransform":
        return cls(*(float(p) for p in params))

    @property
    def params(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz, self.tx, self.ty, self.tz])

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.rx, self.ry, self.rz)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    def is_identity(self) -> bool:
        return not np.any(self.params)

    def apply(self, world, center) -> np.ndarray:
        c = np.asarray(center, dtype=float)
        return (np.asarray(world, dtype=float) - c) @ self.rotation.T + c + self.translation

    def inverse_apply(self, world, center) -> np.ndarray:
        c = np.asarray(center, dtype=float)
        return (np.asarray(world, dtype=float) - c - self.translation) @ self.rotation + c

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other`` (both about the same center)."""
        r1 = self.rotation
        rot = r1 @ other.rotation
        t = r1 @ other.translation + self.translation
        return RigidTransform(*euler_from_matrix(rot), *t)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(*euler_from_matrix(rt), *(-rt @ self.translation))


def apply_rigid(vol: Volume3D, t: RigidTransform) -> Volume3D:
    """Resample ``vol`` on its own grid after moving it by ``t`` about its center."""
    if t.is_identity():
        return vol
    return resample_to_grid(vol, vol.affine, vol.shape, t, vol.center_world)


# -- augmentation ------------------------------------------------------------------------

def draw_rotation(rng: np.random.Generator, max_angle_rad: float = 0.2, per_axis_prob: float = 0.3):
    """Draw per-axis rotation angles; an axis is left at 0 with probability ``1 - per_axis_prob``.

    Always consumes the same amount of randomness, so streams stay aligned
    whatever the outcome.
    """
    flags = rng.random(3) < per_axis_prob
    angles = rng.uniform(-max_angle_rad, max_angle_rad, 3)
    return np.where(flags, angles, 0.0), flags


def rotate_channels(arr: np.ndarray, angles, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Rotate a (C, X, Y, Z) stack about its center, all channels identically.

    Same trilinear/zero-fill semantics as :func:`apply_rigid`, evaluated
    with ``scipy.ndimage`` for speed inside the training loop.
    """
    if not np.any(angles):
        return arr
    shape = np.asarray(arr.shape[1:], dtype=float)
    sp = np.asarray(spacing, dtype=float)
    c = (shape - 1.0) / 2.0
    # index-space source point: diag(1/sp) R^T diag(sp) (p - c) + c
    m = (rotation_matrix(*angles).T * sp) / sp[:, None]
    offset = c - m @ c
    out = np.empty_like(arr)
    for ch in range(arr.shape[0]):
        ndimage.affine_transform(arr[ch], m, offset, output=out[ch], order=1, mode="constant", cval=0.0,
                                 prefilter=False)
    return out


def random_rotation_augment(channels, rng: np.random.Generator, max_angle_rad: float = 0.2,
                            per_axis_prob: float = 0.3):
    """Apply one random rigid rotation to every channel.

    ``channels`` is either a list of same-grid :class:`Volume3D` (a list is
    returned) or a (C, X, Y, Z) array (an array is returned).
    """
    angles, _ = draw_rotation(rng, max_angle_rad, per_axis_prob)
    if isinstance(channels, np.ndarray):
        return rotate_channels(channels, angles)
    vols = list(channels)
    for v in vols[1:]:
        if not v.same_grid(vols[0]):
            raise GridMismatch("augmented channels must share one grid")
    if not np.any(angles):
        return vols
    t = RigidTransform(*angles)
    return [apply_rigid(v, t) for v in vols]
