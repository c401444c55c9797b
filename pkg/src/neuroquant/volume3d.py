"""The 3D scalar grid passed between every stage of the pipeline.

Storage convention: ``data`` is a float64 array indexed ``data[i, j, k]``
with ``i`` along the first voxel axis.  Flattened in Fortran order the
first axis varies fastest, which is also the NIfTI on-disk order.  World
coordinates are RAS+ millimetres (NIfTI convention) and
``world = affine @ [i, j, k, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFinite

_AXIS_LETTERS = (("L", "R"), ("P", "A"), ("I", "S"))


def orientation_from_affine(affine: np.ndarray) -> str:
    """Three-letter code naming the direction each voxel axis increases toward.

    ``RAS`` means i grows to the right, j anterior, k superior; ``LPI`` is the
    fully flipped counterpart.  Oblique columns are labelled by their dominant
    world component.
    """
    rot = np.asarray(affine, dtype=float)[:3, :3]
    code = []
    for col in rot.T:
        world_axis = int(np.argmax(np.abs(col)))
        code.append(_AXIS_LETTERS[world_axis][int(col[world_axis] > 0)])
    return "".join(code)


def affine_for_orientation(code: str, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Axis-aligned affine with the given orientation code, spacing and origin."""
    code = code.upper()
    if len(code) != 3:
        raise ValueError(f"orientation code must have 3 letters, got {code!r}")
    aff = np.eye(4)
    used = set()
    for j, letter in enumerate(code):
        for world_axis, (neg, pos) in enumerate(_AXIS_LETTERS):
            if letter in (neg, pos):
                break
        else:
            raise ValueError(f"unknown orientation letter {letter!r}")
        if world_axis in used:
            raise ValueError(f"orientation code {code!r} repeats an axis")
        used.add(world_axis)
        aff[:3, j] = 0.0
        aff[world_axis, j] = spacing[j] if letter == pos else -spacing[j]
    aff[:3, 3] = origin
    return aff


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Immutable 3D volume with a voxel-to-world affine.

    ``spacing`` and ``orientation`` are derived from the affine, so they can
    never disagree with it.
    """

    data: np.ndarray
    affine: np.ndarray

    def __init__(self, data, affine=None, *, allow_nonfinite: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"Volume3D needs 3D data, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"empty volume shape {arr.shape}")
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise NonFinite("volume contains NaN or Inf voxels")
        aff = np.eye(4) if affine is None else np.array(affine, dtype=np.float64, copy=True)
        if aff.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {aff.shape}")
        if not np.all(np.isfinite(aff)):
            raise ValueError("affine contains non-finite entries")
        if np.any(np.linalg.norm(aff[:3, :3], axis=0) <= 0):
            raise ValueError("affine has a zero-length axis")
        arr.flags.writeable = False
        aff.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "affine", aff)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(s) for s in np.linalg.norm(self.affine[:3, :3], axis=0))

    @property
    def orientation(self) -> str:
        return orientation_from_affine(self.affine)

    @property
    def center_world(self) -> np.ndarray:
        """World position of the geometric grid center, index (n - 1) / 2."""
        idx = (np.asarray(self.shape, dtype=float) - 1.0) / 2.0
        return self.affine[:3, :3] @ idx + self.affine[:3, 3]

    def world_coords(self, index) -> np.ndarray:
        """Map voxel indices (..., 3) to world millimetres (..., 3)."""
        idx = np.asarray(index, dtype=float)
        return idx @ self.affine[:3, :3].T + self.affine[:3, 3]

    def voxel_coords(self, world) -> np.ndarray:
        """Map world millimetres (..., 3) to continuous voxel indices."""
        inv = np.linalg.inv(self.affine)
        w = np.asarray(world, dtype=float)
        return w @ inv[:3, :3].T + inv[:3, 3]

    def with_data(self, data) -> "Volume3D":
        arr = np.asarray(data)
        if arr.shape != self.shape:
            raise ValueError(f"shape {arr.shape} does not match grid {self.shape}")
        return Volume3D(arr, self.affine)

    def same_grid(self, other: "Volume3D", atol: float = 1e-6) -> bool:
        return self.shape == other.shape and np.allclose(self.affine, other.affine, atol=atol, rtol=0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.affine, other.affine)
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None

    def __repr__(self) -> str:
        sp = ", ".join(f"{s:.3g}" for s in self.spacing)
        return f"Volume3D(shape={self.shape}, spacing=({sp}), orientation={self.orientation!r})"
