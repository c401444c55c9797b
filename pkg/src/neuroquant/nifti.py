"""NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Only the pieces of the format this pipeline needs are supported: 3D scalar
images (trailing dims of size 1 are tolerated) in five datatypes, with
sform/qform geometry and linear intensity scaling.

The writer stores a float64 copy of the affine in a comment extension so
that a float64 roundtrip is bit-exact for geometry too; other readers see a
regular file and ignore the extension.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, NonFinite, RangeOverflow, TruncatedData, UnsupportedDatatype
from .volume3d import Volume3D

HEADER_SIZE = 348
_AFFINE_EXT_TAG = b"neuroquant-affine64:"
_ECODE_COMMENT = 6

# datatype code -> numpy base type
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
DATATYPE_CODES = {"uint8": 2, "int16": 4, "int32": 8, "float32": 16, "float64": 64}


@dataclass
class NiftiHeader:
    """The subset of the 348-byte header this package reads and writes."""

    dims: tuple = (3, 1, 1, 1, 1, 1, 1, 1)
    datatype: int = 64
    bitpix: int = 64
    pixdim: tuple = (1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    vox_offset: float = 352.0
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    xyzt_units: int = 2
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple = (0.0, 0.0, 0.0)
    qoffset: tuple = (0.0, 0.0, 0.0)
    srow: np.ndarray = field(default_factory=lambda: np.zeros((3, 4)))
    descrip: bytes = b""
    magic: bytes = b"n+1\x00"
    endian: str = "<"

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.dims[1:4])

    @property
    def effective_slope(self) -> float:
        # slope 0 (or NaN) means "no scaling" by convention
        if self.scl_slope == 0 or not np.isfinite(self.scl_slope):
            return 1.0
        return float(self.scl_slope)

    @property
    def effective_inter(self) -> float:
        if not np.isfinite(self.scl_inter):
            return 0.0
        return float(self.scl_inter)

    def qform_affine(self) -> np.ndarray:
        b, c, d = (float(v) for v in self.quatern)
        a2 = 1.0 - (b * b + c * c + d * d)
        if a2 < 1e-7:
            norm = np.sqrt(b * b + c * c + d * d)
            b, c, d = b / norm, c / norm, d / norm
            a = 0.0
        else:
            a = np.sqrt(a2)
        rot = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ])
        qfac = -1.0 if self.pixdim[0] < 0 else 1.0
        zooms = np.array([self.pixdim[1], self.pixdim[2], self.pixdim[3] * qfac], dtype=float)
        aff = np.eye(4)
        aff[:3, :3] = rot * zooms
        aff[:3, 3] = self.qoffset
        return aff

    def affine(self) -> np.ndarray:
        if self.sform_code > 0:
            aff = np.eye(4)
            aff[:3, :] = self.srow
            return aff
        if self.qform_code > 0:
            return self.qform_affine()
        aff = np.eye(4)
        aff[[0, 1, 2], [0, 1, 2]] = self.pixdim[1:4]
        return aff


# -- quaternion helpers -----------------------------------------------------------

def affine_to_quaternion(affine: np.ndarray):
    """Return ``(quatern_bcd, qoffset, pixdim_xyz, qfac)`` for a rigid+zoom affine."""
    m = np.asarray(affine, dtype=float)[:3, :3]
    zooms = np.linalg.norm(m, axis=0)
    rot = m / zooms
    # nearest orthonormal matrix, tolerates small shears
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot[:, 2] *= -1
    trace = np.trace(rot)
    if trace > 0:
        s = 2.0 * np.sqrt(1.0 + trace)
        a = 0.25 * s
        b = (rot[2, 1] - rot[1, 2]) / s
        c = (rot[0, 2] - rot[2, 0]) / s
        d = (rot[1, 0] - rot[0, 1]) / s
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = 2.0 * np.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2])
        a = (rot[2, 1] - rot[1, 2]) / s
        b = 0.25 * s
        c = (rot[0, 1] + rot[1, 0]) / s
        d = (rot[0, 2] + rot[2, 0]) / s
    elif rot[1, 1] > rot[2, 2]:
        s = 2.0 * np.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2])
        a = (rot[0, 2] - rot[2, 0]) / s
        b = (rot[0, 1] + rot[1, 0]) / s
        c = 0.25 * s
        d = (rot[1, 2] + rot[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1])
        a = (rot[1, 0] - rot[0, 1]) / s
        b = (rot[0, 2] + rot[2, 0]) / s
        c = (rot[1, 2] + rot[2, 1]) / s
        d = 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return (b, c, d), tuple(np.asarray(affine, dtype=float)[:3, 3]), tuple(zooms), qfac


# -- header parsing -----------------------------------------------------------------

def _maybe_gunzip(raw: bytes) -> bytes:
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _detect_endian(raw: bytes) -> str:
    if len(raw) < HEADER_SIZE:
        raise TruncatedData(f"need {HEADER_SIZE} header bytes, got {len(raw)}")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            return endian
    raise BadMagic("sizeof_hdr is not 348 in either byte order")


def read_header(raw: bytes) -> NiftiHeader:
    """Parse the fixed 348-byte header (input may be gzip-wrapped)."""
    raw = _maybe_gunzip(bytes(raw))
    e = _detect_endian(raw)
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise BadMagic(f"expected single-file magic 'n+1\\0', got {magic!r}")
    dims = struct.unpack(e + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(e + "2h", raw[70:74])
    pixdim = struct.unpack(e + "8f", raw[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(e + "3f", raw[108:120])
    xyzt_units = raw[123]
    qform_code, sform_code = struct.unpack(e + "2h", raw[252:256])
    quat = struct.unpack(e + "6f", raw[256:280])
    srow = np.array(struct.unpack(e + "12f", raw[280:328]), dtype=np.float64).reshape(3, 4)
    return NiftiHeader(
        dims=dims,
        datatype=datatype,
        bitpix=bitpix,
        pixdim=pixdim,
        vox_offset=vox_offset,
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        xyzt_units=xyzt_units,
        qform_code=qform_code,
        sform_code=sform_code,
        quatern=quat[:3],
        qoffset=quat[3:],
        srow=srow,
        descrip=raw[148:228].rstrip(b"\x00"),
        magic=magic,
        endian=e,
    )


def _validate_dims(hdr: NiftiHeader) -> tuple[int, int, int]:
    ndim = hdr.dims[0]
    if not 1 <= ndim <= 7:
        raise UnsupportedDatatype(f"dim[0]={ndim} outside 1..7")
    dims = [int(d) if i < ndim else 1 for i, d in enumerate(hdr.dims[1:8])]
    if any(d < 1 for d in dims[:ndim]):
        raise UnsupportedDatatype(f"non-positive dimension in {hdr.dims}")
    if any(d != 1 for d in dims[3:]):
        raise UnsupportedDatatype(f"only 3D images are supported, got dims {hdr.dims}")
    return tuple(dims[:3])


def _read_affine_extension(raw: bytes, e: str, vox_offset: int):
    """Return the float64 affine stored by this writer, if present."""
    if len(raw) < HEADER_SIZE + 4 or raw[HEADER_SIZE] == 0:
        return None
    pos = HEADER_SIZE + 4
    while pos + 8 <= min(vox_offset, len(raw)):
        esize, ecode = struct.unpack(e + "2i", raw[pos:pos + 8])
        if esize < 8:
            break
        body = raw[pos + 8:pos + esize]
        if ecode == _ECODE_COMMENT and body.startswith(_AFFINE_EXT_TAG):
            hexstr = body[len(_AFFINE_EXT_TAG):len(_AFFINE_EXT_TAG) + 256]
            try:
                return np.frombuffer(bytes.fromhex(hexstr.decode("ascii")), dtype="<f8").reshape(4, 4).copy()
            except ValueError:
                return None
        pos += esize
    return None


def read_nifti(raw: bytes, *, permissive: bool = False) -> Volume3D:
    """Decode a NIfTI-1 single file into a float64 :class:`Volume3D`.

    Values are ``raw * scl_slope + scl_inter``.  Geometry comes from the
    sform when ``sform_code > 0``, else the qform, else ``diag(pixdim)``.
    NaN/Inf voxels raise :class:`NonFinite` unless ``permissive`` is set.
    """
    raw = _maybe_gunzip(bytes(raw))
    hdr = read_header(raw)
    shape = _validate_dims(hdr)
    if hdr.datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {hdr.datatype} not supported")
    dtype = DATATYPES[hdr.datatype].newbyteorder(hdr.endian)
    offset = int(hdr.vox_offset)
    if offset < HEADER_SIZE:
        raise TruncatedData(f"vox_offset {hdr.vox_offset} points inside the header")
    count = shape[0] * shape[1] * shape[2]
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedData(f"data needs {nbytes} bytes at offset {offset}, file has {len(raw) - offset}")
    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float64)
    slope, inter = hdr.effective_slope, hdr.effective_inter
    if slope != 1.0 or inter != 0.0:
        values = values * slope + inter
    if not np.all(np.isfinite(values)) and not permissive:
        raise NonFinite("image contains NaN or Inf voxels")
    data = values.reshape(shape, order="F")

    affine = hdr.affine()
    ext = _read_affine_extension(raw, hdr.endian, offset)
    if ext is not None and np.array_equal(ext[:3].astype(np.float32), affine[:3].astype(np.float32)):
        affine = ext
    return Volume3D(data, affine, allow_nonfinite=permissive)


def write_nifti(vol: Volume3D, datatype: str = "float64", description: str = "neuroquant") -> bytes:
    """Encode a volume as an uncompressed little-endian NIfTI-1 file.

    Integer datatypes round to the nearest integer and raise
    :class:`RangeOverflow` when a value does not fit.  ``description``
    goes into the 80-byte descrip field (truncated).
    """
    if datatype not in DATATYPE_CODES:
        raise UnsupportedDatatype(f"datatype {datatype!r} not in {sorted(DATATYPE_CODES)}")
    code = DATATYPE_CODES[datatype]
    dtype = DATATYPES[code]
    data = vol.data
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        lo, hi = float(data.min()), float(data.max())
        if lo < info.min - 0.5 or hi > info.max + 0.5:
            raise RangeOverflow(f"values [{lo}, {hi}] do not fit {datatype} [{info.min}, {info.max}]")
        data = np.rint(data)
    elif dtype == np.float32:
        big = float(np.max(np.abs(data)))
        if big > np.finfo(np.float32).max:
            raise RangeOverflow(f"value {big} overflows float32")
    payload = np.asarray(data, dtype=dtype.newbyteorder("<")).tobytes(order="F")

    affine = np.asarray(vol.affine, dtype=np.float64)
    (qb, qc, qd), qoff, zooms, qfac = affine_to_quaternion(affine)

    ext_body = _AFFINE_EXT_TAG + affine.astype("<f8").tobytes().hex().encode("ascii")
    esize = 8 + len(ext_body)
    esize += (-esize) % 16
    ext = struct.pack("<2i", esize, _ECODE_COMMENT) + ext_body.ljust(esize - 8, b"\x00")
    vox_offset = HEADER_SIZE + 4 + len(ext)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, 3, *vol.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, qfac, *zooms, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(vox_offset), 1.0, 0.0)
    hdr[123] = 2  # mm
    desc = description.encode("ascii", "replace")[:79]
    hdr[148:148 + len(desc)] = desc
    struct.pack_into("<2h", hdr, 252, 1, 2)
    struct.pack_into("<6f", hdr, 256, qb, qc, qd, *qoff)
    struct.pack_into("<12f", hdr, 280, *affine[:3, :].ravel())
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + b"\x01\x00\x00\x00" + ext + payload


def load_nifti(path, *, permissive: bool = False) -> Volume3D:
    return read_nifti(Path(path).read_bytes(), permissive=permissive)


def save_nifti(vol: Volume3D, path, datatype: str = "float64", description: str = "neuroquant") -> Path:
    """Write ``vol`` to ``path``; a ``.gz`` suffix selects gzip (mtime 0, reproducible bytes)."""
    path = Path(path)
    raw = write_nifti(vol, datatype, description)
    if path.suffix == ".gz":
        raw = gzip.compress(raw, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return path
