"""Minimal NIfTI-1 reader/writer for single 3D images (.nii / .nii.gz).

Covers exactly what the toolkit needs: integer label volumes round-trip
value-exactly (stored as unsigned 16-bit), intensity volumes as float32,
spacing and orientation carried in the standard affine fields. Reading
decodes orientation codes from the sform when present, the qform
quaternion otherwise, and falls back to pixdim with RAS axes when the
file carries neither. Both endiannesses are accepted on read; files are
written little-endian with an sform.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .volume import Volume, validate_orientation

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

# NIfTI-1 datatype code -> numpy dtype (endian applied at read time)
_DTYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
    768: "u4",
    1024: "i8",
}
_LABEL_CODE = 512  # uint16
_INTENSITY_CODE = 16  # float32

# code for the direction of increasing world coordinate on each RAS+ axis,
# and its opposite when the affine column points the other way
_POS_CODES = ("R", "A", "S")
_NEG_CODES = ("L", "P", "I")

_WORLD_VECTORS = {
    "R": (1.0, 0.0, 0.0),
    "L": (-1.0, 0.0, 0.0),
    "A": (0.0, 1.0, 0.0),
    "P": (0.0, -1.0, 0.0),
    "S": (0.0, 0.0, 1.0),
    "I": (0.0, 0.0, -1.0),
}


class NiftiError(ValueError):
    """Raised for malformed, truncated, or unsupported NIfTI files."""


def _open_for_read(path: Path):
    raw = open(path, "rb")
    head = raw.read(2)
    raw.seek(0)
    if head == b"\x1f\x8b":
        return gzip.GzipFile(fileobj=raw)
    return raw


def _affine_to_codes(affine3: np.ndarray) -> tuple[str, str, str]:
    """Dominant world axis per voxel axis; must form a bijection."""
    codes = []
    taken = set()
    for j in range(3):
        col = affine3[:, j]
        if not np.any(col):
            raise NiftiError("affine has a zero column; orientation undefined")
        i = int(np.argmax(np.abs(col)))
        if i in taken:
            raise NiftiError("affine maps two voxel axes to the same world axis")
        taken.add(i)
        codes.append(_POS_CODES[i] if col[i] > 0 else _NEG_CODES[i])
    return tuple(codes)  # type: ignore[return-value]


def _quaternion_matrix(b: float, c: float, d: float, qfac: float) -> np.ndarray:
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a_sq) if a_sq > 0 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    rot[:, 2] *= -1.0 if qfac < 0 else 1.0
    return rot


def read_nifti(path, kind: str | None = None) -> Volume:
    """Read a single-file NIfTI-1 volume.

    ``kind`` overrides the inferred volume kind; by default integer data
    becomes "semantic" and floating-point data "intensity". Rejects 4D
    images, unsupported datatypes, and malformed or truncated files.
    """
    path = Path(path)
    with _open_for_read(path) as fh:
        header = fh.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            raise NiftiError(f"{path.name}: file shorter than a NIfTI-1 header")

        (sizeof_hdr,) = struct.unpack("<i", header[0:4])
        if sizeof_hdr == 348:
            end = "<"
        elif struct.unpack(">i", header[0:4])[0] == 348:
            end = ">"
        else:
            raise NiftiError(f"{path.name}: not a NIfTI-1 file (sizeof_hdr != 348)")

        magic = header[344:348]
        if magic != MAGIC_SINGLE:
            raise NiftiError(f"{path.name}: unsupported magic {magic!r}; need single-file 'n+1'")

        dim = struct.unpack(end + "8h", header[40:56])
        ndim = dim[0]
        if ndim < 3:
            raise NiftiError(f"{path.name}: need a 3D image, header says {ndim}D")
        if any(d > 1 for d in dim[4 : 1 + max(3, ndim)]):
            raise NiftiError(f"{path.name}: 4D+ images are not supported")
        dims = tuple(int(d) for d in dim[1:4])
        if min(dims) < 1:
            raise NiftiError(f"{path.name}: non-positive dimension in {dims}")

        (datatype,) = struct.unpack(end + "h", header[70:72])
        if datatype not in _DTYPES:
            raise NiftiError(f"{path.name}: unsupported datatype code {datatype}")
        dt = np.dtype(end + _DTYPES[datatype])

        pixdim = struct.unpack(end + "8f", header[76:108])
        (vox_offset,) = struct.unpack(end + "f", header[108:112])
        scl_slope, scl_inter = struct.unpack(end + "2f", header[112:120])
        qform_code, sform_code = struct.unpack(end + "2h", header[252:256])

        if sform_code > 0:
            srow = struct.unpack(end + "12f", header[280:328])
            affine3 = np.array(srow, dtype=np.float64).reshape(3, 4)[:, :3]
        elif qform_code > 0:
            qb, qc, qd = struct.unpack(end + "3f", header[256:268])
            qfac = pixdim[0] if pixdim[0] != 0 else 1.0
            rot = _quaternion_matrix(qb, qc, qd, qfac)
            affine3 = rot * np.array(pixdim[1:4], dtype=np.float64)
        else:
            diag = np.abs(np.array(pixdim[1:4], dtype=np.float64))
            diag[diag == 0] = 1.0
            affine3 = np.diag(diag)

        orientation = _affine_to_codes(affine3)
        spacing = tuple(float(np.linalg.norm(affine3[:, j])) for j in range(3))
        if any(s <= 0 for s in spacing):
            raise NiftiError(f"{path.name}: non-positive voxel spacing {spacing}")

        offset = int(vox_offset) if vox_offset >= HEADER_SIZE else HEADER_SIZE
        skip = offset - HEADER_SIZE
        if skip:
            fh.read(skip)
        nbytes = int(np.prod(dims)) * dt.itemsize
        buf = fh.read(nbytes)
        if len(buf) < nbytes:
            raise NiftiError(
                f"{path.name}: truncated data section ({len(buf)} of {nbytes} bytes)"
            )

    data = np.frombuffer(buf, dtype=dt).reshape(dims, order="F")
    data = np.ascontiguousarray(data.astype(dt.newbyteorder("=")))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    if kind is None:
        kind = "semantic" if np.issubdtype(data.dtype, np.integer) else "intensity"
    return Volume(data, spacing, orientation, kind)


def _build_affine(vol: Volume) -> np.ndarray:
    affine = np.zeros((3, 4), dtype=np.float64)
    for j, code in enumerate(vol.orientation):
        affine[:, j] = np.array(_WORLD_VECTORS[code]) * vol.spacing[j]
    return affine


def write_nifti(vol: Volume, path) -> None:
    """Write a volume as single-file NIfTI-1; gzip when the name ends .gz.

    Label volumes are stored as unsigned 16-bit integers, intensity
    volumes as float32. The orientation/spacing go into the sform.
    """
    path = Path(path)
    validate_orientation(vol.orientation)
    if vol.is_label:
        data = np.asarray(vol.data)
        if data.min() < 0 or data.max() > np.iinfo(np.uint16).max:
            raise NiftiError("label values outside the unsigned 16-bit range")
        payload = data.astype("<u2")
        datatype, bitpix = _LABEL_CODE, 16
    else:
        payload = np.asarray(vol.data).astype("<f4")
        datatype, bitpix = _INTENSITY_CODE, 32

    affine = _build_affine(vol)
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<h", header, 72, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(HEADER_SIZE + 4))  # vox_offset
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    header[123] = 2  # xyzt_units: millimetres
    struct.pack_into("<2h", header, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<4f", header, 280, *affine[0])
    struct.pack_into("<4f", header, 296, *affine[1])
    struct.pack_into("<4f", header, 312, *affine[2])
    header[344:348] = MAGIC_SINGLE

    blob = bytes(header) + b"\x00\x00\x00\x00" + payload.tobytes(order="F")
    if path.name.endswith(".gz"):
        with open(path, "wb") as raw:
            with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
                gz.write(blob)
    else:
        path.write_bytes(blob)
