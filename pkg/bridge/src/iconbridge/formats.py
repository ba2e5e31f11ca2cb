"""Readers and writers for the interchange formats the exporter speaks.

The layouts are fixed by the consumer side (little-endian throughout):

* volume "IPVOL1\\n": u32 nx,ny,nz; f64 sx,sy,sz,ox,oy,oz; f32 voxels x-fastest
* NIfTI-1 (read only): uint8/int16/float32/float64 single-frame volumes
* features "IPFEA1\\n": u32 metadata length; canonical JSON; f32 payload C-order
* affine "IPAFF1\\n": 16 f64 row-major homogeneous matrix (mm coordinates)
* displacement "IPDSP1\\n": volume header; three x-fastest f32 planes (dx,dy,dz)

All writes are atomic (temp file + rename) so partially written exports
never land under their final name.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"IPVOL1\n"
FEATURE_MAGIC = b"IPFEA1\n"
AFFINE_MAGIC = b"IPAFF1\n"
DISP_MAGIC = b"IPDSP1\n"

_VOL_HEADER = struct.Struct("<3I6d")


class FormatError(ValueError):
    """Malformed or unsupported interchange file."""


@dataclass(frozen=True)
class VolumeArray:
    """A scalar grid: data (nx, ny, nz) float64, spacing and origin in mm."""

    data: np.ndarray
    spacing: tuple
    origin: tuple

    @property
    def shape(self):
        return self.data.shape

    def grid_key(self):
        return (tuple(self.shape), tuple(self.spacing), tuple(self.origin))


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-" + path.name)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Volumes in
# ---------------------------------------------------------------------------

def read_volume(path) -> VolumeArray:
    raw = Path(path).read_bytes()
    if raw[: len(VOLUME_MAGIC)] == VOLUME_MAGIC:
        return _read_native(raw)
    if len(raw) >= 348 and raw[344:348] in (b"n+1\x00", b"ni1\x00"):
        return _read_nifti(raw)
    raise FormatError(f"not a native or NIfTI-1 volume: {raw[:8]!r}")


def _read_native(raw: bytes) -> VolumeArray:
    off = len(VOLUME_MAGIC)
    if len(raw) < off + _VOL_HEADER.size:
        raise FormatError("native volume header truncated")
    nx, ny, nz, sx, sy, sz, ox, oy, oz = _VOL_HEADER.unpack_from(raw, off)
    off += _VOL_HEADER.size
    need = nx * ny * nz * 4
    if len(raw) - off < need:
        raise FormatError(f"volume payload has {len(raw) - off} bytes, needs {need}")
    data = np.frombuffer(raw[off : off + need], dtype="<f4").reshape((nx, ny, nz), order="F")
    return VolumeArray(data.astype(np.float64), (sx, sy, sz), (ox, oy, oz))


_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}


def _read_nifti(raw: bytes) -> VolumeArray:
    endian = "<"
    (size,) = struct.unpack_from("<i", raw, 0)
    if size != 348:
        (size,) = struct.unpack_from(">i", raw, 0)
        if size != 348:
            raise FormatError("bad NIfTI sizeof_hdr")
        endian = ">"
    dim = struct.unpack_from(endian + "8h", raw, 40)
    (datatype,) = struct.unpack_from(endian + "h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", raw, 112)
    qoffset = struct.unpack_from(endian + "3f", raw, 268)
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"unsupported NIfTI datatype {datatype}")
    shape = tuple(int(d) for d in dim[1:4])
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    offset = int(vox_offset) if vox_offset >= 348 else 352
    count = int(np.prod(shape))
    body = raw[offset : offset + count * dtype.itemsize]
    if len(body) < count * dtype.itemsize:
        raise FormatError("NIfTI payload truncated")
    data = np.frombuffer(body, dtype=dtype).reshape(shape, order="F").astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        if scl_slope != 0.0:
            data = data * float(scl_slope) + float(scl_inter)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return VolumeArray(data, spacing, tuple(float(q) for q in qoffset))


def write_volume(vol: VolumeArray, path) -> None:
    """Native raw volume out (used for toy datasets and self-checks)."""
    nx, ny, nz = vol.shape
    header = _VOL_HEADER.pack(nx, ny, nz, *vol.spacing, *vol.origin)
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    _atomic_write(path, VOLUME_MAGIC + header + payload)


# ---------------------------------------------------------------------------
# Features out
# ---------------------------------------------------------------------------

def feature_metadata(
    patient_id: str,
    side: str,
    timepoint_months: int,
    extractor: str,
    layer: str,
    preprocess_fingerprint: str,
    shape,
    activation: str = "post",
) -> dict:
    return {
        "patient_id": patient_id,
        "side": side,
        "timepoint_months": int(timepoint_months),
        "extractor": extractor,
        "layer": layer,
        "preprocess_fingerprint": preprocess_fingerprint,
        "shape": [int(s) for s in shape],
        "activation": activation,
    }


def write_feature(meta: dict, tensor: np.ndarray, path) -> None:
    tensor = np.ascontiguousarray(tensor, dtype=np.float32)
    declared = tuple(meta["shape"])
    if tuple(tensor.shape) != declared:
        raise FormatError(
            f"refusing to write: tensor shape {tensor.shape} != declared {declared}"
        )
    if not np.all(np.isfinite(tensor)):
        raise FormatError("refusing to write: non-finite feature values")
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    payload = FEATURE_MAGIC + struct.pack("<I", len(blob)) + blob + tensor.astype("<f4").tobytes(order="C")
    _atomic_write(path, payload)


def append_index(directory, meta: dict, filename: str) -> None:
    line = json.dumps({**meta, "path": filename}, sort_keys=True) + "\n"
    with (Path(directory) / "index.jsonl").open("a") as fh:
        fh.write(line)


def feature_filename(meta: dict) -> str:
    key = (
        meta["patient_id"],
        meta["side"],
        meta["timepoint_months"],
        meta["extractor"],
        meta["layer"],
        meta["preprocess_fingerprint"],
    )
    return "_".join(str(p) for p in key) + ".ipfea"


# ---------------------------------------------------------------------------
# Transforms out
# ---------------------------------------------------------------------------

def write_affine(matrix: np.ndarray, path) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (4, 4):
        raise FormatError(f"affine matrix must be 4x4, got {matrix.shape}")
    if np.max(np.abs(matrix[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-12:
        raise FormatError("affine bottom row must be (0,0,0,1)")
    _atomic_write(path, AFFINE_MAGIC + matrix.astype("<f8").tobytes(order="C"))


def write_displacement(vectors: np.ndarray, spacing, origin, path) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 4 or vectors.shape[3] != 3:
        raise FormatError(f"displacement field must be (nx,ny,nz,3), got {vectors.shape}")
    if not np.all(np.isfinite(vectors)):
        raise FormatError("refusing to write: non-finite displacements")
    nx, ny, nz = vectors.shape[:3]
    header = _VOL_HEADER.pack(nx, ny, nz, *spacing, *origin)
    planes = b"".join(
        np.asarray(vectors[..., c], dtype="<f4").ravel(order="F").tobytes() for c in range(3)
    )
    _atomic_write(path, DISP_MAGIC + header + planes)


# ---------------------------------------------------------------------------
# Minimal warping for export self-checks
# ---------------------------------------------------------------------------

def warp_with_displacement(vol: VolumeArray, vectors: np.ndarray) -> np.ndarray:
    """Pull-back warp of vol by a same-grid displacement field (mm).

    Deliberately independent of the consumer's implementation; used to
    sanity-check exported fields against the consumer's warp.
    """
    nx, ny, nz = vol.shape
    spacing = np.asarray(vol.spacing)
    origin = np.asarray(vol.origin)
    idx = np.indices((nx, ny, nz), dtype=np.float64).reshape(3, -1).T
    pts = origin + idx * spacing + vectors.reshape(-1, 3)
    u = (pts - origin) / spacing
    n = np.array([nx, ny, nz])
    inside = np.all((u >= 0) & (u <= n - 1), axis=1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, np.maximum(n - 2, 0))
    f = u - i0
    ex = ny * nz if nx > 1 else 0
    ey = nz if ny > 1 else 0
    ez = 1 if nz > 1 else 0
    flat = vol.data.reshape(-1)
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    fx, fy, fz = f.T
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
    vals = (
        flat[base] * gx * gy * gz
        + flat[base + ex] * fx * gy * gz
        + flat[base + ey] * gx * fy * gz
        + flat[base + ez] * gx * gy * fz
        + flat[base + ex + ey] * fx * fy * gz
        + flat[base + ex + ez] * fx * gy * fz
        + flat[base + ey + ez] * gx * fy * fz
        + flat[base + ex + ey + ez] * fx * fy * fz
    )
    vals[~inside] = 0.0
    return vals.reshape(nx, ny, nz)
