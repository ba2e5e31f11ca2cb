"""Volumes, spatial transforms, trilinear sampling, pooling, and 4x4 matrix exponentials.

Conventions used throughout the package:

* A ``Volume`` is a 3D scalar grid.  Voxel ``(i, j, k)`` has its center at
  physical position ``origin + (i, j, k) * spacing`` (millimetres).
* Transforms act on physical coordinates, never on voxel indices, so the
  same transform is valid at any resolution.
* Warping uses the pull-back convention: ``warp(vol, t)(x) = vol(t(x))``,
  i.e. the transform maps output-space points to sample locations in the
  input volume.  Points outside the input grid hull sample to 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

__all__ = [
    "Volume",
    "Grid",
    "AffineTransform",
    "DisplacementField",
    "CompositeTransform",
    "identity_transform",
    "trilinear_sample",
    "sample_points",
    "warp",
    "compose",
    "expm",
    "logm",
    "sqrtm",
    "avg_pool",
    "dice",
    "read_volume",
    "write_volume",
    "VolumeIOError",
    "MagicError",
    "UnsupportedDatatypeError",
    "TruncatedPayloadError",
]

VOLUME_MAGIC = b"IPVOL1\n"
_HEADER = struct.Struct("<3I6d")


class VolumeIOError(ValueError):
    """Base class for volume file format failures."""


class MagicError(VolumeIOError):
    """File does not start with a recognized magic string."""


class UnsupportedDatatypeError(VolumeIOError):
    """NIfTI datatype outside the supported subset."""


class TruncatedPayloadError(VolumeIOError):
    """Payload shorter than the header-declared voxel count."""


@dataclass(frozen=True)
class Grid:
    """Sampling grid metadata: shape in voxels, spacing and origin in mm."""

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        if len(self.shape) != 3 or any(int(n) < 1 for n in self.shape):
            raise ValueError(f"grid shape must be 3 positive ints, got {self.shape}")
        if len(self.spacing) != 3 or any(not (s > 0) for s in self.spacing):
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")
        if any(not np.isfinite(o) for o in self.origin):
            raise ValueError(f"grid origin must be finite, got {self.origin}")

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.shape
        return nx * ny * nz

    @property
    def extent_mm(self) -> np.ndarray:
        """Physical size of the field of view per axis."""
        return np.asarray(self.shape, float) * np.asarray(self.spacing, float)

    @property
    def center_mm(self) -> np.ndarray:
        """Physical position of the grid center."""
        n = np.asarray(self.shape, float)
        return np.asarray(self.origin, float) + (n - 1) / 2.0 * np.asarray(self.spacing, float)

    def points(self) -> np.ndarray:
        """All voxel-center positions, shape (n_voxels, 3), x-index fastest varying last axis order (i, j, k)."""
        return _grid_points(self.shape, self.spacing, self.origin)


@lru_cache(maxsize=64)
def _grid_points(shape, spacing, origin):
    idx = np.indices(shape, dtype=np.float64).reshape(3, -1).T
    pts = np.asarray(origin, float) + idx * np.asarray(spacing, float)
    pts.setflags(write=False)
    return pts


class Volume:
    """Immutable 3D scalar grid with physical metadata.

    Data is stored as C-contiguous float64 with shape (nx, ny, nz).
    """

    __slots__ = ("data", "spacing", "origin", "_hash", "_grid")

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"volume shape components must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data must be finite")
        spacing = tuple(float(s) for s in spacing)
        origin = tuple(float(o) for o in origin)
        if len(spacing) != 3 or any(not (s > 0 and np.isfinite(s)) for s in spacing):
            raise ValueError(f"spacing must be 3 positive finite floats, got {spacing}")
        if len(origin) != 3 or any(not np.isfinite(o) for o in origin):
            raise ValueError(f"origin must be 3 finite floats, got {origin}")
        if arr is data:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "_hash", None)
        object.__setattr__(self, "_grid", None)

    @classmethod
    def _wrap(cls, arr, spacing, origin):
        """Adopt a freshly computed C-contiguous float64 array without
        copying or re-validating (internal resampling outputs only)."""
        self = object.__new__(cls)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(spacing))
        object.__setattr__(self, "origin", tuple(origin))
        object.__setattr__(self, "_hash", None)
        object.__setattr__(self, "_grid", None)
        return self

    def __setattr__(self, name, value):
        raise AttributeError("Volume is immutable")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def grid(self) -> Grid:
        if self._grid is None:
            object.__setattr__(self, "_grid", Grid(self.shape, self.spacing, self.origin))
        return self._grid

    def with_data(self, data) -> "Volume":
        """New volume on the same grid with different voxel values."""
        return Volume(data, self.spacing, self.origin)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.shape == other.shape
            and np.array_equal(self.data, other.data)
        )

    def __hash__(self):
        # content-based, computed lazily once; lets volumes key memo caches
        if self._hash is None:
            h = hash((self.shape, self.spacing, self.origin, self.data.tobytes()))
            object.__setattr__(self, "_hash", h)
        return self._hash

    def __repr__(self):
        return f"Volume(shape={self.shape}, spacing={self.spacing}, origin={self.origin})"


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

class Transform:
    """A map from physical points (N, 3) to physical points (N, 3)."""

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def inverse(self) -> "Transform":
        raise NotImplementedError


class AffineTransform(Transform):
    """Affine map stored as a 4x4 homogeneous matrix acting on mm coordinates.

    Optionally carries the Lie-algebra generator it was exponentiated from,
    which makes exact half-powers and inverses available downstream.
    """

    __slots__ = ("matrix", "generator")

    def __init__(self, matrix, generator=None):
        m = np.array(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix must be finite")
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-9:
            raise ValueError(f"bottom row must be (0,0,0,1), got {m[3]}")
        m[3] = (0.0, 0.0, 0.0, 1.0)
        if abs(np.linalg.det(m[:3, :3])) <= 1e-12:
            raise ValueError("affine matrix is singular (|det| <= 1e-12)")
        if generator is not None:
            g = np.array(generator, dtype=np.float64)
            if g.shape != (4, 4):
                raise ValueError(f"generator must be 4x4, got {g.shape}")
            if np.max(np.abs(expm(g) - m)) >= 1e-8:
                raise ValueError("generator does not exponentiate to the stored matrix")
            g.setflags(write=False)
        else:
            g = None
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "generator", g)

    def __setattr__(self, name, value):
        raise AttributeError("AffineTransform is immutable")

    def __call__(self, pts):
        pts = np.asarray(pts, float)
        return pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def inverse(self) -> "AffineTransform":
        gen = None if self.generator is None else -self.generator
        return AffineTransform(np.linalg.inv(self.matrix), generator=gen)

    def is_identity(self, tol=0.0) -> bool:
        return np.max(np.abs(self.matrix - np.eye(4))) <= tol

    def __repr__(self):
        return f"AffineTransform({self.matrix.tolist()})"


def identity_transform() -> AffineTransform:
    return AffineTransform(np.eye(4), generator=np.zeros((4, 4)))


class DisplacementField(Transform):
    """Dense nonparametric transform: t(x) = x + d(x), displacement in mm.

    ``vectors`` has shape (nx, ny, nz, 3) on the same kind of grid as a
    Volume.  Outside the grid hull the displacement is 0 (identity).
    """

    __slots__ = ("vectors", "spacing", "origin")

    def __init__(self, vectors, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        arr = np.ascontiguousarray(vectors, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ValueError(f"displacement field must have shape (nx,ny,nz,3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("displacement field must be finite")
        spacing = tuple(float(s) for s in spacing)
        origin = tuple(float(o) for o in origin)
        if any(not (s > 0) for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if arr is vectors:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "vectors", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    def __setattr__(self, name, value):
        raise AttributeError("DisplacementField is immutable")

    @property
    def grid(self) -> Grid:
        return Grid(self.vectors.shape[:3], self.spacing, self.origin)

    def __call__(self, pts):
        pts = np.asarray(pts, float)
        disp = np.empty_like(pts)
        for c in range(3):
            vals, _ = _sample_component(self.vectors[..., c], self.grid, pts)
            disp[:, c] = vals
        return pts + disp

    def inverse(self):
        raise NotImplementedError("dense displacement fields are not analytically invertible")


class CompositeTransform(Transform):
    """Ordered composition; ``parts[0]`` is outermost: t(x) = parts[0](parts[1](... x))."""

    __slots__ = ("parts",)

    def __init__(self, parts):
        parts = tuple(parts)
        if not parts:
            raise ValueError("composite transform needs at least one part")
        for p in parts:
            if not isinstance(p, Transform):
                raise TypeError(f"composite parts must be transforms, got {type(p)}")
        object.__setattr__(self, "parts", parts)

    def __setattr__(self, name, value):
        raise AttributeError("CompositeTransform is immutable")

    def __call__(self, pts):
        pts = np.asarray(pts, float)
        for t in reversed(self.parts):
            pts = t(pts)
        return pts

    def inverse(self):
        return CompositeTransform([p.inverse() for p in reversed(self.parts)])


def compose(outer: Transform, inner: Transform) -> Transform:
    """Composition with result(x) = outer(inner(x)); affine pairs fold to one matrix."""
    if isinstance(outer, AffineTransform) and isinstance(inner, AffineTransform):
        return AffineTransform(outer.matrix @ inner.matrix)
    parts = []
    for t in (outer, inner):
        if isinstance(t, CompositeTransform):
            parts.extend(t.parts)
        else:
            parts.append(t)
    return CompositeTransform(parts)


# ---------------------------------------------------------------------------
# Sampling and warping
# ---------------------------------------------------------------------------

try:  # optional accelerator; the numpy path below is the reference
    from . import _fast

    _HAVE_FAST = _fast.available()
except Exception:  # pragma: no cover - import-time environment issue
    _fast = None
    _HAVE_FAST = False


def _sample_numpy(data: np.ndarray, grid: Grid, pts: np.ndarray):
    n = np.asarray(grid.shape)
    u = (pts - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    # snap to exact voxel centers within 1e-9 voxel so node samples are exact
    r = np.rint(u)
    u = np.where(np.abs(u - r) <= 1e-9, r, u)
    inside = np.all((u >= 0.0) & (u <= n - 1), axis=1)
    i0 = np.floor(u).astype(np.int64)
    np.clip(i0, 0, np.maximum(n - 2, 0), out=i0)
    f = u - i0
    nx, ny, nz = grid.shape
    # strides collapse to 0 on singleton axes so corner gathers stay in bounds
    ex = ny * nz if nx > 1 else 0
    ey = nz if ny > 1 else 0
    ez = 1 if nz > 1 else 0
    flat = data.reshape(-1)
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    vals = (
        flat[base] * (gx * gy * gz)
        + flat[base + ex] * (fx * gy * gz)
        + flat[base + ey] * (gx * fy * gz)
        + flat[base + ez] * (gx * gy * fz)
        + flat[base + ex + ey] * (fx * fy * gz)
        + flat[base + ex + ez] * (fx * gy * fz)
        + flat[base + ey + ez] * (gx * fy * fz)
        + flat[base + ex + ey + ez] * (fx * fy * fz)
    )
    vals[~inside] = 0.0
    return vals, inside


def _sample_component(data: np.ndarray, grid: Grid, pts: np.ndarray):
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if _HAVE_FAST:
        return _fast.sample(np.ascontiguousarray(data), grid.shape, grid.spacing, grid.origin, pts)
    return _sample_numpy(data, grid, pts)


def sample_points(vol: Volume, pts: np.ndarray):
    """Trilinear sampling at physical points (N, 3).

    Returns (values (N,), inside (N,) bool).  Values are exact stored voxel
    values at voxel centers and 0 outside the grid hull.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    return _sample_component(vol.data, vol.grid, pts)


def trilinear_sample(vol: Volume, point) -> tuple[float, bool]:
    """Sample one physical point; (value, inside) with value 0 outside the hull."""
    vals, inside = sample_points(vol, np.asarray(point, float).reshape(1, 3))
    return float(vals[0]), bool(inside[0])


def warp(vol: Volume, transform: Transform, out_grid: Grid | None = None) -> Volume:
    """Pull-back resampling: output(x) = vol(transform(x)) at each voxel center of out_grid."""
    if out_grid is None:
        out_grid = vol.grid
    if (
        isinstance(transform, AffineTransform)
        and out_grid == vol.grid
        and transform.is_identity(tol=0.0)
    ):
        return vol
    pts = out_grid.points()
    q = transform(pts)
    vals, _ = _sample_component(vol.data, vol.grid, np.ascontiguousarray(q))
    return Volume._wrap(vals.reshape(out_grid.shape), out_grid.spacing, out_grid.origin)


# ---------------------------------------------------------------------------
# Pooling and overlap
# ---------------------------------------------------------------------------

def avg_pool(vol: Volume, factor: int = 2) -> Volume:
    """Block-average downsampling by 2; odd trailing voxels are dropped.

    Pooled voxel centers sit at the mean position of their source block, so
    the pooled grid has origin + spacing/2 and doubled spacing.
    """
    if factor != 2:
        raise ValueError("only factor 2 pooling is supported")
    nx, ny, nz = vol.shape
    if min(nx, ny, nz) < 2:
        raise ValueError(f"all shape components must be >= 2 to pool, got {vol.shape}")
    mx, my, mz = nx // 2, ny // 2, nz // 2
    d = vol.data[: 2 * mx, : 2 * my, : 2 * mz]
    pooled = d.reshape(mx, 2, my, 2, mz, 2).mean(axis=(1, 3, 5))
    spacing = tuple(2.0 * s for s in vol.spacing)
    origin = tuple(o + 0.5 * s for o, s in zip(vol.origin, vol.spacing))
    return Volume(pooled, spacing, origin)


def dice(mask_a: Volume, mask_b: Volume) -> float:
    """Dice overlap 2|A∩B| / (|A|+|B|) of two binary masks on the same grid; 1.0 if both empty."""
    if mask_a.grid != mask_b.grid:
        raise ValueError("dice requires masks on identical grids")
    a = mask_a.data
    b = mask_b.data
    for name, m in (("mask_a", a), ("mask_b", b)):
        bad = (m != 0.0) & (m != 1.0)
        if np.any(bad):
            raise ValueError(f"{name} contains non-binary values")
    na = float(a.sum())
    nb = float(b.sum())
    if na == 0.0 and nb == 0.0:
        return 1.0
    inter = float((a * b).sum())
    return 2.0 * inter / (na + nb)


# ---------------------------------------------------------------------------
# Matrix exponential machinery (4x4, but written for any square matrix)
# ---------------------------------------------------------------------------

def _onenorm(m: np.ndarray) -> float:
    return float(np.abs(m).sum(axis=0).max())


def expm(L) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring with a converged Taylor core.

    The squaring count k is chosen so the scaled matrix has 1-norm <= 0.5,
    which keeps the truncation error of the series certifiably small.
    """
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"expm expects a square matrix, got {L.shape}")
    if not np.all(np.isfinite(L)):
        raise ValueError("expm input must be finite")
    norm = _onenorm(L)
    k = 0 if norm <= 0.5 else int(np.ceil(np.log2(norm / 0.5)))
    a = L / (2.0 ** k)
    n = L.shape[0]
    # 18 Taylor terms at 1-norm <= 0.5: truncation below 1e-24 relative
    result = np.eye(n)
    term = np.eye(n)
    for i in range(1, 19):
        term = term @ a / i
        result = result + term
    for _ in range(k):
        result = result @ result
    return result


def sqrtm(m) -> np.ndarray:
    """Principal square root via the Denman-Beavers iteration.

    Intended for well-conditioned near-identity affine matrices; raises if
    the iteration fails to converge.
    """
    m = np.asarray(m, dtype=np.float64)
    y = m.copy()
    z = np.eye(m.shape[0])
    for _ in range(60):
        y_next = 0.5 * (y + np.linalg.inv(z))
        z_next = 0.5 * (z + np.linalg.inv(y))
        y, z = y_next, z_next
        if _onenorm(y @ y - m) <= 1e-14 * max(1.0, _onenorm(m)):
            return y
    if _onenorm(y @ y - m) <= 1e-9 * max(1.0, _onenorm(m)):
        return y
    raise ValueError("matrix square root did not converge")


def logm(m) -> np.ndarray:
    """Principal logarithm by inverse scaling-and-squaring with a Mercator series core."""
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    a = m.copy()
    k = 0
    while _onenorm(a - np.eye(n)) > 0.25:
        if k >= 40:
            raise ValueError("matrix log did not converge (too far from identity)")
        a = sqrtm(a)
        k += 1
    e = a - np.eye(n)
    term = e.copy()
    out = e.copy()
    for i in range(2, 60):
        term = term @ e
        out = out + ((-1.0) ** (i + 1)) * term / i
        if _onenorm(term) <= 1e-18 * max(1.0, _onenorm(out)):
            break
    return out * (2.0 ** k)


# ---------------------------------------------------------------------------
# Volume file IO: native raw format and a NIfTI-1 read-only subset
# ---------------------------------------------------------------------------

def write_volume(vol: Volume, path) -> None:
    """Write the native raw format: magic, LE header (u32 dims, f64 spacing+origin), f32 payload x-fastest."""
    path = Path(path)
    nx, ny, nz = vol.shape
    header = _HEADER.pack(nx, ny, nz, *vol.spacing, *vol.origin)
    payload = np.asfortranarray(vol.data.astype("<f4")).tobytes(order="F")
    path.write_bytes(VOLUME_MAGIC + header + payload)


def _read_native(raw: bytes) -> Volume:
    off = len(VOLUME_MAGIC)
    if len(raw) < off + _HEADER.size:
        raise TruncatedPayloadError("file shorter than the native header")
    nx, ny, nz, sx, sy, sz, ox, oy, oz = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    expected = nx * ny * nz * 4
    payload = raw[off:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, header declares {expected}"
        )
    data = np.frombuffer(payload[:expected], dtype="<f4").reshape((nx, ny, nz), order="F")
    return Volume(data.astype(np.float64), (sx, sy, sz), (ox, oy, oz))


_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}


def _read_nifti(raw: bytes) -> Volume:
    if len(raw) < 348:
        raise TruncatedPayloadError("file shorter than a NIfTI-1 header")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise MagicError(f"malformed NIfTI magic {magic!r}")
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise MagicError("NIfTI header sizeof_hdr is not 348 in either byte order")
        endian = ">"
    dim = struct.unpack_from(endian + "8h", raw, 40)
    (datatype,) = struct.unpack_from(endian + "h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", raw, 112)
    qoffset = struct.unpack_from(endian + "3f", raw, 268)

    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise VolumeIOError(f"unsupported NIfTI dimensionality dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1:4])
    if any(int(d) > 1 for d in dim[4 : 1 + ndim]):
        raise VolumeIOError("only single-frame 3D NIfTI volumes are supported")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"NIfTI datatype {datatype} not in supported subset")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)

    offset = int(vox_offset) if vox_offset >= 348 else 352
    count = int(np.prod(shape))
    expected = count * dtype.itemsize
    payload = raw[offset:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"NIfTI payload has {len(payload)} bytes, needs {expected}"
        )
    data = np.frombuffer(payload[:expected], dtype=dtype).reshape(shape, order="F")
    data = data.astype(np.float64)
    if scl_slope not in (0.0, 1.0) or (scl_slope == 1.0 and scl_inter != 0.0):
        if scl_slope != 0.0:
            data = data * float(scl_slope) + float(scl_inter)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    origin = tuple(float(q) for q in qoffset)
    return Volume(data, spacing, origin)


def read_volume(path) -> Volume:
    """Read a native raw volume or a NIfTI-1 file (uint8/int16/float32/float64 subset)."""
    raw = Path(path).read_bytes()
    if raw[: len(VOLUME_MAGIC)] == VOLUME_MAGIC:
        return _read_native(raw)
    if len(raw) >= 348 and raw[344:348] in (b"n+1\x00", b"ni1\x00"):
        return _read_nifti(raw)
    raise MagicError(f"malformed magic; not a native or NIfTI-1 volume: {raw[:8]!r}")
