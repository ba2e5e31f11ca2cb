"""Optional numba-accelerated trilinear sampling kernel.

Implements exactly the same arithmetic as geometry._sample_numpy; the
numpy path remains the reference.  Set ICONPROBE_NO_NUMBA=1 to force the
numpy implementation (used by the equivalence tests).
"""

from __future__ import annotations

import os

import numpy as np

_kernel = None

if not os.environ.get("ICONPROBE_NO_NUMBA"):
    try:
        import numba

        @numba.njit(cache=True, fastmath=False)
        def _sample_kernel(flat, nx, ny, nz, sx, sy, sz, ox, oy, oz, pts, out, inside):
            ex = (ny * nz) if nx > 1 else 0
            ey = nz if ny > 1 else 0
            ez = 1 if nz > 1 else 0
            for p in range(pts.shape[0]):
                ux = (pts[p, 0] - ox) / sx
                uy = (pts[p, 1] - oy) / sy
                uz = (pts[p, 2] - oz) / sz
                # snap to exact voxel centers within 1e-9 voxel (matches numpy path)
                rx = np.rint(ux)
                if abs(ux - rx) <= 1e-9:
                    ux = rx
                ry = np.rint(uy)
                if abs(uy - ry) <= 1e-9:
                    uy = ry
                rz = np.rint(uz)
                if abs(uz - rz) <= 1e-9:
                    uz = rz
                if (
                    ux < 0.0
                    or uy < 0.0
                    or uz < 0.0
                    or ux > nx - 1
                    or uy > ny - 1
                    or uz > nz - 1
                ):
                    out[p] = 0.0
                    inside[p] = False
                    continue
                ix = int(np.floor(ux))
                iy = int(np.floor(uy))
                iz = int(np.floor(uz))
                if ix > nx - 2:
                    ix = nx - 2 if nx > 1 else 0
                if iy > ny - 2:
                    iy = ny - 2 if ny > 1 else 0
                if iz > nz - 2:
                    iz = nz - 2 if nz > 1 else 0
                fx = ux - ix
                fy = uy - iy
                fz = uz - iz
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                base = (ix * ny + iy) * nz + iz
                out[p] = (
                    flat[base] * (gx * gy * gz)
                    + flat[base + ex] * (fx * gy * gz)
                    + flat[base + ey] * (gx * fy * gz)
                    + flat[base + ez] * (gx * gy * fz)
                    + flat[base + ex + ey] * (fx * fy * gz)
                    + flat[base + ex + ez] * (fx * gy * fz)
                    + flat[base + ey + ez] * (gx * fy * fz)
                    + flat[base + ex + ey + ez] * (fx * fy * fz)
                )
                inside[p] = True

        _kernel = _sample_kernel
    except Exception:  # pragma: no cover - numba unavailable or broken
        _kernel = None


def available() -> bool:
    return _kernel is not None


def sample(data, shape, spacing, origin, pts):
    nx, ny, nz = shape
    out = np.empty(pts.shape[0], dtype=np.float64)
    inside = np.empty(pts.shape[0], dtype=np.bool_)
    _kernel(
        data.reshape(-1),
        nx,
        ny,
        nz,
        float(spacing[0]),
        float(spacing[1]),
        float(spacing[2]),
        float(origin[0]),
        float(origin[1]),
        float(origin[2]),
        pts,
        out,
        inside,
    )
    return out, inside
