"""Reference-template construction by iterative registration and averaging.

Each iteration registers every subject to the current template, averages
the warped subjects, then corrects template drift by composing the average
with a fraction of the inverse population-mean transform (a Lie-algebra
mean for affine backends).  Convergence is tracked by how far the mean
transform still moves the grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import AffineTransform, Volume, expm, logm, warp, write_volume
from .icon import RegStack

__all__ = ["AtlasConfig", "AtlasBuildState", "select_healthy", "build_atlas", "save_atlas"]


@dataclass
class AtlasConfig:
    iters: int = 5
    epsilon: float = 0.5  # fraction of the mean inverse applied per iteration
    stop_voxel: float = 0.05  # stop when drift < this many voxels
    max_subjects: int = 200

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must be in (0, 1]")


@dataclass
class AtlasBuildState:
    template: Volume
    iteration: int
    mean_displacement_norm: float
    history: list = field(default_factory=list)
    subject_count: int = 0


def select_healthy(records, max_subjects: int = 200):
    """Patients whose every enrollment (month 0) record has KLG 0 and WOMAC 0.

    Returns at most max_subjects ids, in sorted order for determinism.
    """
    month0 = {}
    for r in records:
        if r.timepoint_months == 0:
            month0.setdefault(r.patient_id, []).append(r)
    healthy = [
        pid
        for pid, recs in sorted(month0.items())
        if all(r.klg == 0 and r.womac == 0 for r in recs)
    ]
    return healthy[:max_subjects]


def _drift_norm(matrix: np.ndarray, grid) -> float:
    """Mean displacement (mm) the transform applies to the grid's voxel centers."""
    pts = grid.points()
    moved = pts @ matrix[:3, :3].T + matrix[:3, 3]
    return float(np.mean(np.linalg.norm(moved - pts, axis=1)))


def build_atlas(images, backend: RegStack, cfg: AtlasConfig | None = None) -> AtlasBuildState:
    """Iterative template normalization over a shared-grid population.

    The initial template is the first subject; the per-iteration drift
    correction then walks it toward the population mean, so the recorded
    drift norms decay geometrically once registration is stable.
    Registration must produce affine maps (the drift correction averages
    their Lie-algebra logs); a failing subject is reported by index.
    """
    cfg = cfg or AtlasConfig()
    images = list(images)
    if not images:
        raise ValueError("empty population")
    grid = images[0].grid
    for i, im in enumerate(images):
        if im.grid != grid:
            raise ValueError(f"subject {i} is not on the shared grid")

    template = images[0]
    state = AtlasBuildState(template=template, iteration=0, mean_displacement_norm=float("inf"))
    voxel_mm = min(grid.spacing)

    for it in range(1, cfg.iters + 1):
        etas = []
        warped = []
        for i, im in enumerate(images):
            try:
                transform, _ = backend.predict(im, state.template)
                if not isinstance(transform, AffineTransform):
                    raise ValueError("atlas drift correction needs an affine backend")
                warped.append(warp(im, transform, grid))
                if transform.generator is not None:
                    etas.append(transform.generator)
                else:
                    etas.append(logm(transform.matrix))
            except Exception as e:
                raise RuntimeError(f"registration failed for subject {i}: {e}") from e
        candidate = Volume(np.mean([w.data for w in warped], axis=0), grid.spacing, grid.origin)
        mean_eta = np.mean(etas, axis=0)
        drift = _drift_norm(expm(mean_eta), grid)
        correction = AffineTransform(expm(-cfg.epsilon * mean_eta))
        if correction.is_identity(tol=0.0):
            template = candidate  # keep exactness at the fixed point
        else:
            template = warp(candidate, correction, grid)
        state = AtlasBuildState(
            template=template,
            iteration=it,
            mean_displacement_norm=drift,
            history=state.history + [drift],
            subject_count=len(images),
        )
        if drift < cfg.stop_voxel * voxel_mm:
            break
    return state


def save_atlas(state: AtlasBuildState, volume_path, sidecar_path=None, subject_ids=None) -> None:
    """Write the template volume plus a JSON sidecar with build metadata."""
    write_volume(state.template, volume_path)
    if sidecar_path is None:
        sidecar_path = Path(str(volume_path) + ".json")
    doc = {
        "subject_ids": list(subject_ids) if subject_ids is not None else None,
        "iterations": state.iteration,
        "final_mean_displacement_norm_mm": state.mean_displacement_norm,
        "history_mm": state.history,
        "subject_count": state.subject_count,
    }
    Path(sidecar_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
