"""Synthetic desk-scale cohorts: phantom knees with known pose, morphology,
and progression ground truth.

A phantom knee is two soft-edged ellipsoidal "bones" separated along y by a
gap whose width is the joint space width (JSW).  Progressor knees narrow
the gap over time; clinical scores (KLG, WOMAC) are derived from the gap by
fixed thresholds so every label is reconstructible from the manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .clinical import ClinicalRecord
from .geometry import AffineTransform, Grid, Volume, expm, write_volume

__all__ = [
    "SynthConfig",
    "CohortData",
    "klg_from_jsw",
    "womac_from_jsw",
    "make_knee_phantom",
    "make_asymmetric_phantom",
    "random_affine_matrix",
    "generate_cohort",
]

# gap thresholds (mm) at which the synthetic KL grade steps 0 -> 4
KLG_JSW_THRESHOLDS = (4.2, 3.6, 3.0, 2.4)


def klg_from_jsw(jsw_mm: float) -> int:
    for grade, thr in enumerate(KLG_JSW_THRESHOLDS):
        if jsw_mm >= thr:
            return grade
    return 4


def womac_from_jsw(jsw_mm: float, noise: float = 0.0) -> int:
    """Pain grows as the joint space falls below the healthy threshold."""
    if jsw_mm >= KLG_JSW_THRESHOLDS[0]:
        return 0
    raw = (KLG_JSW_THRESHOLDS[0] - jsw_mm) * 6.0 + noise
    return int(np.clip(round(raw), 0, 20))


@dataclass
class SynthConfig:
    patients: int = 64
    months: tuple = (0, 12, 24, 36, 48)
    sides: tuple = ("right",)
    shape: tuple = (36, 36, 36)
    spacing: float = 1.0
    progressor_fraction: float = 0.45
    jsw_range: tuple = (2.6, 5.2)
    decline_mm_per_month: tuple = (0.012, 0.025)
    stable_mm_per_month: tuple = (0.0, 0.003)
    pose_trans_mm: float = 5.0
    pose_rot_deg: float = 3.0
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.patients < 1 or not self.months or not self.sides:
            raise ValueError("patients, months, and sides must be non-empty/positive")
        if any(int(n) < 4 for n in self.shape):
            raise ValueError(f"shape too small: {self.shape}")
        if not 0.0 <= self.progressor_fraction <= 1.0:
            raise ValueError("progressor_fraction must be in [0, 1]")


@dataclass
class CohortData:
    volumes: dict  # (patient_id, side, month) -> Volume
    records: list  # ClinicalRecord
    manifest: dict


def _centered_grid(shape, spacing) -> Grid:
    n = np.asarray(shape, float)
    origin = tuple(-(n - 1) / 2.0 * spacing)
    return Grid(tuple(int(s) for s in shape), (spacing,) * 3, origin)


def _soft_ellipsoid(pts, center, radii, tilt_z=0.0):
    p = pts - np.asarray(center, float)
    if tilt_z:
        c, s = np.cos(tilt_z), np.sin(tilt_z)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        p = p @ rot.T
    d = np.linalg.norm(p / np.asarray(radii, float), axis=1)
    return 1.0 / (1.0 + np.exp((d - 1.0) * 9.0))


@dataclass
class KneeMorph:
    """Per-patient anatomy: bone sizes, tilts, intensities, marker offset."""

    femur_radii: tuple = (9.0, 5.5, 8.0)
    tibia_radii: tuple = (8.5, 5.5, 7.5)
    femur_intensity: float = 0.9
    tibia_intensity: float = 0.8
    femur_tilt: float = 0.12
    tibia_tilt: float = -0.08
    marker_offset: tuple = (6.5, -1.5, 5.5)
    marker_intensity: float = 0.55

    @classmethod
    def sample(cls, rng) -> "KneeMorph":
        scale = lambda base: tuple(r * rng.uniform(0.92, 1.08) for r in base)
        return cls(
            femur_radii=scale(cls.femur_radii),
            tibia_radii=scale(cls.tibia_radii),
            femur_intensity=0.9 * rng.uniform(0.95, 1.05),
            tibia_intensity=0.8 * rng.uniform(0.95, 1.05),
            femur_tilt=rng.uniform(0.05, 0.2),
            tibia_tilt=rng.uniform(-0.15, -0.03),
            marker_offset=tuple(np.array(cls.marker_offset) * rng.uniform(0.9, 1.1, 3)),
            marker_intensity=0.55 * rng.uniform(0.9, 1.1),
        )


def make_knee_phantom(
    jsw_mm: float,
    grid: Grid,
    morph: KneeMorph | None = None,
    pose: np.ndarray | None = None,
    noise: float = 0.0,
    rng=None,
) -> Volume:
    """Two bones with a jsw_mm gap along y, plus an off-axis marker blob.

    ``pose`` (a 4x4 matrix) maps scan coordinates to canonical anatomy
    coordinates, i.e. the anatomy is rendered already posed.
    """
    morph = morph or KneeMorph()
    pts = grid.points()
    if pose is not None:
        pts = pts @ pose[:3, :3].T + pose[:3, 3]
    fy = jsw_mm / 2.0 + morph.femur_radii[1]
    ty = -jsw_mm / 2.0 - morph.tibia_radii[1]
    img = morph.femur_intensity * _soft_ellipsoid(
        pts, (0.8, fy, -0.5), morph.femur_radii, morph.femur_tilt
    )
    img = img + morph.tibia_intensity * _soft_ellipsoid(
        pts, (-0.8, ty, 0.5), morph.tibia_radii, morph.tibia_tilt
    )
    img = img + morph.marker_intensity * _soft_ellipsoid(
        pts, morph.marker_offset, (3.0, 2.5, 2.8)
    )
    if noise > 0.0 and rng is not None:
        img = img + rng.normal(0.0, noise, size=img.shape)
    data = np.clip(img, 0.0, 1.0).reshape(grid.shape)
    return Volume(data, grid.spacing, grid.origin)


def make_asymmetric_phantom(shape=(48, 48, 48), spacing: float = 1.0) -> Volume:
    """Fixed three-blob phantom with no rotational symmetry, for transform
    recovery experiments where the optimum must be unique."""
    grid = _centered_grid(shape, spacing)
    pts = grid.points()
    img = 0.9 * _soft_ellipsoid(pts, (2.0, 6.5, -1.5), (13.0, 8.0, 11.0), 0.25)
    img = img + 0.75 * _soft_ellipsoid(pts, (-2.5, -7.0, 1.0), (11.0, 7.0, 10.0), -0.15)
    img = img + 0.6 * _soft_ellipsoid(pts, (8.0, -2.0, 7.0), (4.0, 3.0, 3.5))
    return Volume(np.clip(img, 0.0, 1.0).reshape(grid.shape), grid.spacing, grid.origin)


def random_affine_matrix(
    rng,
    max_rot_deg: float = 15.0,
    max_scale: float = 0.10,
    max_trans_mm: float = 4.8,
) -> np.ndarray:
    """Random rotation+scale+translation as a 4x4 matrix (via expm)."""
    axis = rng.uniform(-1.0, 1.0, 3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    log_s = np.log(1.0 + max_scale)
    gen = np.zeros((4, 4))
    gen[:3, :3] = angle * k + np.diag(rng.uniform(-log_s, log_s, 3))
    gen[:3, 3] = rng.uniform(-max_trans_mm, max_trans_mm, 3)
    return expm(gen)


def generate_cohort(cfg: SynthConfig, out_dir=None) -> CohortData:
    """Deterministic synthetic cohort; optionally written to disk.

    On disk: vol_<patient>_<side>_<month>.ipvol raw volumes, clinical.csv,
    and manifest.json recording every ground-truth quantity.
    """
    rng = np.random.default_rng(cfg.seed)
    grid = _centered_grid(cfg.shape, cfg.spacing)
    volumes = {}
    records = []
    scans = []
    patients = []

    for p in range(cfg.patients):
        pid = f"P{p:04d}"
        morph = KneeMorph.sample(rng)
        progressor = bool(rng.random() < cfg.progressor_fraction)
        jsw0 = float(rng.uniform(*cfg.jsw_range))
        rate = float(
            rng.uniform(*cfg.decline_mm_per_month)
            if progressor
            else rng.uniform(*cfg.stable_mm_per_month)
        )
        patients.append({"patient_id": pid, "progressor": progressor, "jsw0": jsw0, "rate_mm_per_month": rate})
        for side in cfg.sides:
            for m in cfg.months:
                jsw = max(0.5, jsw0 - rate * m)
                klg = klg_from_jsw(jsw)
                womac = womac_from_jsw(jsw, noise=float(rng.normal(0.0, 1.0)))
                pose_gen = np.zeros((4, 4))
                axis = rng.uniform(-1.0, 1.0, 3)
                axis /= np.linalg.norm(axis)
                angle = np.deg2rad(rng.uniform(-cfg.pose_rot_deg, cfg.pose_rot_deg))
                pose_gen[:3, :3] = angle * np.array(
                    [
                        [0.0, -axis[2], axis[1]],
                        [axis[2], 0.0, -axis[0]],
                        [-axis[1], axis[0], 0.0],
                    ]
                )
                pose_gen[:3, 3] = rng.uniform(-cfg.pose_trans_mm, cfg.pose_trans_mm, 3)
                pose = expm(pose_gen)
                vol = make_knee_phantom(jsw, grid, morph, pose=pose, noise=cfg.noise, rng=rng)
                volumes[(pid, side, m)] = vol
                records.append(
                    ClinicalRecord(pid, side, m, klg, womac, round(jsw, 4))
                )
                scans.append(
                    {
                        "patient_id": pid,
                        "side": side,
                        "month": m,
                        "jsw_mm": jsw,
                        "klg": klg,
                        "womac": womac,
                        "pose": pose.tolist(),
                        "file": f"vol_{pid}_{side}_{m:03d}.ipvol",
                    }
                )

    manifest = {
        "config": asdict(cfg),
        "patients": patients,
        "scans": scans,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for (pid, side, m), vol in volumes.items():
            write_volume(vol, out_dir / f"vol_{pid}_{side}_{m:03d}.ipvol")
        with (out_dir / "clinical.csv").open("w") as fh:
            fh.write("patient_id,side,month,klg,womac,jsw\n")
            for r in records:
                fh.write(
                    f"{r.patient_id},{r.side},{r.timepoint_months},{r.klg},{r.womac},{r.jsw_mm}\n"
                )
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1) + "\n"
        )
    return CohortData(volumes=volumes, records=records, manifest=manifest)
