"""Feature and transform export into the consumer's interchange formats."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import formats
from .models import load_checkpoint, theta_to_matrix


@dataclass
class ExportSpec:
    """What to export: model/checkpoint, taps, inputs, and stamping metadata.

    ``inputs`` is a list of (volume_path, patient_id, side, timepoint_months).
    The preprocess fingerprint must be the one the consumer computed for the
    plan that produced these volumes, so downstream lookups line up.
    """

    model_name: str
    checkpoint: str
    layers: tuple
    inputs: list
    preprocess_fingerprint: str
    out_dir: str
    activation: str = "post"

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if not self.layers:
            raise ValueError("no layer taps requested")
        if not self.inputs:
            raise ValueError("no input volumes listed")


def _volume_tensor(vol: formats.VolumeArray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(vol.data, dtype=np.float32))[None, None]


def export_features(spec: ExportSpec):
    """One IPFEA1 file per (input volume, layer); returns written paths.

    Inference is deterministic (eval mode, no grad), so re-export produces
    byte-identical files.  Unresolvable layer ids fail before anything is
    written, naming the available taps.
    """
    model, _doc = load_checkpoint(spec.checkpoint)
    unknown = set(spec.layers) - set(model.tap_names)
    if unknown:
        raise KeyError(
            f"unresolvable layer ids {sorted(unknown)}; available taps: {list(model.tap_names)}"
        )
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for vol_path, patient_id, side, month in spec.inputs:
        vol = formats.read_volume(vol_path)
        with torch.no_grad():
            _, taps = model.forward_with_taps(_volume_tensor(vol), wanted=spec.layers)
        for layer in spec.layers:
            tensor = taps[layer][0].numpy()  # (C, dx, dy, dz)
            meta = formats.feature_metadata(
                patient_id,
                side,
                month,
                spec.model_name,
                layer,
                spec.preprocess_fingerprint,
                tensor.shape,
                activation=spec.activation,
            )
            name = formats.feature_filename(meta)
            formats.write_feature(meta, tensor, out_dir / name)
            formats.append_index(out_dir, meta, name)
            written.append(out_dir / name)
    return written


@dataclass
class TransformExportSpec:
    """Pairs to register and where the fields must live.

    ``pairs`` is a list of (moving_path, fixed_path, name); the fixed
    image's grid must match ``expected_grid`` (shape, spacing, origin)
    when one is given, since downstream resampling happens on that grid.
    """

    checkpoint: str
    pairs: list
    out_dir: str
    expected_grid: tuple | None = None

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("no pairs listed")


def export_transform(spec: TransformExportSpec):
    """Dense displacement fields (IPDSP1) plus the factored affine (IPAFF1).

    Returns a list of (ipdsp_path, ipaff_path) per pair.  Displacements are
    converted from voxel units to mm on the fixed grid.
    """
    model, _doc = load_checkpoint(spec.checkpoint)
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for moving_path, fixed_path, name in spec.pairs:
        moving = formats.read_volume(moving_path)
        fixed = formats.read_volume(fixed_path)
        if spec.expected_grid is not None and fixed.grid_key() != tuple(spec.expected_grid):
            raise formats.FormatError(
                f"grid metadata mismatch for {name}: fixed grid {fixed.grid_key()} "
                f"!= expected {tuple(spec.expected_grid)}"
            )
        with torch.no_grad():
            disp_vox, affine_params = model(_volume_tensor(moving), _volume_tensor(fixed))
        disp = disp_vox[0].numpy()  # (3, nx, ny, nz), voxel units
        vectors = np.stack(
            [disp[c] * fixed.spacing[c] for c in range(3)], axis=-1
        )  # mm, (nx, ny, nz, 3)
        dsp_path = out_dir / f"{name}.ipdsp"
        formats.write_displacement(vectors, fixed.spacing, fixed.origin, dsp_path)
        matrix = theta_to_matrix(affine_params[0].numpy())
        aff_path = out_dir / f"{name}.ipaff"
        formats.write_affine(matrix, aff_path)
        written.append((dsp_path, aff_path))
    return written
