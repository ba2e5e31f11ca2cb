"""Toy-scale volumetric models whose intermediate activations get exported.

The segmentation U-Net follows the specialist recipe: encoder channel
widths (8, 16, 16, 32, 32, 64, 64, 128, 128) with strides
(2, 1, 2, 1, 2, 1, 2, 1) over nine residual units; the deepest encoder
output (128 channels) is the "bottleneck" tap.  The registration net
predicts a dense displacement field plus a factored-out global affine;
both heads are zero-initialized so a fresh model is exactly the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

SEG_CHANNELS = (8, 16, 16, 32, 32, 64, 64, 128, 128)
SEG_STRIDES = (2, 1, 2, 1, 2, 1, 2, 1)
SEG_RESIDUAL_UNITS = 9
SEG_CLASSES = 5  # background + femur + tibia + femoral cartilage + tibial cartilage


@dataclass
class SegUNetConfig:
    channels: tuple = SEG_CHANNELS
    strides: tuple = SEG_STRIDES
    residual_units: int = SEG_RESIDUAL_UNITS
    num_classes: int = SEG_CLASSES
    in_channels: int = 1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) != self.residual_units:
            raise ValueError(
                f"{self.residual_units} residual units need {self.residual_units} "
                f"channel widths, got {len(self.channels)}"
            )
        if len(self.strides) != self.residual_units - 1:
            raise ValueError(
                f"expected {self.residual_units - 1} strides, got {len(self.strides)}"
            )

    def echo(self) -> dict:
        """Verbatim recipe echo, stored in checkpoints and logs."""
        return {
            "channels": list(self.channels),
            "strides": list(self.strides),
            "residual_units": self.residual_units,
            "num_classes": self.num_classes,
        }


class ResidualUnit(nn.Module):
    """conv-norm-relu-conv with a projected skip; stride on the first conv."""

    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = nn.InstanceNorm3d(out_ch, affine=True)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(out_ch, affine=True)
        self.act = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv3d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(y + self.skip(x))


class SegUNet(nn.Module):
    """Encoder of residual units per the recipe, light upsampling decoder.

    Tap names: "encoder0".."encoder8" (post-activation unit outputs) and
    "bottleneck" as an alias for the deepest encoder output.
    """

    def __init__(self, cfg: SegUNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or SegUNetConfig()
        units = []
        in_ch = self.cfg.in_channels
        for i, out_ch in enumerate(self.cfg.channels):
            stride = self.cfg.strides[i] if i < len(self.cfg.strides) else 1
            units.append(ResidualUnit(in_ch, out_ch, stride))
            in_ch = out_ch
        self.encoder = nn.ModuleList(units)
        # decoder: one upsample+conv per factor-2 downsampling in the encoder
        n_down = sum(1 for s in self.cfg.strides if s == 2)
        dec = []
        ch = self.cfg.channels[-1]
        for _ in range(n_down):
            nxt = max(ch // 2, 8)
            dec.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="trilinear", align_corners=False),
                    nn.Conv3d(ch, nxt, 3, padding=1),
                    nn.ReLU(inplace=True),
                )
            )
            ch = nxt
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv3d(ch, self.cfg.num_classes, 1)

    @property
    def tap_names(self):
        return tuple(f"encoder{i}" for i in range(len(self.encoder))) + ("bottleneck",)

    def forward_with_taps(self, x, wanted=None):
        """Returns (logits, {tap_name: activation tensor})."""
        wanted = set(self.tap_names if wanted is None else wanted)
        unknown = wanted - set(self.tap_names)
        if unknown:
            raise KeyError(
                f"unknown taps {sorted(unknown)}; available: {list(self.tap_names)}"
            )
        taps = {}
        y = x
        for i, unit in enumerate(self.encoder):
            y = unit(y)
            name = f"encoder{i}"
            if name in wanted:
                taps[name] = y
            if i == len(self.encoder) - 1 and "bottleneck" in wanted:
                taps["bottleneck"] = y
        for block in self.decoder:
            y = block(y)
        return self.head(y), taps

    def forward(self, x):
        logits, _ = self.forward_with_taps(x, wanted=())
        return logits


class ToyRegNet(nn.Module):
    """Two-image displacement predictor with a factored global affine head.

    The displacement head and the affine head are zero-initialized, so a
    freshly constructed model is exactly the identity transform: zero
    displacement everywhere and a zero affine parameter vector.
    """

    def __init__(self, width=8):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv3d(2, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(width, width, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.disp_head = nn.Conv3d(width, 3, 3, padding=1)
        nn.init.zeros_(self.disp_head.weight)
        nn.init.zeros_(self.disp_head.bias)
        self.affine_head = nn.Linear(width, 12)
        nn.init.zeros_(self.affine_head.weight)
        nn.init.zeros_(self.affine_head.bias)

    @property
    def tap_names(self):
        return ("features",)

    def forward(self, moving, fixed):
        """Returns (displacement (N,3,D,H,W) in voxels, affine params (N,12))."""
        x = torch.cat([moving, fixed], dim=1)
        f = self.features(x)
        disp = self.disp_head(f)
        affine = self.affine_head(f.mean(dim=(2, 3, 4)))
        return disp, affine


def theta_to_matrix(theta12: np.ndarray) -> np.ndarray:
    """12 Lie coefficients (row-major upper 3x4) -> 4x4 matrix via expm."""
    gen = np.zeros((4, 4))
    gen[0, :] = theta12[0:4]
    gen[1, :] = theta12[4:8]
    gen[2, :] = theta12[8:12]
    out = np.eye(4)
    term = np.eye(4)
    for i in range(1, 19):
        term = term @ gen / i
        out = out + term
    return out


def save_checkpoint(model: nn.Module, path, kind: str, config: dict, extra=None) -> None:
    doc = {
        "kind": kind,
        "config": config,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(doc, path)


def load_checkpoint(path):
    """Returns (model in eval mode, checkpoint dict)."""
    doc = torch.load(path, map_location="cpu", weights_only=False)
    kind = doc.get("kind")
    if kind == "seg-unet":
        cfg_doc = dict(doc["config"])
        cfg = SegUNetConfig(
            channels=tuple(cfg_doc["channels"]),
            strides=tuple(cfg_doc["strides"]),
            residual_units=int(cfg_doc["residual_units"]),
            num_classes=int(cfg_doc["num_classes"]),
        )
        model = SegUNet(cfg)
    elif kind == "reg-toy":
        model = ToyRegNet(width=int(doc["config"].get("width", 8)))
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    model.load_state_dict(doc["state_dict"])
    model.eval()
    return model, doc
