"""Training of the local specialist segmentation U-Net.

The recipe is fixed: nine residual units with encoder channels
(8, 16, 16, 32, 32, 64, 64, 128, 128) and strides (2, 1, 2, 1, 2, 1, 2, 1),
AdamW at lr 1e-3, 50 epochs by default.  The dataset directory holds
paired raw volumes named ``case_<id>_img.ipvol`` / ``case_<id>_seg.ipvol``
(segmentations carry integer class labels in the float payload).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import formats
from .models import (
    SEG_CHANNELS,
    SEG_STRIDES,
    SegUNet,
    SegUNetConfig,
    save_checkpoint,
)


@dataclass
class UNetTrainConfig:
    data_dir: str = ""
    out_path: str = "seg_unet.pt"
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 2
    seed: int = 0
    channels: tuple = SEG_CHANNELS
    strides: tuple = SEG_STRIDES
    num_classes: int = 5

    def echo(self) -> dict:
        doc = asdict(self)
        doc["channels"] = list(self.channels)
        doc["strides"] = list(self.strides)
        return doc


def load_dataset(data_dir):
    """Paired (image, labels) arrays from a dataset directory."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"dataset missing: {data_dir}")
    images = sorted(data_dir.glob("case_*_img.ipvol"))
    if not images:
        raise FileNotFoundError(f"dataset missing: no case_*_img.ipvol under {data_dir}")
    pairs = []
    for img_path in images:
        seg_path = data_dir / img_path.name.replace("_img.", "_seg.")
        if not seg_path.exists():
            raise FileNotFoundError(f"dataset missing segmentation for {img_path.name}")
        img = formats.read_volume(img_path)
        seg = formats.read_volume(seg_path)
        if img.shape != seg.shape:
            raise ValueError(f"{img_path.name}: image/segmentation shape mismatch")
        pairs.append((img.data.astype(np.float32), seg.data.astype(np.int64)))
    return pairs


def train_local_unet(cfg: UNetTrainConfig):
    """Train the specialist U-Net and write a loadable checkpoint.

    Returns (checkpoint_path, per_epoch_losses).  The checkpoint embeds the
    verbatim channel/stride recipe so downstream tools can verify it.
    """
    pairs = load_dataset(cfg.data_dir)
    torch.manual_seed(cfg.seed)
    model_cfg = SegUNetConfig(
        channels=cfg.channels, strides=cfg.strides, num_classes=cfg.num_classes
    )
    model = SegUNet(model_cfg)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(cfg.seed)

    history = []
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            x = torch.from_numpy(np.stack([pairs[i][0] for i in sel]))[:, None]
            y = torch.from_numpy(np.stack([pairs[i][1] for i in sel]))
            opt.zero_grad()
            logits = model(x)
            loss = loss_fn(logits, y)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            batches += 1
        history.append(epoch_loss / batches)

    model.eval()
    save_checkpoint(
        model,
        cfg.out_path,
        kind="seg-unet",
        config=model_cfg.echo(),
        extra={"train_config": cfg.echo(), "loss_history": history},
    )
    return Path(cfg.out_path), history
