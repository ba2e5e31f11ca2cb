"""Secondary acceptance gate: exported artifacts must be consumable by the
primary toolkit unmodified, and the specialist-recipe echo must be verbatim."""

import sys

import numpy as np
import pytest
import torch

from iconbridge.export import ExportSpec, TransformExportSpec, export_features, export_transform
from iconbridge.models import SEG_CHANNELS, SEG_STRIDES, SegUNet, SegUNetConfig, ToyRegNet, save_checkpoint
from iconbridge.train import UNetTrainConfig, train_local_unet

from iconprobe import geometry as primary_geo
from iconprobe import icon as primary_icon
from iconprobe import pipeline as primary_pipe
from iconprobe import probe as primary_probe


def report(name, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance] {name}: {status} ({detail})", file=sys.stdout, flush=True)
    assert ok, f"{name}: {detail}"


def test_bridge_conformance(volume_dir, seg_dataset, tmp_path):
    _, paths = volume_dir

    # --- every exported file passes the primary validators byte-exactly ---
    torch.manual_seed(0)
    cfg = SegUNetConfig(channels=(4, 4, 4, 4, 4, 8, 8, 8, 8), strides=SEG_STRIDES)
    model = SegUNet(cfg)
    model.eval()
    seg_ckpt = tmp_path / "toy.pt"
    save_checkpoint(model, seg_ckpt, kind="seg-unet", config=cfg.echo())
    feat_dir = tmp_path / "features"
    spec = ExportSpec(
        model_name="toy-seg",
        checkpoint=str(seg_ckpt),
        layers=("bottleneck",),
        inputs=[(str(p), pid, side, m) for (pid, side, m), p in sorted(paths.items())],
        preprocess_fingerprint="fp-acc",
        out_dir=str(feat_dir),
    )
    feature_files = export_features(spec)
    validated = 0
    for f in feature_files:
        primary_pipe.read_feature(f)  # raises on any malformation
        validated += 1

    reg = ToyRegNet()
    reg_ckpt = tmp_path / "reg.pt"
    save_checkpoint(reg, reg_ckpt, kind="reg-toy", config={"width": 8})
    keys = sorted(paths)[:2]
    (dsp, aff), = export_transform(
        TransformExportSpec(
            checkpoint=str(reg_ckpt),
            pairs=[(str(paths[keys[0]]), str(paths[keys[1]]), "p0")],
            out_dir=str(tmp_path / "tx"),
        )
    )
    field = primary_icon.read_displacement_file(dsp)
    affine = primary_icon.read_affine_file(aff)
    transforms_ok = np.max(np.abs(field.vectors)) == 0.0 and np.array_equal(affine.matrix, np.eye(4))
    validated += 2

    # --- toy-checkpoint export round-trips through assemble and train_probe ---
    store = primary_pipe.FeatureStore(feat_dir)
    examples = primary_pipe.assemble(
        store,
        primary_pipe.AssembleSpec(
            mode="single", extractor="toy-seg", layer="bottleneck",
            fingerprint="fp-acc", months=(0,),
        ),
    )
    x = np.stack([e.vector for e in examples])
    y = np.arange(len(examples)) % 2
    probe, _ = primary_probe.train_probe(x, y, primary_probe.ProbeConfig(iterations=100, seed=0))
    roundtrip_ok = probe.input_dim == 8 and len(examples) == len(paths)

    # --- specialist recipe echo is verbatim ---
    ckpt_path, _hist = train_local_unet(
        UNetTrainConfig(data_dir=str(seg_dataset), out_path=str(tmp_path / "unet.pt"), epochs=1)
    )
    import iconbridge.models as models

    _, doc = models.load_checkpoint(ckpt_path)
    echo_ok = (
        tuple(doc["config"]["channels"]) == (8, 16, 16, 32, 32, 64, 64, 128, 128)
        and tuple(doc["config"]["strides"]) == (2, 1, 2, 1, 2, 1, 2, 1)
        and doc["config"]["residual_units"] == 9
    )

    report(
        "bridge-conformance",
        transforms_ok and roundtrip_ok and echo_ok,
        f"{validated} exported files validated, assemble+probe dim 8 over "
        f"{len(examples)} examples, recipe echo verbatim {echo_ok}",
    )
