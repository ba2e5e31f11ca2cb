"""Minimal command line for the exporter: everything is driven by one JSON
spec file per subcommand.

    icon-bridge train-unet       --spec train.json
    icon-bridge export-features  --spec features.json
    icon-bridge export-transform --spec transforms.json

Spec fields mirror the corresponding dataclasses (UNetTrainConfig,
ExportSpec, TransformExportSpec).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .export import ExportSpec, TransformExportSpec, export_features, export_transform
from .train import UNetTrainConfig, train_local_unet


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="icon-bridge")
    parser.add_argument("subcommand", choices=["train-unet", "export-features", "export-transform"])
    parser.add_argument("--spec", required=True, help="JSON spec file")
    args = parser.parse_args(argv)
    try:
        doc = json.loads(Path(args.spec).read_text())
        if args.subcommand == "train-unet":
            doc.setdefault("channels", list(UNetTrainConfig.channels))
            doc.setdefault("strides", list(UNetTrainConfig.strides))
            cfg = UNetTrainConfig(
                **{**doc, "channels": tuple(doc["channels"]), "strides": tuple(doc["strides"])}
            )
            path, history = train_local_unet(cfg)
            print(json.dumps({"checkpoint": str(path), "final_loss": history[-1], "recipe": cfg.echo()}))
        elif args.subcommand == "export-features":
            spec = ExportSpec(
                model_name=doc["model_name"],
                checkpoint=doc["checkpoint"],
                layers=tuple(doc["layers"]),
                inputs=[tuple(i) for i in doc["inputs"]],
                preprocess_fingerprint=doc["preprocess_fingerprint"],
                out_dir=doc["out_dir"],
                activation=doc.get("activation", "post"),
            )
            written = export_features(spec)
            print(f"wrote {len(written)} feature files to {spec.out_dir}")
        else:
            spec = TransformExportSpec(
                checkpoint=doc["checkpoint"],
                pairs=[tuple(p) for p in doc["pairs"]],
                out_dir=doc["out_dir"],
                expected_grid=tuple(tuple(g) for g in doc["expected_grid"]) if doc.get("expected_grid") else None,
            )
            written = export_transform(spec)
            print(f"wrote {len(written)} transform pairs to {spec.out_dir}")
        return 0
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
