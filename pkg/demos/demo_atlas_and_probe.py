#!/usr/bin/env python3
"""Small end-to-end study on a synthetic cohort, through the Python API.

Generates phantom knees with planted progression, builds a healthy-template
atlas, extracts pooled-intensity and registration-tap features with and
without affine alignment, and probes them for the 4-class grade label.
"""

import numpy as np

from iconprobe import atlas as atl
from iconprobe import clinical as cl
from iconprobe import geometry as g
from iconprobe import icon
from iconprobe import metrics as mt
from iconprobe import pipeline as pl
from iconprobe import probe as pr
from iconprobe import synth

cfg = synth.SynthConfig(patients=64, seed=12)
cohort = synth.generate_cohort(cfg)
print(f"cohort: {len(cohort.volumes)} scans, {len(cohort.records)} clinical records")

healthy = atl.select_healthy(cohort.records)
print(f"healthy enrollment subjects: {len(healthy)}")

grid = next(iter(cohort.volumes.values())).grid
spec = icon.FeatureSpec(histogram=False)
tm = icon.AffineGenerator.translation_matcher(grid.extent_mm, spec)
backend = icon.build_affine_stack([tm] + [icon.AffineGenerator.zeros(spec)] * 4)

state = atl.build_atlas(
    [cohort.volumes[(pid, "right", 0)] for pid in healthy], backend, atl.AtlasConfig(iters=4)
)
print("atlas drift history (mm):", ["%.3f" % h for h in state.history])
atlas_vol = state.template

splits = cl.split_patients(sorted({r.patient_id for r in cohort.records}), seed=5)
rec_by = {(r.patient_id, r.side, r.timepoint_months): r for r in cohort.records}


def evaluate(vectors):
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for key in sorted(vectors):
        label = cl.klg_class(rec_by[key].klg)
        if splits[key[0]] == "train":
            tr_x.append(vectors[key])
            tr_y.append(label)
        elif splits[key[0]] == "test":
            te_x.append(vectors[key])
            te_y.append(label)
    probe, _ = pr.train_probe(
        np.asarray(tr_x), np.asarray(tr_y), pr.ProbeConfig(iterations=1500, seed=3)
    )
    scored = mt.ScoredSet(pr.predict_proba(probe, np.asarray(te_x)), np.asarray(te_y))
    auc, _ = mt.auc_multiclass(scored)
    return mt.accuracy(scored), auc


for plan_name, plan in (
    ("no alignment", pl.PreprocessPlan()),
    ("affine to atlas", pl.PreprocessPlan(affine_align=True)),
):
    pre = {
        key: pl.preprocess(vol, atlas_vol, plan, backend=backend)
        for key, vol in cohort.volumes.items()
    }
    intensity = {k: g.avg_pool(g.avg_pool(v)).data.reshape(-1) for k, v in pre.items()}
    reg = {
        k: np.concatenate([e.vector for e in icon.extract_reg_features(backend, v, atlas_vol)])
        for k, v in pre.items()
    }
    acc_i, auc_i = evaluate(intensity)
    acc_r, auc_r = evaluate(reg)
    print(f"\n[{plan_name}]")
    print(f"  pooled intensity : acc {acc_i:.3f}  auc {auc_i:.3f}")
    print(f"  registration taps: acc {acc_r:.3f}  auc {auc_r:.3f}")

print(
    "\nExpected pattern: alignment helps the intensity features substantially,"
    "\nwhile the registration-tap features barely change."
)
