"""Command-line driver: experiment configuration, staged runs, and reports.

Every subcommand works off one JSON config document.  A run directory is
keyed by the hash of the resolved config plus the package version, so the
same config always lands in the same directory and reruns verify that
regenerated artifacts match what was recorded:

    runs/<id>/config.resolved
    runs/<id>/artifacts/<stage>/...
    runs/<id>/metrics.csv
    runs/<id>/log.jsonl

Subcommands: synth-cohort, atlas, register, preprocess, features, probe,
report, validate, fig1-sweep.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import atlas as atlas_mod
from . import clinical
from . import metrics as metrics_mod
from . import pipeline
from . import probe as probe_mod
from . import synth
from .geometry import read_volume, write_volume
from .icon import (
    AffineGenerator,
    FeatureSpec,
    RegStack,
    build_affine_stack,
    build_multires_stack,
    extract_reg_features,
    ic_affine,
    train_registration,
    TrainConfig,
    write_affine_file,
)

__all__ = ["main", "load_config", "resolve_config", "run_id", "RunDir"]

STAGES = (
    "synth-cohort",
    "atlas",
    "register",
    "preprocess",
    "features",
    "probe",
    "report",
    "validate",
    "fig1-sweep",
)

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs",
    "data": {"volumes_dir": None, "clinical_csv": None, "dense_transforms_dir": None},
    "cohort": {},
    "atlas": {"iters": 4, "epsilon": 0.5, "max_subjects": 200},
    "register": {"backend": "moment-translation", "train": {}},
    "preprocess": {"plans": {"none": {}, "A": {"affine_align": True}}},
    "features": {"intensity_pool": 2, "extractors": ["intensity", "toy-affine"]},
    "probe": {"iterations": 2000, "lr": 1e-3, "batch_size": 128, "weight_decay": 0.01},
    "experiments": [],
    "fig1": {"plans": ["none", "A"], "task": "klg4"},
}


class ConfigError(ValueError):
    """Configuration diagnostics with a stable code."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("CFG-FILE-MISSING", f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("CFG-PARSE", f"{path}:{e.lineno}: {e.msg}") from e


def _merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(cfg: dict, seed=None, out_dir=None) -> dict:
    resolved = _merge(DEFAULT_CONFIG, cfg)
    if seed is not None:
        resolved["seed"] = int(seed)
    if out_dir is not None:
        resolved["out_dir"] = str(out_dir)
    return resolved


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def run_id(resolved: dict) -> str:
    blob = canonical_json(resolved) + "|" + __version__
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


class RunDir:
    """Run directory bookkeeping: artifacts, rerun hash verification, event log.

    Every artifact write is recorded with its sha256; a rerun of the same
    config that produces different bytes for a recorded path is a
    determinism violation and fails loudly.
    """

    def __init__(self, resolved: dict):
        self.resolved = resolved
        self.id = run_id(resolved)
        self.root = Path(resolved["out_dir"]) / self.id
        self.artifacts = self.root / "artifacts"
        self._seen = {}

    def prepare(self):
        self.artifacts.mkdir(parents=True, exist_ok=True)
        cfg_path = self.root / "config.resolved"
        text = canonical_json(self.resolved) + "\n"
        if cfg_path.exists() and cfg_path.read_text() != text:
            raise ConfigError("RUN-ID-CLASH", f"run {self.id} exists with a different config")
        cfg_path.write_text(text)
        log_path = self.root / "log.jsonl"
        if log_path.exists():
            for line in log_path.read_text().splitlines():
                if not line.strip():
                    continue
                ev = json.loads(line)
                if ev.get("event") == "artifact":
                    self._seen[ev["path"]] = ev["sha256"]
        return self

    def stage_dir(self, stage: str) -> Path:
        d = self.artifacts / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def log(self, event: dict):
        event = {"ts": time.time(), **event}
        with (self.root / "log.jsonl").open("a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def record_artifact(self, stage: str, path: Path, allow_update: bool = False):
        rel = str(Path(path).relative_to(self.root))
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        if not allow_update and rel in self._seen and self._seen[rel] != digest:
            raise RuntimeError(
                f"determinism violation: rerun produced different bytes for {rel}"
            )
        self._seen[rel] = digest
        self.log({"event": "artifact", "stage": stage, "path": rel, "sha256": digest})

    def write_bytes(self, stage: str, name: str, payload: bytes) -> Path:
        path = self.stage_dir(stage) / name
        path.write_bytes(payload)
        self.record_artifact(stage, path)
        return path

    def write_bytes_root(self, name: str, payload: bytes) -> Path:
        path = self.root / name
        path.write_bytes(payload)
        self.record_artifact("report", path)
        return path

    def require_upstream(self, stage: str, path: Path) -> Path:
        if not Path(path).exists():
            raise ConfigError(
                "STAGE-UPSTREAM-MISSING",
                f"stage '{stage}' requires missing artifact {path}; run the upstream stage first",
            )
        return Path(path)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _cohort_dir(run: RunDir) -> Path:
    override = run.resolved["data"].get("volumes_dir")
    return Path(override) if override else run.artifacts / "synth-cohort"


def _clinical_path(run: RunDir) -> Path:
    override = run.resolved["data"].get("clinical_csv")
    return Path(override) if override else _cohort_dir(run) / "clinical.csv"


def _load_cohort_volumes(run: RunDir, stage: str):
    cdir = run.require_upstream(stage, _cohort_dir(run))
    vols = {}
    for f in sorted(cdir.glob("vol_*.ipvol")):
        stem = f.stem[len("vol_") :]
        pid, side, month = stem.rsplit("_", 2)
        vols[(pid, side, int(month))] = read_volume(f)
    if not vols:
        raise ConfigError("DATA-NO-VOLUMES", f"no vol_*.ipvol files under {cdir}")
    return vols


def _feature_spec() -> FeatureSpec:
    return FeatureSpec(histogram=False)


def _backend_path(run: RunDir) -> Path:
    return run.artifacts / "register" / "backend.json"


def _save_backend(run: RunDir, stack: RegStack, kind: str):
    doc = {
        "kind": kind,
        "feature_spec": {"histogram": False},
        "weights": [leaf.generator.weights.tolist() for leaf in stack.leaves],
    }
    run.write_bytes("register", "backend.json", (canonical_json(doc) + "\n").encode())


def _load_backend(run: RunDir, stage: str) -> RegStack:
    path = run.require_upstream(stage, _backend_path(run))
    doc = json.loads(path.read_text())
    spec = _feature_spec()
    gens = [AffineGenerator(np.asarray(w), spec) for w in doc["weights"]]
    return build_affine_stack(gens)


def _atlas_path(run: RunDir) -> Path:
    return run.artifacts / "atlas" / "atlas.ipvol"


def _plan_from_doc(doc: dict) -> pipeline.PreprocessPlan:
    return pipeline.PreprocessPlan(
        affine_align=bool(doc.get("affine_align", False)),
        nonparam_align=bool(doc.get("nonparam_align", False)),
        roi_crop=bool(doc.get("roi_crop", False)),
        crop_box=tuple(doc.get("crop_box", (0.2, 0.8, 0.2, 0.8, 0.3, 0.7))),
        normalize=doc.get("normalize", "none"),
    )


def _plans(run: RunDir) -> dict:
    return {
        name: _plan_from_doc(doc)
        for name, doc in run.resolved["preprocess"]["plans"].items()
    }


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_synth_cohort(run: RunDir) -> Path:
    cfg_doc = dict(run.resolved.get("cohort", {}))
    cfg_doc.setdefault("seed", run.resolved["seed"])
    known = {f for f in synth.SynthConfig.__dataclass_fields__}
    unknown = set(cfg_doc) - known
    if unknown:
        raise ConfigError("CFG-COHORT-FIELD", f"unknown cohort fields {sorted(unknown)}")
    for key in ("months", "sides", "shape", "jsw_range", "decline_mm_per_month", "stable_mm_per_month"):
        if key in cfg_doc:
            cfg_doc[key] = tuple(cfg_doc[key])
    cfg = synth.SynthConfig(**cfg_doc)
    out = run.stage_dir("synth-cohort")
    synth.generate_cohort(cfg, out_dir=out)
    for f in sorted(out.iterdir()):
        run.record_artifact("synth-cohort", f)
    run.log({"event": "stage-done", "stage": "synth-cohort", "volumes": cfg.patients * len(cfg.months) * len(cfg.sides)})
    return out


def cmd_atlas(run: RunDir) -> Path:
    records = clinical.read_clinical_csv(run.require_upstream("atlas", _clinical_path(run)))
    vols = _load_cohort_volumes(run, "atlas")
    acfg = run.resolved["atlas"]
    healthy = atlas_mod.select_healthy(records, max_subjects=int(acfg.get("max_subjects", 200)))
    if not healthy:
        raise ConfigError("ATLAS-NO-HEALTHY", "no healthy (KLG=0, WOMAC=0) enrollment subjects")
    sides = sorted({k[1] for k in vols})
    images = [vols[(pid, sides[0], 0)] for pid in healthy if (pid, sides[0], 0) in vols]
    spec = _feature_spec()
    tm = AffineGenerator.translation_matcher(images[0].grid.extent_mm, spec)
    backend = build_affine_stack([tm] + [AffineGenerator.zeros(spec) for _ in range(4)])
    state = atlas_mod.build_atlas(
        images,
        backend,
        atlas_mod.AtlasConfig(
            iters=int(acfg.get("iters", 4)),
            epsilon=float(acfg.get("epsilon", 0.5)),
            max_subjects=int(acfg.get("max_subjects", 200)),
        ),
    )
    out = run.stage_dir("atlas")
    atlas_mod.save_atlas(state, out / "atlas.ipvol", out / "atlas.json", subject_ids=healthy)
    run.record_artifact("atlas", out / "atlas.ipvol")
    run.record_artifact("atlas", out / "atlas.json")
    run.log({"event": "stage-done", "stage": "atlas", "iterations": state.iteration, "drift_mm": state.mean_displacement_norm})
    return out / "atlas.ipvol"


def cmd_register(run: RunDir) -> RegStack:
    vols = _load_cohort_volumes(run, "register")
    atlas_vol = read_volume(run.require_upstream("register", _atlas_path(run)))
    rcfg = run.resolved["register"]
    spec = _feature_spec()
    grid = atlas_vol.grid
    tm = AffineGenerator.translation_matcher(grid.extent_mm, spec)
    stack = build_affine_stack([tm] + [AffineGenerator.zeros(spec) for _ in range(4)])
    kind = rcfg.get("backend", "moment-translation")
    if kind == "trained":
        tcfg_doc = rcfg.get("train", {})
        n_pairs = int(tcfg_doc.get("pairs", 4))
        keys = sorted(vols)[:n_pairs]
        pairs = [(vols[k], atlas_vol) for k in keys]
        tcfg = TrainConfig(
            epochs=int(tcfg_doc.get("epochs", 30)),
            train_resolution=int(tcfg_doc.get("train_resolution", 12)),
            lr=float(tcfg_doc.get("lr", 0.05)),
            seed=run.resolved["seed"],
        )
        stack, _ = train_registration(stack, pairs, tcfg)
    elif kind != "moment-translation":
        raise ConfigError("CFG-BACKEND", f"unknown register backend {kind!r}")
    _save_backend(run, stack, kind)
    # per-volume transforms to the atlas, in the affine interchange format
    out = run.stage_dir("register")
    tdir = out / "transforms"
    tdir.mkdir(exist_ok=True)
    for (pid, side, m), vol in sorted(vols.items()):
        transform, _ = stack.predict(vol, atlas_vol)
        path = tdir / f"{pid}_{side}_{m:03d}.ipaff"
        write_affine_file(transform, path)
        run.record_artifact("register", path)
    run.log({"event": "stage-done", "stage": "register", "backend": kind, "transforms": len(vols)})
    return stack


def cmd_preprocess(run: RunDir) -> Path:
    vols = _load_cohort_volumes(run, "preprocess")
    plans = _plans(run)
    needs_atlas = any(p.affine_align or p.nonparam_align for p in plans.values())
    atlas_vol = None
    backend = None
    if needs_atlas:
        atlas_vol = read_volume(run.require_upstream("preprocess", _atlas_path(run)))
    if any(p.affine_align for p in plans.values()):
        backend = _load_backend(run, "preprocess")
    out = run.stage_dir("preprocess")
    for name, plan in sorted(plans.items()):
        pdir = out / name
        pdir.mkdir(exist_ok=True)
        for (pid, side, m), vol in sorted(vols.items()):
            if plan.nonparam_align:
                ddir = run.resolved["data"].get("dense_transforms_dir")
                if not ddir:
                    raise ConfigError(
                        "CFG-DENSE-MISSING",
                        f"plan {name!r} needs data.dense_transforms_dir with IPDSP1 files",
                    )
                from .icon import read_displacement_file

                dpath = Path(ddir) / f"{pid}_{side}_{m:03d}.ipdsp"
                run.require_upstream("preprocess", dpath)
                pvol = pipeline.preprocess(vol, atlas_vol, plan, backend=read_displacement_file(dpath))
            else:
                pvol = pipeline.preprocess(vol, atlas_vol, plan, backend=backend)
            write_volume(pvol, pdir / f"vol_{pid}_{side}_{m:03d}.ipvol")
            run.record_artifact("preprocess", pdir / f"vol_{pid}_{side}_{m:03d}.ipvol")
        (pdir / "plan.json").write_text(canonical_json({"fingerprint": plan.fingerprint(), **plan.flags()}) + "\n")
        run.record_artifact("preprocess", pdir / "plan.json")
    run.log({"event": "stage-done", "stage": "preprocess", "plans": sorted(plans)})
    return out


def _multires_backend(grid) -> RegStack:
    spec = _feature_spec()
    tm = AffineGenerator.translation_matcher(grid.extent_mm, spec)
    leaves = [ic_affine(tm) for _ in range(4)]
    return build_multires_stack(leaves)


def cmd_features(run: RunDir) -> Path:
    plans = _plans(run)
    fcfg = run.resolved["features"]
    pool_k = int(fcfg.get("intensity_pool", 2))
    extractors = fcfg.get("extractors", ["intensity", "toy-affine"])
    atlas_vol = read_volume(run.require_upstream("features", _atlas_path(run)))
    backend = _load_backend(run, "features") if "toy-affine" in extractors else None
    out = run.stage_dir("features")
    pre_root = run.require_upstream("features", run.artifacts / "preprocess")
    for name, plan in sorted(plans.items()):
        fp = plan.fingerprint()
        pdir = run.require_upstream("features", pre_root / name)
        store = pipeline.FeatureStore(out / name)
        # the atlas itself, preprocessed compatibly (crop/normalize only)
        atlas_plan = pipeline.PreprocessPlan(
            roi_crop=plan.roi_crop, crop_box=plan.crop_box, normalize=plan.normalize
        )
        atlas_pre = pipeline.preprocess(atlas_vol, None, atlas_plan)
        todo = sorted(pdir.glob("vol_*.ipvol"))
        for f in todo:
            stem = f.stem[len("vol_") :]
            pid, side, month = stem.rsplit("_", 2)
            vol = read_volume(f)
            if "intensity" in extractors:
                p = vol
                for _ in range(pool_k):
                    p = _pool(p)
                vec = p.data.reshape(-1)
                store.add(
                    pipeline.FeatureRecord(
                        pid, side, int(month), "intensity", f"pool{pool_k}", fp, (vec.size,), vec
                    )
                )
            if "toy-affine" in extractors:
                taps = extract_reg_features(backend, vol, atlas_pre)
                for entry in taps:
                    store.add(
                        pipeline.FeatureRecord(
                            pid, side, int(month), "toy-affine", f"leaf{entry.leaf_index}",
                            fp, entry.shape, entry.vector,
                        )
                    )
            if "toy-multires" in extractors:
                mstack = _multires_backend(vol.grid)
                taps = extract_reg_features(mstack, vol, atlas_pre)
                for entry in taps:
                    store.add(
                        pipeline.FeatureRecord(
                            pid, side, int(month), "toy-multires", f"leaf{entry.leaf_index}",
                            fp, entry.shape, entry.vector,
                        )
                    )
        if "intensity" in extractors:
            p = atlas_pre
            for _ in range(pool_k):
                p = _pool(p)
            vec = p.data.reshape(-1)
            store.add(pipeline.FeatureRecord("atlas", "ref", 0, "intensity", f"pool{pool_k}", fp, (vec.size,), vec))
        for f in sorted((out / name).iterdir()):
            run.record_artifact("features", f)
    run.log({"event": "stage-done", "stage": "features", "plans": sorted(plans)})
    return out


def _pool(vol):
    from .geometry import avg_pool

    return avg_pool(vol, 2)


# ---------------------------------------------------------------------------
# Probing experiments
# ---------------------------------------------------------------------------

def _labels_for_task(task, records, months):
    """Map from example key to label, per task semantics."""
    rec_by = {(r.patient_id, r.side, r.timepoint_months): r for r in records}
    months = tuple(months)
    labels = {}
    if task in ("klg4", "pain2"):
        for (pid, side, m), r in rec_by.items():
            if m in months:
                lab = clinical.klg_class(r.klg) if task == "klg4" else clinical.pain_label(r.womac)
                labels[(pid, side, (m,))] = lab
    elif task in ("prog_klg", "prog_jsw"):
        for r1, r2 in clinical.enumerate_pairs(records, task):
            if r1.timepoint_months in months and r2.timepoint_months in months:
                lab = (
                    clinical.prog_klg(r1, r2)
                    if task == "prog_klg"
                    else clinical.prog_jsw(r1, r2)
                )
                labels[(r1.patient_id, r1.side, (r1.timepoint_months, r2.timepoint_months))] = lab
    else:
        raise ConfigError("CFG-TASK-INVALID", f"unsupported experiment task {task!r}")
    return labels


def _future_labels(records, input_months, target_month, task):
    ds = clinical.build_future_dataset(records, input_months, target_month)
    want = "future_klg" if task == "future_klg" else "future_pain"
    return {ex.key: ex.label for ex in ds.examples if ex.task == want}, ds.dropped_keys


def _cell_examples(run, store_root, plans, cell, task, records, atlas_vol, backend):
    """Assemble (key, vector, label) triples for one experiment cell.

    Labels determine which knees and month tuples are wanted; assembly of
    the vectors is delegated to pipeline.assemble per month tuple.
    """
    plan = plans[cell["plan"]]
    fp = plan.fingerprint()
    mode = cell["mode"]
    extractor = cell["extractor"]
    months = tuple(cell.get("months", ()))
    store = pipeline.FeatureStore(store_root / cell["plan"])

    target_month = cell.get("target_month")
    if task in ("future_klg", "future_pain"):
        labels, _dropped = _future_labels(records, months, target_month, task)
    else:
        labels = _labels_for_task(task, records, months)

    layer = cell.get("layer") or _default_layer(run, extractor)
    atlas_rec = None
    if mode == "atlas_diff":
        atlas_rec = store.get("atlas", "ref", 0, extractor, layer, fp)
    lookup = None
    if mode == "reg_pair":
        pre_dir = run.artifacts / "preprocess" / cell["plan"]
        vol_cache = {}

        def lookup(pid, side, m):
            key = (pid, side, m)
            if key not in vol_cache:
                path = pre_dir / f"vol_{pid}_{side}_{m:03d}.ipvol"
                vol_cache[key] = read_volume(path) if path.exists() else None
            return vol_cache[key]

    examples = []
    month_tuples = sorted({k[2] for k in labels})
    for mts in month_tuples:
        knees = sorted({(k[0], k[1]) for k in labels if k[2] == mts})
        spec = pipeline.AssembleSpec(
            mode=mode, extractor=extractor, layer=layer, fingerprint=fp, months=mts,
            atlas_record=atlas_rec, stack=backend, volume_lookup=lookup,
            atlas_volume=atlas_vol,
        )
        for ex in pipeline.assemble(store, spec, knees=knees):
            lab = labels.get(ex.key)
            if lab is not None:
                examples.append((ex.key, ex.vector, lab))
    return examples


def _default_layer(run, extractor):
    if extractor == "intensity":
        return f"pool{int(run.resolved['features'].get('intensity_pool', 2))}"
    return "leaf1"


def _train_eval_cell(run, examples, task, seed):
    """Split, train with validation-selected checkpoint, return metric dict."""
    splits = clinical.split_patients(sorted({k[0] for k, _, _ in examples}), seed=seed)
    labeled = [
        clinical.LabeledExample(key, task, int(lab), splits[key[0]])
        for key, _vec, lab in examples
    ]
    buckets = {"train": [], "val": [], "test": []}
    for key, vec, lab in examples:
        buckets[splits[key[0]]].append((key, vec, lab))
    if not buckets["train"] or not buckets["test"]:
        raise ConfigError("EXP-EMPTY-SPLIT", f"task {task}: empty train or test split")
    pcfg_doc = run.resolved["probe"]
    iters = int(pcfg_doc.get("iterations", 2000))
    pcfg = probe_mod.ProbeConfig(
        iterations=iters,
        lr=float(pcfg_doc.get("lr", 1e-3)),
        batch_size=int(pcfg_doc.get("batch_size", 128)),
        weight_decay=float(pcfg_doc.get("weight_decay", 0.01)),
        seed=seed,
        checkpoint_every=max(iters // 8, 1),
    )
    x = np.array([v for _, v, _ in buckets["train"]])
    y = np.array([l for _, _, l in buckets["train"]])
    probe, log = probe_mod.train_probe(x, y, pcfg)
    # model selection: best validation accuracy among logged checkpoints
    chosen = probe
    if buckets["val"] and log.checkpoints:
        xv = np.array([v for _, v, _ in buckets["val"]])
        yv = np.array([l for _, _, l in buckets["val"]])
        best = -1.0
        for _it, ck in log.checkpoints:
            sv = metrics_mod.ScoredSet(probe_mod.predict_proba(ck, xv), yv)
            acc = metrics_mod.accuracy(sv)
            if acc > best:
                best, chosen = acc, ck
    xt = np.array([v for _, v, _ in buckets["test"]])
    yt = np.array([l for _, _, l in buckets["test"]])
    keys = [k for k, _, _ in buckets["test"]]
    st = metrics_mod.ScoredSet(probe_mod.predict_proba(chosen, xt), yt, keys=keys)
    vals = {"acc": metrics_mod.accuracy(st)}
    present = sorted(set(int(c) for c in np.unique(yt)))
    if st.n_classes == 2:
        if len(present) == 2:
            vals["auc"] = metrics_mod.auc_binary(st)
            vals["f1"] = metrics_mod.f1_binary(st)
            if int((yt == 1).sum()) > 0:
                vals["ap"] = metrics_mod.average_precision(st)
    elif len(present) >= 2:
        vals["auc"], _ = metrics_mod.auc_multiclass(st)
        # macro average precision over the classes present, one-vs-rest
        per_class = []
        for c in present:
            sub = metrics_mod.ScoredSet(st.scores[:, c], (yt == c).astype(int), keys=keys)
            per_class.append(metrics_mod.average_precision(sub))
        vals["ap"] = float(np.mean(per_class))
    return chosen, vals, len(yt), labeled


def cmd_probe(run: RunDir) -> Path:
    records = clinical.read_clinical_csv(run.require_upstream("probe", _clinical_path(run)))
    plans = _plans(run)
    store_root = run.require_upstream("probe", run.artifacts / "features")
    atlas_vol = read_volume(run.require_upstream("probe", _atlas_path(run)))
    backend = _load_backend(run, "probe")
    out = run.stage_dir("probe")
    rows = []
    experiments = run.resolved["experiments"]
    if not experiments:
        raise ConfigError("CFG-NO-EXPERIMENTS", "config declares no experiments")
    for exp in experiments:
        task = exp["task"]
        for cell in exp["cells"]:
            examples = _cell_examples(
                run, store_root, plans, {**cell, "target_month": exp.get("target_month")},
                task, records, atlas_vol, backend,
            )
            if not examples:
                raise ConfigError(
                    "EXP-NO-EXAMPLES", f"experiment {exp['id']} cell {cell} produced no examples"
                )
            probe, vals, n_test, labeled = _train_eval_cell(run, examples, task, run.resolved["seed"])
            required = metrics_mod._LAYOUT_METRICS.get(exp.get("layout", "table1"), [])
            for metric in required:
                if metric not in vals:
                    raise metrics_mod.UndefinedMetricError(
                        metric, f"experiment {exp['id']} cell {cell} (test split degenerate)"
                    )
            # month-set cells (Table-3 style rows) are distinguished by range
            mode_label = cell["mode"]
            if mode_label == "multi_concat":
                months_str = "-".join(str(m) for m in cell.get("months", ()))
                mode_label = f"multi_concat:{months_str}"
            name = f"{exp['id']}__{cell['plan']}__{cell['extractor']}__{mode_label}"
            name = name.replace(":", "-")
            probe_mod.save_probe(probe, out / f"{name}.ipprb")
            run.record_artifact("probe", out / f"{name}.ipprb")
            clinical.write_examples_jsonl(labeled, out / f"{name}.examples.jsonl")
            run.record_artifact("probe", out / f"{name}.examples.jsonl")
            plan = plans[cell["plan"]]
            rows.append(
                metrics_mod.ResultRow(
                    experiment=exp["id"],
                    flags=plan.flags(),
                    extractor=cell["extractor"],
                    mode=mode_label,
                    metrics=vals,
                    n_examples=n_test,
                )
            )
    _write_rows(run, rows)
    run.log({"event": "stage-done", "stage": "probe", "rows": len(rows)})
    return out


def _write_rows(run: RunDir, rows, name="rows.jsonl"):
    payload = "".join(
        canonical_json(
            {
                "experiment": r.experiment,
                "flags": r.flags,
                "extractor": r.extractor,
                "mode": r.mode,
                "metrics": r.metrics,
                "n": r.n_examples,
            }
        )
        + "\n"
        for r in rows
    )
    existing = ""
    path = run.stage_dir("probe") / name
    if path.exists():
        existing = path.read_text()
    merged = existing + payload
    # dedupe identical reruns
    lines = list(dict.fromkeys(merged.splitlines()))
    path.write_text("\n".join(lines) + "\n")
    # cumulative across probe and fig1-sweep, so updates are expected
    run.record_artifact("probe", path, allow_update=True)


def _read_rows(run: RunDir, stage_name="probe", name="rows.jsonl"):
    path = run.require_upstream("report", run.artifacts / stage_name / name)
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        rows.append(
            metrics_mod.ResultRow(
                experiment=d["experiment"],
                flags=d["flags"],
                extractor=d["extractor"],
                mode=d["mode"],
                metrics=d["metrics"],
                n_examples=d["n"],
            )
        )
    return rows


def cmd_report(run: RunDir) -> Path:
    rows = _read_rows(run)
    layouts = {exp["id"]: exp.get("layout", "table1") for exp in run.resolved["experiments"]}
    layouts["fig1"] = "fig1_sweep"
    texts = []
    csv_parts = []
    for exp_id in dict.fromkeys([r.experiment for r in rows]):
        sub = [r for r in rows if r.experiment == exp_id]
        text, csv_text = metrics_mod.render_report(sub, layouts.get(exp_id, "table1"))
        texts.append(f"== {exp_id} ==\n{text}")
        body = csv_text.splitlines()
        if not csv_parts:
            csv_parts.append(csv_text)
        elif len(body) > 1:
            csv_parts.append("\n".join(body[1:]) + "\n")
    report_txt = "\n".join(texts)
    metrics_csv = "".join(csv_parts)
    run.write_bytes_root("report.txt", report_txt.encode())
    run.write_bytes_root("metrics.csv", metrics_csv.encode())
    run.log({"event": "stage-done", "stage": "report"})
    sys.stdout.write(report_txt)
    return run.root / "metrics.csv"


def cmd_fig1_sweep(run: RunDir) -> None:
    """Per-leaf probing of the multiresolution stack taps (layer ablation)."""
    records = clinical.read_clinical_csv(run.require_upstream("fig1", _clinical_path(run)))
    plans = _plans(run)
    store_root = run.require_upstream("fig1", run.artifacts / "features")
    fcfg = run.resolved["fig1"]
    task = fcfg.get("task", "klg4")
    months = tuple(fcfg.get("months") or next(iter(run.resolved["experiments"]), {}).get("months", ()))
    if not months:
        raise ConfigError("CFG-MONTHS-EMPTY", "fig1 sweep needs months (fig1.months or first experiment)")
    rows = []
    for plan_name in fcfg.get("plans", ["none", "A"]):
        if plan_name not in plans:
            raise ConfigError("CFG-PLAN-UNKNOWN", f"fig1 references unknown plan {plan_name!r}")
        for leaf in (1, 2, 3, 4):
            cell = {
                "plan": plan_name,
                "extractor": "toy-multires",
                "mode": "single",
                "months": months,
                "layer": f"leaf{leaf}",
            }
            examples = _cell_examples(run, store_root, plans, cell, task, records, None, None)
            if not examples:
                raise ConfigError("EXP-NO-EXAMPLES", f"fig1 leaf {leaf} produced no examples")
            _probe, vals, n_test, _labeled = _train_eval_cell(run, examples, task, run.resolved["seed"])
            rows.append(
                metrics_mod.ResultRow(
                    experiment="fig1",
                    flags=plans[plan_name].flags(),
                    extractor=f"toy-multires-leaf{leaf}",
                    mode="single",
                    metrics=vals,
                    n_examples=n_test,
                )
            )
    _write_rows(run, rows)
    run.log({"event": "stage-done", "stage": "fig1-sweep", "rows": len(rows)})


def cmd_validate(run: RunDir) -> list:
    """Dry-run diagnostics; returns a list of (code, message) problems."""
    problems = []
    resolved = run.resolved
    try:
        plans = _plans(run)
    except ValueError as e:
        problems.append(("CFG-PLAN-INVALID", str(e)))
        plans = {}
    cdir = _cohort_dir(run)
    if not cdir.exists():
        problems.append(("CFG-DATA-MISSING", f"volumes dir not found: {cdir}"))
    cpath = _clinical_path(run)
    if not cpath.exists():
        problems.append(("CFG-CLINICAL-MISSING", f"clinical csv not found: {cpath}"))
    else:
        try:
            clinical.read_clinical_csv(cpath)
        except ValueError as e:
            problems.append(("DATA-CLINICAL-INVALID", str(e)))
    needs_atlas = any(p.affine_align or p.nonparam_align for p in plans.values())
    if needs_atlas and not _atlas_path(run).exists():
        problems.append(("CFG-ATLAS-MISSING", f"atlas not built: {_atlas_path(run)}"))
    for exp in resolved.get("experiments", []):
        if exp.get("task") not in clinical.TASKS:
            problems.append(("CFG-TASK-INVALID", f"experiment {exp.get('id')}: task {exp.get('task')!r}"))
        if not exp.get("cells"):
            problems.append(("CFG-NO-CELLS", f"experiment {exp.get('id')} has no cells"))
        for cell in exp.get("cells", []):
            if cell.get("plan") not in plans:
                problems.append(("CFG-PLAN-UNKNOWN", f"cell references unknown plan {cell.get('plan')!r}"))
            if not cell.get("months") and "target_month" not in exp:
                problems.append(("CFG-MONTHS-EMPTY", f"cell {cell} lacks months"))
    # feature dimension consistency across each experiment's cells
    froot = run.artifacts / "features"
    if froot.exists() and plans:
        for exp in resolved.get("experiments", []):
            dims = {}
            for cell in exp.get("cells", []):
                if cell.get("plan") not in plans or cell.get("mode") == "reg_pair":
                    continue
                store = pipeline.FeatureStore(froot / cell["plan"])
                fp = plans[cell["plan"]].fingerprint()
                layer = cell.get("layer") or _default_layer(run, cell["extractor"])
                sizes = {
                    int(np.prod(store.get(*k).shape))
                    for k in store.keys()
                    if k[3] == cell["extractor"] and k[4] == layer and k[5] == fp
                }
                if len(sizes) > 1:
                    problems.append(
                        ("FEAT-DIM-MISMATCH", f"{cell['extractor']}/{layer} under plan {cell['plan']}: sizes {sorted(sizes)}")
                    )
                elif sizes:
                    dims[(cell["extractor"], layer)] = sizes.pop()
    for code, msg in problems:
        print(f"{code}: {msg}")
    if not problems:
        print("OK")
    return problems


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="icon-probe",
        description="Registration-operator feature probing experiments on volumetric cohorts",
    )
    parser.add_argument("subcommand", choices=STAGES)
    parser.add_argument("--config", required=True, help="JSON experiment configuration")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override output directory")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        resolved = resolve_config(cfg, seed=args.seed, out_dir=args.out)
        run = RunDir(resolved).prepare()
        run.log({"event": "command", "subcommand": args.subcommand, "version": __version__})
        if args.subcommand == "synth-cohort":
            cmd_synth_cohort(run)
        elif args.subcommand == "atlas":
            cmd_atlas(run)
        elif args.subcommand == "register":
            cmd_register(run)
        elif args.subcommand == "preprocess":
            cmd_preprocess(run)
        elif args.subcommand == "features":
            cmd_features(run)
        elif args.subcommand == "probe":
            cmd_probe(run)
        elif args.subcommand == "report":
            cmd_report(run)
        elif args.subcommand == "fig1-sweep":
            cmd_fig1_sweep(run)
        elif args.subcommand == "validate":
            problems = cmd_validate(run)
            return 1 if problems else 0
        print(f"run {run.id}: {args.subcommand} done -> {run.root}")
        return 0
    except (ConfigError, metrics_mod.UndefinedMetricError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
