"""Preprocessing plans, the feature interchange format, and feature assembly.

A preprocessing plan combines up to three steps: affine alignment to an
atlas ("A"), nonparametric alignment via an imported dense transform ("D",
alternative to "A"), and fractional ROI cropping ("C"), optionally followed
by percentile intensity normalization.  Features move between tools as
"IPFEA1" files: a JSON metadata header plus a little-endian f32 tensor.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    MagicError,
    Transform,
    TruncatedPayloadError,
    Volume,
    VolumeIOError,
    warp,
)
from .icon import RegStack, extract_reg_features

__all__ = [
    "PreprocessPlan",
    "preprocess",
    "FeatureRecord",
    "write_feature",
    "read_feature",
    "FeatureStore",
    "gap_pool",
    "AssembleSpec",
    "AssembledExample",
    "assemble",
    "MissingRecordError",
    "FEATURE_MAGIC",
]

FEATURE_MAGIC = b"IPFEA1\n"

MODES = ("single", "atlas_diff", "pair_concat", "reg_pair", "multi_concat")


class MissingRecordError(KeyError):
    """A referenced feature record is absent from the store."""


@dataclass(frozen=True)
class PreprocessPlan:
    """Which preprocessing steps apply, and their parameters.

    Affine and nonparametric alignment are alternatives, never combined.
    The crop box is fractional (per-axis lo/hi in [0, 1]) so it transfers
    across resolutions.
    """

    affine_align: bool = False
    nonparam_align: bool = False
    roi_crop: bool = False
    crop_box: tuple = (0.2, 0.8, 0.2, 0.8, 0.3, 0.7)
    normalize: str = "none"  # "none" | "percentile"

    def __post_init__(self):
        if self.affine_align and self.nonparam_align:
            raise ValueError("affine and nonparametric alignment are mutually exclusive")
        if len(self.crop_box) != 6:
            raise ValueError("crop_box needs 6 fractions (lo, hi per axis)")
        for ax in range(3):
            lo, hi = self.crop_box[2 * ax], self.crop_box[2 * ax + 1]
            if not (0.0 <= lo < hi <= 1.0):
                raise ValueError(f"crop_box axis {ax}: need 0 <= lo < hi <= 1, got ({lo}, {hi})")
        if self.normalize not in ("none", "percentile"):
            raise ValueError(f"unknown normalize policy {self.normalize!r}")

    def flags(self) -> dict:
        return {"A": self.affine_align, "D": self.nonparam_align, "C": self.roi_crop}

    def fingerprint(self) -> str:
        doc = {
            "affine_align": self.affine_align,
            "nonparam_align": self.nonparam_align,
            "roi_crop": self.roi_crop,
            "crop_box": [float(c) for c in self.crop_box],
            "normalize": self.normalize,
        }
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _crop(vol: Volume, box) -> Volume:
    slices = []
    new_origin = []
    for ax, n in enumerate(vol.shape):
        lo = int(math.floor(box[2 * ax] * n))
        hi = int(math.floor(box[2 * ax + 1] * n))
        if hi - lo < 1:
            raise ValueError(f"degenerate crop on axis {ax}: [{lo}, {hi}) of {n}")
        slices.append(slice(lo, hi))
        new_origin.append(vol.origin[ax] + lo * vol.spacing[ax])
    return Volume(vol.data[tuple(slices)], vol.spacing, tuple(new_origin))


def _normalize_percentile(vol: Volume, lo_pct=0.1, hi_pct=99.9) -> Volume:
    lo, hi = np.percentile(vol.data, [lo_pct, hi_pct])
    if hi <= lo:
        return vol.with_data(np.zeros(vol.shape))
    clipped = np.clip(vol.data, lo, hi)
    return vol.with_data((clipped - lo) / (hi - lo))


def preprocess(image: Volume, atlas: Volume | None, plan: PreprocessPlan, backend=None) -> Volume:
    """Apply the plan's steps in order: align, crop, normalize.

    "A" registers the image to the atlas with the RegStack backend and
    resamples onto the atlas grid; "D" resamples through an imported dense
    transform instead.  An all-false plan returns the input bit-exactly.
    """
    out = image
    if plan.affine_align or plan.nonparam_align:
        if atlas is None:
            raise ValueError("alignment requires an atlas volume")
    if plan.affine_align:
        if not isinstance(backend, RegStack):
            raise ValueError("affine alignment requires a RegStack backend")
        transform, _ = backend.predict(out, atlas)
        out = warp(out, transform, atlas.grid)
    elif plan.nonparam_align:
        if not isinstance(backend, Transform):
            raise ValueError("nonparametric alignment requires an imported transform")
        out = warp(out, backend, atlas.grid)
    if plan.roi_crop:
        out = _crop(out, plan.crop_box)
    if plan.normalize == "percentile":
        out = _normalize_percentile(out)
    return out


# ---------------------------------------------------------------------------
# Feature interchange
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureRecord:
    """One identified feature tensor; payload is float32, C-order."""

    patient_id: str
    side: str
    timepoint_months: int
    extractor: str
    layer: str
    preprocess_fingerprint: str
    shape: tuple
    payload: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("patient_id", "side", "extractor", "layer", "preprocess_fingerprint"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        arr = np.ascontiguousarray(self.payload, dtype=np.float32)
        shape = tuple(int(s) for s in self.shape)
        if int(np.prod(shape)) != arr.size:
            raise ValueError(f"payload size {arr.size} does not match shape {shape}")
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise ValueError(f"non-finite payload value at flat index {bad}")
        arr = arr.reshape(shape)
        arr.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "payload", arr)

    @property
    def store_key(self):
        return (
            self.patient_id,
            self.side,
            self.timepoint_months,
            self.extractor,
            self.layer,
            self.preprocess_fingerprint,
        )

    def metadata(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "side": self.side,
            "timepoint_months": self.timepoint_months,
            "extractor": self.extractor,
            "layer": self.layer,
            "preprocess_fingerprint": self.preprocess_fingerprint,
            "shape": list(self.shape),
        }


def write_feature(rec: FeatureRecord, path) -> None:
    """IPFEA1 layout: magic, u32 metadata length, canonical JSON, f32 payload."""
    blob = json.dumps(rec.metadata(), sort_keys=True, separators=(",", ":")).encode()
    payload = rec.payload.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def read_feature(path) -> FeatureRecord:
    raw = Path(path).read_bytes()
    if raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise MagicError(f"malformed feature magic: {raw[:8]!r}")
    off = len(FEATURE_MAGIC)
    if len(raw) < off + 4:
        raise TruncatedPayloadError("feature file shorter than its metadata length field")
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + mlen:
        raise TruncatedPayloadError("feature metadata truncated")
    try:
        meta = json.loads(raw[off : off + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeIOError(f"bad feature metadata JSON: {e}") from e
    off += mlen
    shape = tuple(int(s) for s in meta["shape"])
    count = int(np.prod(shape))
    body = raw[off:]
    if len(body) < count * 4:
        raise TruncatedPayloadError(
            f"feature payload has {len(body)} bytes, metadata declares {count * 4}"
        )
    payload = np.frombuffer(body[: count * 4], dtype="<f4")
    bad = np.flatnonzero(~np.isfinite(payload))
    if bad.size:
        raise VolumeIOError(f"non-finite payload value at flat index {int(bad[0])}")
    return FeatureRecord(
        patient_id=meta["patient_id"],
        side=meta["side"],
        timepoint_months=int(meta["timepoint_months"]),
        extractor=meta["extractor"],
        layer=meta["layer"],
        preprocess_fingerprint=meta["preprocess_fingerprint"],
        shape=shape,
        payload=payload.reshape(shape),
    )


class FeatureStore:
    """Keyed feature records, optionally mirrored to a directory of IPFEA1
    files with a JSON-lines index."""

    INDEX_NAME = "index.jsonl"

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._records = {}
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            index = self.directory / self.INDEX_NAME
            if index.exists():
                for line in index.read_text().splitlines():
                    if not line.strip():
                        continue
                    entry = json.loads(line)
                    rec = read_feature(self.directory / entry["path"])
                    self._records[rec.store_key] = rec

    def __len__(self):
        return len(self._records)

    def __contains__(self, key):
        return key in self._records

    def keys(self):
        return self._records.keys()

    def add(self, rec: FeatureRecord) -> None:
        self._records[rec.store_key] = rec
        if self.directory is not None:
            name = "_".join(str(p) for p in rec.store_key) + ".ipfea"
            write_feature(rec, self.directory / name)
            with (self.directory / self.INDEX_NAME).open("a") as fh:
                fh.write(json.dumps({**rec.metadata(), "path": name}, sort_keys=True) + "\n")

    def get(self, patient_id, side, timepoint_months, extractor, layer, fingerprint) -> FeatureRecord:
        key = (patient_id, side, int(timepoint_months), extractor, layer, fingerprint)
        rec = self._records.get(key)
        if rec is None:
            raise MissingRecordError(f"feature record missing for key {key}")
        return rec


def gap_pool(rec: FeatureRecord) -> np.ndarray:
    """Global average pool over spatial axes; input shape (channels, spatial...)."""
    if len(rec.shape) < 2:
        raise ValueError(f"gap_pool needs rank >= 2 (channels, spatial...), got {rec.shape}")
    arr = rec.payload.astype(np.float64)
    return arr.mean(axis=tuple(range(1, arr.ndim)))


def _pooled(rec: FeatureRecord) -> np.ndarray:
    """Record as a probe-ready vector: rank-1 payloads pass through, higher
    ranks are globally average-pooled per channel."""
    if len(rec.shape) == 1:
        return rec.payload.astype(np.float64)
    return gap_pool(rec)


@dataclass
class AssembleSpec:
    """What to assemble: mode, record coordinates, and mode-specific inputs.

    months is the ordered timepoint tuple consumed per example: one month
    for single/atlas_diff, two for pair_concat, one or two for reg_pair
    (one month pairs the image with the atlas volume), and the full month
    set for multi_concat.
    """

    mode: str
    extractor: str
    layer: str
    fingerprint: str
    months: tuple
    atlas_record: FeatureRecord | None = None
    stack: RegStack | None = None
    volume_lookup: object = None  # callable (patient_id, side, month) -> Volume
    atlas_volume: Volume | None = None
    leaf_select: tuple | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        self.months = tuple(int(m) for m in self.months)
        if not self.months:
            raise ValueError("months must be non-empty")
        need = {"single": 1, "atlas_diff": 1, "pair_concat": 2}
        if self.mode in need and len(self.months) != need[self.mode]:
            raise ValueError(f"mode {self.mode} takes {need[self.mode]} month(s)")
        if self.mode == "reg_pair" and len(self.months) not in (1, 2):
            raise ValueError("reg_pair takes 1 month (vs atlas) or 2 months")


@dataclass(frozen=True)
class AssembledExample:
    key: tuple  # (patient_id, side, months)
    vector: np.ndarray
    mode: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("assembled vector must be a finite 1-D array")
        object.__setattr__(self, "vector", v)


def _store_keys(store: FeatureStore, spec: AssembleSpec):
    """Distinct (patient, side) pairs holding records for this spec's coordinates."""
    keys = set()
    for (pid, side, month, ext, layer, fp) in store.keys():
        if ext == spec.extractor and layer == spec.layer and fp == spec.fingerprint:
            keys.add((pid, side))
    return sorted(keys)


def assemble(store: FeatureStore, spec: AssembleSpec, knees=None):
    """Build probe-ready vectors, one per knee.

    single: pooled record; atlas_diff: pooled(image) - pooled(atlas);
    pair_concat / multi_concat: concatenation over the month tuple;
    reg_pair: concatenated taps of the registration stack run on the
    month pair (or on (image, atlas) for a single month).

    ``knees`` restricts the (patient, side) set; by default every knee
    with any record at this spec's coordinates is assembled, and a knee
    missing a referenced month raises MissingRecordError naming the key.
    """
    out = []
    expected_dim = None
    if knees is None:
        knees = _store_keys(store, spec)
    for pid, side in knees:
        if spec.mode == "reg_pair":
            vec = _assemble_reg_pair(spec, pid, side)
            if vec is None:
                continue
        else:
            recs = [
                store.get(pid, side, m, spec.extractor, spec.layer, spec.fingerprint)
                for m in spec.months
            ]
            if spec.mode == "single":
                vec = _pooled(recs[0])
            elif spec.mode == "atlas_diff":
                if spec.atlas_record is None:
                    raise ValueError("atlas_diff requires spec.atlas_record")
                ref = _pooled(spec.atlas_record)
                img = _pooled(recs[0])
                if img.shape != ref.shape:
                    raise ValueError(
                        f"dimension mismatch: image {img.shape} vs atlas {ref.shape}"
                    )
                vec = img - ref
            else:  # pair_concat, multi_concat
                vec = np.concatenate([_pooled(r) for r in recs])
        if expected_dim is None:
            expected_dim = vec.size
        elif vec.size != expected_dim:
            raise ValueError(
                f"dimension mismatch for ({pid}, {side}): {vec.size} vs {expected_dim}"
            )
        out.append(AssembledExample((pid, side, spec.months), vec, spec.mode))
    return out


def _assemble_reg_pair(spec: AssembleSpec, pid: str, side: str):
    if spec.stack is None or spec.volume_lookup is None:
        raise ValueError("reg_pair requires spec.stack and spec.volume_lookup")
    vols = []
    for m in spec.months:
        v = spec.volume_lookup(pid, side, m)
        if v is None:
            return None
        vols.append(v)
    if len(vols) == 1:
        if spec.atlas_volume is None:
            raise ValueError("reg_pair with one month requires spec.atlas_volume")
        moving, fixed = vols[0], spec.atlas_volume
    else:
        moving, fixed = vols
    select = spec.leaf_select or tuple(range(1, spec.stack.leaf_count + 1))
    taps = extract_reg_features(spec.stack, moving, fixed, leaf_select=select)
    return np.concatenate([e.vector for e in taps]) if len(taps) else np.zeros(0)
