"""Clinical records, label derivation, pair enumeration, and patient splits.

Grades and scores follow the dataset's conventions: KLG is ordinal 0-4
(osteoarthritis definitive at >= 2, so grades 0 and 1 are merged for
classification), WOMAC pain is 0-20 binarized at 5, and JSW progression
means losing at least 0.5 mm of joint space over at least 12 months.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ClinicalRecord",
    "LabeledExample",
    "InvalidPairError",
    "klg_class",
    "pain_label",
    "prog_klg",
    "prog_jsw",
    "enumerate_pairs",
    "build_future_dataset",
    "split_patients",
    "read_clinical_csv",
    "write_examples_jsonl",
    "read_examples_jsonl",
]

SIDES = ("left", "right")
TASKS = ("klg4", "pain2", "prog_klg", "prog_jsw", "future_klg", "future_pain")

JSW_PROGRESSION_MM = 0.5
JSW_MIN_INTERVAL_MONTHS = 12
PAIN_THRESHOLD = 5


class InvalidPairError(ValueError):
    """Raised for record pairs that no progression rule applies to."""


@dataclass(frozen=True)
class ClinicalRecord:
    patient_id: str
    side: str
    timepoint_months: int
    klg: int
    womac: int
    jsw_mm: float

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        if self.timepoint_months < 0:
            raise ValueError(f"timepoint_months must be >= 0, got {self.timepoint_months}")
        if not 0 <= self.klg <= 4:
            raise ValueError(f"klg must be in [0, 4], got {self.klg}")
        if not 0 <= self.womac <= 20:
            raise ValueError(f"womac must be in [0, 20], got {self.womac}")
        if not (math.isfinite(self.jsw_mm) and self.jsw_mm >= 0):
            raise ValueError(f"jsw_mm must be finite and >= 0, got {self.jsw_mm}")

    @property
    def key(self):
        return (self.patient_id, self.side)


@dataclass(frozen=True)
class LabeledExample:
    key: tuple  # (patient_id, side, timepoints tuple)
    task: str
    label: int
    split: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        arity = {"klg4": 4, "future_klg": 4}.get(self.task, 2)
        if not 0 <= self.label < arity:
            raise ValueError(f"label {self.label} out of range for task {self.task}")


def klg_class(klg: int) -> int:
    """KLG 0-4 to 4 classes: grades 0 and 1 merge (OA definitive at >= 2)."""
    if not 0 <= klg <= 4:
        raise ValueError(f"klg must be in [0, 4], got {klg}")
    return max(0, klg - 1)


def pain_label(womac: int) -> int:
    """WOMAC below 5 is 'no pain' (0), 5 or more is 'pain' (1)."""
    if not 0 <= womac <= 20:
        raise ValueError(f"womac must be in [0, 20], got {womac}")
    return int(womac >= PAIN_THRESHOLD)


def _check_pair(r1: ClinicalRecord, r2: ClinicalRecord):
    if r1.key != r2.key:
        raise ValueError(f"records belong to different knees: {r1.key} vs {r2.key}")
    if r2.timepoint_months <= r1.timepoint_months:
        raise ValueError(
            f"timepoints must increase, got {r1.timepoint_months} -> {r2.timepoint_months}"
        )


def prog_klg(r1: ClinicalRecord, r2: ClinicalRecord) -> int:
    """1 if the KL grade increased between the two timepoints, else 0."""
    _check_pair(r1, r2)
    return int(r2.klg > r1.klg)


def prog_jsw(r1: ClinicalRecord, r2: ClinicalRecord) -> int:
    """1 if joint space narrowed by >= 0.5 mm over an interval >= 12 months.

    Pairs closer than 12 months are not labelable and raise InvalidPairError.
    """
    _check_pair(r1, r2)
    dt = r2.timepoint_months - r1.timepoint_months
    if dt < JSW_MIN_INTERVAL_MONTHS:
        raise InvalidPairError(
            f"jsw progression needs >= {JSW_MIN_INTERVAL_MONTHS} months, got {dt}"
        )
    return int(r1.jsw_mm - r2.jsw_mm >= JSW_PROGRESSION_MM)


def enumerate_pairs(records, task: str):
    """All within-knee ordered timepoint pairs (t1 < t2).

    For prog_jsw only pairs at least 12 months apart are returned.
    """
    by_key = {}
    for r in records:
        by_key.setdefault(r.key, []).append(r)
    pairs = []
    for key in sorted(by_key):
        recs = sorted(by_key[key], key=lambda r: r.timepoint_months)
        for i in range(len(recs)):
            for j in range(i + 1, len(recs)):
                if task == "prog_jsw":
                    dt = recs[j].timepoint_months - recs[i].timepoint_months
                    if dt < JSW_MIN_INTERVAL_MONTHS:
                        continue
                pairs.append((recs[i], recs[j]))
    return pairs


@dataclass
class FutureDataset:
    examples: list
    dropped_keys: int


def build_future_dataset(records, input_months, target_month: int = 96) -> FutureDataset:
    """Per-knee examples that predict month-``target_month`` state from the
    feature timepoints in ``input_months``.

    Each complete knee yields a future_klg and a future_pain example; knees
    missing the target month or any input month are dropped and counted.
    """
    input_months = tuple(sorted(set(int(m) for m in input_months)))
    if not input_months:
        raise ValueError("input_months must be non-empty")
    by_key = {}
    for r in records:
        by_key.setdefault(r.key, {})[r.timepoint_months] = r
    examples = []
    dropped = 0
    for key in sorted(by_key):
        months = by_key[key]
        if target_month not in months or any(m not in months for m in input_months):
            dropped += 1
            continue
        target = months[target_month]
        ex_key = (key[0], key[1], input_months)
        examples.append(LabeledExample(ex_key, "future_klg", klg_class(target.klg)))
        examples.append(LabeledExample(ex_key, "future_pain", pain_label(target.womac)))
    return FutureDataset(examples, dropped)


def split_patients(patient_ids, seed: int = 0):
    """Patient-level train/val/test split: 50% / 12.5% / remainder.

    Train and val sizes are floors of their fractions; test soaks the
    leftover, matching a 2244-patient cohort splitting to 1122/280/842.
    Deterministic per seed; all sides and timepoints of a patient inherit
    its assignment.
    """
    ids = sorted(set(patient_ids))
    if not ids:
        raise ValueError("no patient ids to split")
    rng = np.random.default_rng(seed)
    rng_order = list(ids)
    rng.shuffle(rng_order)
    n = len(ids)
    n_train = int(n * 0.5)
    n_val = int(n * 0.125)
    assignment = {}
    for i, pid in enumerate(rng_order):
        if i < n_train:
            assignment[pid] = "train"
        elif i < n_train + n_val:
            assignment[pid] = "val"
        else:
            assignment[pid] = "test"
    return assignment


REQUIRED_COLUMNS = ("patient_id", "side", "month", "klg", "womac", "jsw")


def read_clinical_csv(path):
    """Strictly validated clinical table: one row per (patient, side, month)."""
    path = Path(path)
    records = []
    seen = set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file, header required")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = ClinicalRecord(
                    patient_id=row["patient_id"].strip(),
                    side=row["side"].strip(),
                    timepoint_months=int(row["month"]),
                    klg=int(row["klg"]),
                    womac=int(row["womac"]),
                    jsw_mm=float(row["jsw"]),
                )
            except (ValueError, KeyError) as e:
                raise ValueError(f"{path}:{lineno}: bad record: {e}") from e
            dup_key = (rec.patient_id, rec.side, rec.timepoint_months)
            if dup_key in seen:
                raise ValueError(f"{path}:{lineno}: duplicate record for {dup_key}")
            seen.add(dup_key)
            records.append(rec)
    return records


def write_examples_jsonl(examples, path) -> None:
    with Path(path).open("w") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {
                        "patient_id": ex.key[0],
                        "side": ex.key[1],
                        "timepoints": list(ex.key[2]) if isinstance(ex.key[2], tuple) else ex.key[2],
                        "task": ex.task,
                        "label": ex.label,
                        "split": ex.split,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_examples_jsonl(path):
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        tp = d["timepoints"]
        key = (d["patient_id"], d["side"], tuple(tp) if isinstance(tp, list) else tp)
        out.append(LabeledExample(key, d["task"], d["label"], d.get("split")))
    return out
