import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iconprobe import clinical as cl


def rec(pid="P1", side="right", month=0, klg=0, womac=0, jsw=4.0):
    return cl.ClinicalRecord(pid, side, month, klg, womac, jsw)


class TestRecordValidation:
    def test_valid(self):
        r = rec()
        assert r.key == ("P1", "right")

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"klg": 5},
            {"klg": -1},
            {"womac": 21},
            {"womac": -2},
            {"jsw": -0.1},
            {"jsw": float("nan")},
            {"side": "up"},
            {"month": -12},
        ],
    )
    def test_invalid(self, kwargs):
        base = dict(pid="P1", side="right", month=0, klg=0, womac=0, jsw=4.0)
        base.update(kwargs)
        with pytest.raises(ValueError):
            rec(**base)


class TestKlgClass:
    def test_merge_rule(self):
        assert cl.klg_class(0) == 0
        assert cl.klg_class(1) == 0

    def test_definitive_oa_threshold(self):
        assert cl.klg_class(2) == 1

    def test_top(self):
        assert cl.klg_class(3) == 2
        assert cl.klg_class(4) == 3

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cl.klg_class(5)

    @given(st.integers(0, 4), st.integers(0, 4))
    def test_monotone(self, a, b):
        if a <= b:
            assert cl.klg_class(a) <= cl.klg_class(b)


class TestPainLabel:
    def test_boundaries(self):
        assert cl.pain_label(4) == 0
        assert cl.pain_label(5) == 1
        assert cl.pain_label(0) == 0
        assert cl.pain_label(20) == 1

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cl.pain_label(21)


class TestProgKlg:
    def test_stable(self):
        assert cl.prog_klg(rec(klg=1), rec(month=12, klg=1)) == 0

    def test_progressed(self):
        assert cl.prog_klg(rec(klg=1), rec(month=12, klg=2)) == 1

    def test_regression_counts_as_stable(self):
        assert cl.prog_klg(rec(klg=2), rec(month=12, klg=1)) == 0

    def test_mismatched_key(self):
        with pytest.raises(ValueError):
            cl.prog_klg(rec(pid="P1"), rec(pid="P2", month=12))

    def test_non_increasing_timepoints(self):
        with pytest.raises(ValueError):
            cl.prog_klg(rec(month=12), rec(month=12))


class TestProgJsw:
    def test_boundary_pair_progressed(self):
        assert cl.prog_jsw(rec(jsw=4.0), rec(month=12, jsw=3.5)) == 1

    def test_below_threshold_stable(self):
        assert cl.prog_jsw(rec(jsw=4.0), rec(month=24, jsw=3.6)) == 0

    def test_short_interval_invalid(self):
        with pytest.raises(cl.InvalidPairError):
            cl.prog_jsw(rec(jsw=4.0), rec(month=6, jsw=3.0))

    def test_widening_is_stable(self):
        assert cl.prog_jsw(rec(jsw=3.5), rec(month=12, jsw=4.2)) == 0


class TestEnumeratePairs:
    def _records(self, months, pid="P1"):
        return [rec(pid=pid, month=m) for m in months]

    def test_three_timepoints(self):
        pairs = cl.enumerate_pairs(self._records([0, 12, 24]), "prog_klg")
        assert len(pairs) == 3
        assert all(p1.timepoint_months < p2.timepoint_months for p1, p2 in pairs)

    def test_jsw_filters_short_intervals(self):
        assert cl.enumerate_pairs(self._records([0, 6]), "prog_jsw") == []

    def test_five_timepoints(self):
        pairs = cl.enumerate_pairs(self._records([0, 12, 24, 36, 48]), "prog_klg")
        assert len(pairs) == 10

    def test_closed_form_count(self, rng):
        for n in (2, 4, 6, 7):
            months = [12 * i for i in range(n)]
            pairs = cl.enumerate_pairs(self._records(months), "prog_klg")
            assert len(pairs) == n * (n - 1) // 2

    def test_multiple_knees_kept_separate(self):
        records = self._records([0, 12]) + self._records([0, 12], pid="P2")
        pairs = cl.enumerate_pairs(records, "prog_klg")
        assert len(pairs) == 2
        assert all(p1.key == p2.key for p1, p2 in pairs)


class TestFutureDataset:
    def _records(self, pid, months, klg=2, womac=6):
        return [rec(pid=pid, month=m, klg=klg, womac=womac) for m in months]

    def test_horizon(self):
        records = self._records("P1", [72, 96])
        ds = cl.build_future_dataset(records, [72], target_month=96)
        assert ds.dropped_keys == 0
        tasks = {e.task for e in ds.examples}
        assert tasks == {"future_klg", "future_pain"}
        ex = ds.examples[0]
        assert ex.key == ("P1", "right", (72,))

    def test_missing_input_month_dropped_and_counted(self):
        records = self._records("P1", [96]) + self._records("P2", [72, 96])
        ds = cl.build_future_dataset(records, [72], target_month=96)
        assert ds.dropped_keys == 1
        assert {e.key[0] for e in ds.examples} == {"P2"}

    def test_missing_target_dropped(self):
        ds = cl.build_future_dataset(self._records("P1", [72]), [72], target_month=96)
        assert ds.dropped_keys == 1 and ds.examples == []

    def test_labels_derive_from_target_record(self):
        records = [rec(pid="P1", month=72, klg=1, womac=2), rec(pid="P1", month=96, klg=3, womac=7)]
        ds = cl.build_future_dataset(records, [72], target_month=96)
        by_task = {e.task: e.label for e in ds.examples}
        assert by_task["future_klg"] == cl.klg_class(3) == 2
        assert by_task["future_pain"] == 1

    def test_empty_input_months(self):
        with pytest.raises(ValueError):
            cl.build_future_dataset([], [], target_month=96)


class TestSplitPatients:
    def test_eight_patients(self):
        split = cl.split_patients([f"P{i}" for i in range(8)], seed=0)
        counts = {s: list(split.values()).count(s) for s in ("train", "val", "test")}
        assert counts == {"train": 4, "val": 1, "test": 3}

    def test_cohort_2244(self):
        split = cl.split_patients([f"P{i:05d}" for i in range(2244)], seed=0)
        counts = {s: list(split.values()).count(s) for s in ("train", "val", "test")}
        assert counts == {"train": 1122, "val": 280, "test": 842}

    def test_deterministic(self):
        ids = [f"P{i}" for i in range(100)]
        assert cl.split_patients(ids, seed=3) == cl.split_patients(ids, seed=3)
        assert cl.split_patients(ids, seed=3) != cl.split_patients(ids, seed=4)

    def test_partition_exact(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 300))
            ids = [f"P{i}" for i in range(n)]
            split = cl.split_patients(ids, seed=int(rng.integers(0, 1000)))
            assert set(split) == set(ids)
            n_train = sum(1 for v in split.values() if v == "train")
            n_val = sum(1 for v in split.values() if v == "val")
            n_test = sum(1 for v in split.values() if v == "test")
            assert n_train + n_val + n_test == n
            assert n_train == int(n * 0.5)
            assert n_val == int(n * 0.125)

    def test_input_order_irrelevant(self):
        ids = [f"P{i}" for i in range(50)]
        shuffled = list(reversed(ids))
        assert cl.split_patients(ids, seed=1) == cl.split_patients(shuffled, seed=1)


class TestClinicalCsv:
    def _write(self, tmp_path, text):
        p = tmp_path / "clin.csv"
        p.write_text(text)
        return p

    def test_valid_rows(self, tmp_path):
        p = self._write(
            tmp_path,
            "patient_id,side,month,klg,womac,jsw\n"
            "P1,right,0,0,0,4.5\n"
            "P1,right,12,1,3,4.2\n"
            "P2,left,0,2,8,3.1\n",
        )
        records = cl.read_clinical_csv(p)
        assert len(records) == 3
        assert records[2].jsw_mm == pytest.approx(3.1)

    def test_range_error_names_line(self, tmp_path):
        p = self._write(
            tmp_path,
            "patient_id,side,month,klg,womac,jsw\nP1,right,0,0,21,4.0\n",
        )
        with pytest.raises(ValueError, match=":2:"):
            cl.read_clinical_csv(p)

    def test_duplicate_key_rejected(self, tmp_path):
        p = self._write(
            tmp_path,
            "patient_id,side,month,klg,womac,jsw\n"
            "P1,right,0,0,0,4.0\n"
            "P1,right,0,1,2,3.9\n",
        )
        with pytest.raises(ValueError, match="duplicate"):
            cl.read_clinical_csv(p)

    def test_missing_column(self, tmp_path):
        p = self._write(tmp_path, "patient_id,side,month,klg,womac\nP1,right,0,0,0\n")
        with pytest.raises(ValueError, match="missing columns"):
            cl.read_clinical_csv(p)


class TestExamplesJsonl:
    def test_roundtrip(self, tmp_path):
        examples = [
            cl.LabeledExample(("P1", "right", (0, 12)), "prog_jsw", 1, "train"),
            cl.LabeledExample(("P2", "left", (24,)), "klg4", 3, "test"),
        ]
        path = tmp_path / "ex.jsonl"
        cl.write_examples_jsonl(examples, path)
        back = cl.read_examples_jsonl(path)
        assert back == examples
