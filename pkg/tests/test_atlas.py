import numpy as np
import pytest

from iconprobe import atlas as atl
from iconprobe import geometry as g
from iconprobe import icon
from iconprobe.clinical import ClinicalRecord


def translation_backend(extent):
    spec = icon.FeatureSpec(histogram=False)
    tm = icon.AffineGenerator.translation_matcher(extent, spec)
    return icon.build_affine_stack([tm] + [icon.AffineGenerator.zeros(spec)] * 4)


def blob_volume(center, shape=(16, 16, 16), radius=3.0):
    n = np.asarray(shape, float)
    origin = tuple(-(n - 1) / 2.0)
    idx = np.indices(shape).reshape(3, -1).T + np.asarray(origin)
    d = np.linalg.norm((idx - np.asarray(center)) / radius, axis=1)
    data = 1.0 / (1.0 + np.exp((d - 1.0) * 6.0))
    return g.Volume(data.reshape(shape), (1.0, 1.0, 1.0), origin)


def centroid_mm(vol):
    pts = vol.grid.points()
    w = vol.data.reshape(-1)
    return (w @ pts) / w.sum()


class TestSelectHealthy:
    def _rec(self, pid, month=0, klg=0, womac=0, side="right"):
        return ClinicalRecord(pid, side, month, klg, womac, 4.5)

    def test_selection_rule(self):
        records = [
            self._rec("P1", klg=0, womac=0),
            self._rec("P2", klg=0, womac=1),
            self._rec("P3", klg=1, womac=0),
        ]
        assert atl.select_healthy(records) == ["P1"]

    def test_only_month_zero_considered(self):
        records = [self._rec("P1", klg=0, womac=0), self._rec("P1", month=12, klg=3, womac=9)]
        assert atl.select_healthy(records) == ["P1"]

    def test_both_sides_must_be_healthy(self):
        records = [
            self._rec("P1", side="right", klg=0, womac=0),
            self._rec("P1", side="left", klg=2, womac=0),
        ]
        assert atl.select_healthy(records) == []

    def test_cap(self):
        records = [self._rec(f"P{i:03d}") for i in range(300)]
        assert len(atl.select_healthy(records, max_subjects=200)) == 200
        assert len(atl.select_healthy(records)) == 200


class TestBuildAtlas:
    def test_empty_population(self):
        backend = translation_backend((16.0, 16.0, 16.0))
        with pytest.raises(ValueError):
            atl.build_atlas([], backend)

    def test_identical_population_fixed_point(self):
        vol = blob_volume((1.0, -2.0, 0.5))
        backend = translation_backend(vol.grid.extent_mm)
        state = atl.build_atlas([vol, vol], backend, atl.AtlasConfig(iters=3))
        assert np.array_equal(state.template.data, vol.data)
        assert state.mean_displacement_norm == 0.0
        assert state.iteration == 1  # converged immediately

    def test_further_iterations_keep_fixed_point(self):
        vol = blob_volume((0.5, 0.5, -1.0))
        backend = translation_backend(vol.grid.extent_mm)
        s1 = atl.build_atlas([vol, vol], backend, atl.AtlasConfig(iters=1, stop_voxel=0.0))
        s2 = atl.build_atlas([s1.template, s1.template], backend, atl.AtlasConfig(iters=1, stop_voxel=0.0))
        assert np.array_equal(s1.template.data, s2.template.data)

    def test_two_blob_symmetric_cohort_centers(self):
        d = 3.0
        a = blob_volume((-d, 0.0, 0.0))
        b = blob_volume((+d, 0.0, 0.0))
        backend = translation_backend(a.grid.extent_mm)
        state = atl.build_atlas([a, b], backend, atl.AtlasConfig(iters=5))
        c = centroid_mm(state.template)
        assert np.max(np.abs(c)) < 0.5  # within half a voxel of the midpoint

    def test_drift_history_non_increasing_after_second_iteration(self):
        rng = np.random.default_rng(4)
        vols = [blob_volume(rng.uniform(-3, 3, 3)) for _ in range(6)]
        backend = translation_backend(vols[0].grid.extent_mm)
        state = atl.build_atlas(vols, backend, atl.AtlasConfig(iters=6, stop_voxel=0.0))
        hist = state.history
        assert len(hist) == 6
        assert all(b <= a + 1e-9 for a, b in zip(hist[1:], hist[2:]))

    def test_translation_equivariance(self):
        rng = np.random.default_rng(9)
        centers = [rng.uniform(-2, 2, 3) for _ in range(4)]
        vols = [blob_volume(c) for c in centers]
        backend = translation_backend(vols[0].grid.extent_mm)
        shift = np.array([1.0, -1.0, 0.5])
        shifted = [blob_volume(c + shift) for c in centers]
        s0 = atl.build_atlas(vols, backend, atl.AtlasConfig(iters=4))
        s1 = atl.build_atlas(shifted, backend, atl.AtlasConfig(iters=4))
        c0 = centroid_mm(s0.template)
        c1 = centroid_mm(s1.template)
        assert np.max(np.abs((c1 - c0) - shift)) < 0.5

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        vols = [blob_volume(rng.uniform(-2, 2, 3)) for _ in range(3)]
        backend = translation_backend(vols[0].grid.extent_mm)
        s1 = atl.build_atlas(vols, backend, atl.AtlasConfig(iters=3))
        s2 = atl.build_atlas(vols, backend, atl.AtlasConfig(iters=3))
        assert np.array_equal(s1.template.data, s2.template.data)
        assert s1.history == s2.history

    def test_mismatched_grid_rejected(self):
        a = blob_volume((0, 0, 0))
        b = g.Volume(np.zeros((16, 16, 16)))  # different origin
        backend = translation_backend(a.grid.extent_mm)
        with pytest.raises(ValueError, match="shared grid"):
            atl.build_atlas([a, b], backend)

    def test_registration_failure_names_subject(self):
        a = blob_volume((0, 0, 0))

        class Exploding(icon.RegPredictor):
            kind = "imported"
            leaf_count = 1

            def _predict(self, moving, fixed, ctx, slot):
                raise RuntimeError("boom")

        bad = icon.RegStack(Exploding())
        with pytest.raises(RuntimeError, match="subject 0"):
            atl.build_atlas([a], bad, atl.AtlasConfig(iters=1))


class TestSaveAtlas:
    def test_sidecar_metadata(self, tmp_path):
        vol = blob_volume((0, 0, 0))
        backend = translation_backend(vol.grid.extent_mm)
        state = atl.build_atlas([vol, vol], backend, atl.AtlasConfig(iters=2))
        atl.save_atlas(state, tmp_path / "atlas.ipvol", subject_ids=["P1", "P2"])
        back = g.read_volume(tmp_path / "atlas.ipvol")
        assert back.shape == vol.shape
        import json

        doc = json.loads((tmp_path / "atlas.ipvol.json").read_text())
        assert doc["subject_ids"] == ["P1", "P2"]
        assert doc["iterations"] == state.iteration
