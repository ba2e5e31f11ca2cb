import json

import numpy as np
import pytest

from iconprobe import clinical as cl
from iconprobe import geometry as g
from iconprobe import synth


class TestLabelMaps:
    def test_klg_thresholds(self):
        assert synth.klg_from_jsw(4.5) == 0
        assert synth.klg_from_jsw(4.2) == 0
        assert synth.klg_from_jsw(4.0) == 1
        assert synth.klg_from_jsw(3.2) == 2
        assert synth.klg_from_jsw(2.5) == 3
        assert synth.klg_from_jsw(2.0) == 4

    def test_womac_zero_when_healthy(self):
        assert synth.womac_from_jsw(4.5) == 0
        assert synth.womac_from_jsw(4.2) == 0

    def test_womac_grows_with_narrowing(self):
        vals = [synth.womac_from_jsw(j) for j in (4.0, 3.5, 3.0, 2.5)]
        assert vals == sorted(vals)
        assert all(0 <= v <= 20 for v in vals)


class TestKneePhantom:
    def test_gap_visible_in_profile(self):
        grid = g.Grid((36, 36, 36), (1.0,) * 3, (-17.5,) * 3)
        wide = synth.make_knee_phantom(5.0, grid)
        narrow = synth.make_knee_phantom(2.0, grid)
        # intensity at the joint line rises when the gap closes
        mid = wide.shape[1] // 2
        assert narrow.data[:, mid - 1 : mid + 2, :].mean() > wide.data[:, mid - 1 : mid + 2, :].mean()

    def test_pose_moves_content(self):
        grid = g.Grid((24, 24, 24), (1.0,) * 3, (-11.5,) * 3)
        base = synth.make_knee_phantom(4.0, grid)
        pose = np.eye(4)
        pose[:3, 3] = (4.0, 0.0, 0.0)
        moved = synth.make_knee_phantom(4.0, grid, pose=pose)
        assert not np.allclose(moved.data, base.data)
        # rendering with a pose equals warping the canonical image, up to interpolation
        warped = g.warp(base, g.AffineTransform(pose))
        inner = (slice(5, -5),) * 3
        assert np.abs(warped.data[inner] - moved.data[inner]).max() < 0.1


class TestGenerateCohort:
    def test_counts_and_determinism(self, tmp_path):
        cfg = synth.SynthConfig(patients=5, months=(0, 12), shape=(16, 16, 16), seed=3)
        c1 = synth.generate_cohort(cfg, out_dir=tmp_path / "a")
        c2 = synth.generate_cohort(cfg, out_dir=tmp_path / "b")
        assert len(c1.volumes) == 5 * 2
        assert len(c1.records) == 10
        for key in c1.volumes:
            assert np.array_equal(c1.volumes[key].data, c2.volumes[key].data)
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (
            tmp_path / "b" / "manifest.json"
        ).read_bytes()
        for f in sorted((tmp_path / "a").glob("*.ipvol")):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_single_scan_cohort(self):
        cfg = synth.SynthConfig(patients=1, months=(0,), shape=(16, 16, 16))
        c = synth.generate_cohort(cfg)
        assert len(c.volumes) == 1 and len(c.records) == 1

    def test_clinical_labels_match_manifest_ground_truth(self):
        cfg = synth.SynthConfig(patients=8, shape=(16, 16, 16), seed=5)
        c = synth.generate_cohort(cfg)
        scans = {(s["patient_id"], s["side"], s["month"]): s for s in c.manifest["scans"]}
        for r in c.records:
            s = scans[(r.patient_id, r.side, r.timepoint_months)]
            assert r.klg == synth.klg_from_jsw(s["jsw_mm"])
            assert r.klg == s["klg"] and r.womac == s["womac"]
            assert r.jsw_mm == pytest.approx(s["jsw_mm"], abs=1e-3)

    def test_progressors_cross_jsw_threshold(self):
        cfg = synth.SynthConfig(patients=30, seed=7, shape=(16, 16, 16))
        c = synth.generate_cohort(cfg)
        by_pid = {p["patient_id"]: p for p in c.manifest["patients"]}
        rec_by = {}
        for r in c.records:
            rec_by.setdefault((r.patient_id, r.side), {})[r.timepoint_months] = r
        n_prog_pairs = 0
        for (pid, side), months in rec_by.items():
            r0, r48 = months[0], months[48]
            label = cl.prog_jsw(r0, r48)
            decline = by_pid[pid]["rate_mm_per_month"] * 48
            if by_pid[pid]["progressor"] and decline >= 0.52:
                assert label == 1
                n_prog_pairs += 1
            if not by_pid[pid]["progressor"]:
                assert label == 0
        assert n_prog_pairs > 0

    def test_written_files_load(self, tmp_path):
        cfg = synth.SynthConfig(patients=2, months=(0,), shape=(16, 16, 16))
        synth.generate_cohort(cfg, out_dir=tmp_path)
        records = cl.read_clinical_csv(tmp_path / "clinical.csv")
        assert len(records) == 2
        vols = sorted(tmp_path.glob("*.ipvol"))
        assert len(vols) == 2
        vol = g.read_volume(vols[0])
        assert vol.shape == (16, 16, 16)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["patients"] == 2

    def test_healthy_pool_exists(self):
        cfg = synth.SynthConfig(patients=40, seed=12, shape=(16, 16, 16))
        c = synth.generate_cohort(cfg)
        from iconprobe.atlas import select_healthy

        assert len(select_healthy(c.records)) >= 5

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            synth.SynthConfig(patients=0)
        with pytest.raises(ValueError):
            synth.SynthConfig(progressor_fraction=1.5)


class TestRandomAffine:
    def test_within_bounds(self, rng):
        for _ in range(50):
            m = synth.random_affine_matrix(rng, max_rot_deg=15, max_scale=0.1, max_trans_mm=4.8)
            assert np.max(np.abs(m[:3, 3])) <= 4.8 + 1.5  # rotation shifts the offset a bit
            u, s, vt = np.linalg.svd(m[:3, :3])
            assert np.all(s > 0.8) and np.all(s < 1.25)
            assert np.linalg.det(m[:3, :3]) > 0
