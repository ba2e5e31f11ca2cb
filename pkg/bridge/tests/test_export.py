import numpy as np
import pytest
import torch

from iconbridge import formats
from iconbridge.export import ExportSpec, TransformExportSpec, export_features, export_transform
from iconbridge.models import SegUNet, SegUNetConfig, ToyRegNet, save_checkpoint

from iconprobe import geometry as primary_geo
from iconprobe import icon as primary_icon
from iconprobe import pipeline as primary_pipe
from iconprobe import probe as primary_probe


@pytest.fixture
def toy_seg_checkpoint(tmp_path):
    """Small config with a known 8-channel bottleneck."""
    torch.manual_seed(0)
    cfg = SegUNetConfig(channels=(4, 4, 4, 4, 4, 8, 8, 8, 8), strides=(2, 1, 2, 1, 2, 1, 2, 1))
    model = SegUNet(cfg)
    model.eval()
    path = tmp_path / "toy_seg.pt"
    save_checkpoint(model, path, kind="seg-unet", config=cfg.echo())
    return path


@pytest.fixture
def reg_checkpoint(tmp_path):
    torch.manual_seed(1)
    model = ToyRegNet()
    path = tmp_path / "toy_reg.pt"
    save_checkpoint(model, path, kind="reg-toy", config={"width": 8})
    return path


@pytest.fixture
def noisy_reg_checkpoint(tmp_path):
    """Registration net with randomized heads: non-trivial fields."""
    torch.manual_seed(2)
    model = ToyRegNet()
    with torch.no_grad():
        model.disp_head.weight.normal_(0, 0.05)
        model.disp_head.bias.normal_(0, 0.2)
    path = tmp_path / "noisy_reg.pt"
    save_checkpoint(model, path, kind="reg-toy", config={"width": 8})
    return path


class TestExportFeatures:
    def _spec(self, paths, checkpoint, out_dir, layers=("bottleneck",)):
        inputs = [(str(p), pid, side, m) for (pid, side, m), p in sorted(paths.items())]
        return ExportSpec(
            model_name="toy-seg",
            checkpoint=str(checkpoint),
            layers=layers,
            inputs=inputs,
            preprocess_fingerprint="fp-demo",
            out_dir=str(out_dir),
        )

    def test_bottleneck_shape_and_consumer_validation(self, volume_dir, toy_seg_checkpoint, tmp_path):
        vdir, paths = volume_dir
        out = tmp_path / "features"
        written = export_features(self._spec(paths, toy_seg_checkpoint, out))
        assert len(written) == len(paths)
        rec = primary_pipe.read_feature(written[0])
        assert rec.shape == (8, 2, 2, 2)  # 32^3 input through 16x downsampling
        assert rec.extractor == "toy-seg"

    def test_reexport_byte_identical(self, volume_dir, toy_seg_checkpoint, tmp_path):
        _, paths = volume_dir
        out = tmp_path / "features"
        first = export_features(self._spec(paths, toy_seg_checkpoint, out))
        blobs = {p.name: p.read_bytes() for p in first}
        second = export_features(self._spec(paths, toy_seg_checkpoint, out))
        for p in second:
            assert p.read_bytes() == blobs[p.name]

    def test_bad_layer_names_available_taps(self, volume_dir, toy_seg_checkpoint, tmp_path):
        _, paths = volume_dir
        spec = self._spec(paths, toy_seg_checkpoint, tmp_path / "f", layers=("decoder9",))
        with pytest.raises(KeyError, match="bottleneck"):
            export_features(spec)
        assert not (tmp_path / "f").exists() or not list((tmp_path / "f").glob("*.ipfea"))

    def test_roundtrip_through_assemble_and_probe(self, volume_dir, toy_seg_checkpoint, tmp_path):
        _, paths = volume_dir
        out = tmp_path / "features"
        export_features(self._spec(paths, toy_seg_checkpoint, out))
        store = primary_pipe.FeatureStore(out)
        spec = primary_pipe.AssembleSpec(
            mode="single",
            extractor="toy-seg",
            layer="bottleneck",
            fingerprint="fp-demo",
            months=(0,),
        )
        examples = primary_pipe.assemble(store, spec)
        assert len(examples) == len(paths)
        dim = examples[0].vector.size
        assert dim == 8  # pooled bottleneck channels
        x = np.stack([e.vector for e in examples])
        y = np.arange(len(examples)) % 2
        probe, _log = primary_probe.train_probe(
            x, y, primary_probe.ProbeConfig(iterations=50, seed=0)
        )
        assert probe.input_dim == dim

    def test_multiple_layers_per_volume(self, volume_dir, toy_seg_checkpoint, tmp_path):
        _, paths = volume_dir
        one = {k: paths[k] for k in list(paths)[:1]}
        out = tmp_path / "multi"
        written = export_features(
            self._spec(one, toy_seg_checkpoint, out, layers=("encoder0", "encoder4", "bottleneck"))
        )
        assert len(written) == 3
        shapes = {primary_pipe.read_feature(p).layer: primary_pipe.read_feature(p).shape for p in written}
        assert shapes["encoder0"] == (4, 16, 16, 16)
        assert shapes["bottleneck"] == (8, 2, 2, 2)


class TestExportTransform:
    def test_identity_model_near_zero_field(self, volume_dir, reg_checkpoint, tmp_path):
        _, paths = volume_dir
        keys = sorted(paths)[:2]
        spec = TransformExportSpec(
            checkpoint=str(reg_checkpoint),
            pairs=[(str(paths[keys[0]]), str(paths[keys[1]]), "pair0")],
            out_dir=str(tmp_path / "tx"),
        )
        (dsp_path, aff_path), = export_transform(spec)
        field = primary_icon.read_displacement_file(dsp_path)
        assert np.max(np.abs(field.vectors)) == 0.0
        affine = primary_icon.read_affine_file(aff_path)
        np.testing.assert_array_equal(affine.matrix, np.eye(4))

    def test_wrong_magic_rejected_by_consumer(self, tmp_path):
        p = tmp_path / "bad.ipdsp"
        p.write_bytes(b"IPWRONG\n" + b"\x00" * 100)
        with pytest.raises(primary_geo.MagicError):
            primary_icon.read_displacement_file(p)

    def test_grid_mismatch_refused(self, volume_dir, reg_checkpoint, tmp_path):
        _, paths = volume_dir
        keys = sorted(paths)[:2]
        spec = TransformExportSpec(
            checkpoint=str(reg_checkpoint),
            pairs=[(str(paths[keys[0]]), str(paths[keys[1]]), "pair0")],
            out_dir=str(tmp_path / "tx"),
            expected_grid=((16, 16, 16), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)),
        )
        with pytest.raises(formats.FormatError, match="grid metadata mismatch"):
            export_transform(spec)

    def test_warp_roundtrip_matches_consumer(self, volume_dir, noisy_reg_checkpoint, tmp_path):
        _, paths = volume_dir
        keys = sorted(paths)[:2]
        moving_path, fixed_path = paths[keys[0]], paths[keys[1]]
        spec = TransformExportSpec(
            checkpoint=str(noisy_reg_checkpoint),
            pairs=[(str(moving_path), str(fixed_path), "pair0")],
            out_dir=str(tmp_path / "tx"),
        )
        (dsp_path, _aff), = export_transform(spec)
        # consumer side: dense transform drives its warp
        field = primary_icon.read_displacement_file(dsp_path)
        assert np.max(np.abs(field.vectors)) > 0.05  # genuinely non-trivial
        moving_primary = primary_geo.read_volume(moving_path)
        warped_primary = primary_geo.warp(moving_primary, field)
        # exporter side: its own independent trilinear warp of the same field
        moving_ours = formats.read_volume(moving_path)
        warped_ours = formats.warp_with_displacement(moving_ours, field.vectors)
        assert np.max(np.abs(warped_primary.data - warped_ours)) < 1e-3

    def test_dense_field_usable_in_consumer_preprocess(self, volume_dir, reg_checkpoint, tmp_path):
        _, paths = volume_dir
        keys = sorted(paths)[:2]
        spec = TransformExportSpec(
            checkpoint=str(reg_checkpoint),
            pairs=[(str(paths[keys[0]]), str(paths[keys[1]]), "pair0")],
            out_dir=str(tmp_path / "tx"),
        )
        (dsp_path, _), = export_transform(spec)
        field = primary_icon.read_displacement_file(dsp_path)
        vol = primary_geo.read_volume(paths[keys[0]])
        plan = primary_pipe.PreprocessPlan(nonparam_align=True)
        out = primary_pipe.preprocess(vol, vol, plan, backend=field)
        np.testing.assert_array_equal(out.data, vol.data)  # zero field: identity
