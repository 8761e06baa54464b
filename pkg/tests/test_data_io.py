"""File formats: bitwise UDCT round trips, corrupted-header offsets,
preview pixel values, config parsing errors with line numbers."""

import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from udcnet import data_io
from udcnet.degrade import DegradationConfig, HdrPair, Psf, scene_synthesize, simulate
from udcnet.errors import ConfigError, DataError, UdctFormatError
from udcnet.model import ModelConfig, init_params
from udcnet.objective import LossKind
from udcnet.tensor import Tensor


class TestUdctRoundTrip:
    def test_f64_bitwise(self, tmp_path, rng):
        t = Tensor(rng.normal(size=(2, 3, 4, 5)))
        p = tmp_path / "t.udct"
        data_io.write_udct(p, t)
        back = data_io.read_udct(p)
        assert back.shape == t.shape
        assert np.array_equal(back.data, t.data)

    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.sampled_from(["f32", "f64"]))
    @settings(max_examples=60, deadline=None)
    def test_random_shapes_bitwise(self, seed, ndim, dtype, tmp_path_factory):
        r = np.random.default_rng(seed)
        shape = tuple(int(r.integers(1, 6)) for _ in range(ndim))
        values = r.normal(size=shape)
        if dtype == "f32":
            values = values.astype(np.float32).astype(np.float64)
        p = tmp_path_factory.mktemp("udct") / "t.udct"
        data_io.write_udct(p, Tensor(values), dtype=dtype)
        back = data_io.read_udct(p)
        assert np.array_equal(back.data, values)
        # writing the read-back tensor reproduces the same bytes
        p2 = p.with_name("t2.udct")
        data_io.write_udct(p2, back, dtype=dtype)
        assert p.read_bytes() == p2.read_bytes()


def _valid_bytes(rng):
    t = Tensor(rng.normal(size=(2, 3)))
    return (data_io.UDCT_MAGIC + struct.pack("<BBBB", 1, 1, 2, 0)
            + struct.pack("<2Q", 2, 3) + t.data.tobytes()), t


class TestUdctErrors:
    def test_bad_magic_offset_0(self, tmp_path, rng):
        raw, _ = _valid_bytes(rng)
        p = tmp_path / "x.udct"
        p.write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(UdctFormatError) as e:
            data_io.read_udct(p)
        assert e.value.offset == 0

    def test_bad_version_offset_4(self, tmp_path, rng):
        raw, _ = _valid_bytes(rng)
        p = tmp_path / "x.udct"
        p.write_bytes(raw[:4] + bytes([9]) + raw[5:])
        with pytest.raises(UdctFormatError) as e:
            data_io.read_udct(p)
        assert e.value.offset == 4

    def test_bad_dtype_offset_5(self, tmp_path, rng):
        raw, _ = _valid_bytes(rng)
        p = tmp_path / "x.udct"
        p.write_bytes(raw[:5] + bytes([7]) + raw[6:])
        with pytest.raises(UdctFormatError, match="dtype") as e:
            data_io.read_udct(p)
        assert e.value.offset == 5

    def test_bad_ndim_offset_6(self, tmp_path, rng):
        raw, _ = _valid_bytes(rng)
        p = tmp_path / "x.udct"
        p.write_bytes(raw[:6] + bytes([5]) + raw[7:])
        with pytest.raises(UdctFormatError) as e:
            data_io.read_udct(p)
        assert e.value.offset == 6

    def test_bad_reserved_offset_7(self, tmp_path, rng):
        raw, _ = _valid_bytes(rng)
        p = tmp_path / "x.udct"
        p.write_bytes(raw[:7] + bytes([1]) + raw[8:])
        with pytest.raises(UdctFormatError) as e:
            data_io.read_udct(p)
        assert e.value.offset == 7

    def test_truncated_dims(self, tmp_path, rng):
        raw, _ = _valid_bytes(rng)
        p = tmp_path / "x.udct"
        p.write_bytes(raw[:12])  # cuts inside the dims block
        with pytest.raises(UdctFormatError) as e:
            data_io.read_udct(p)
        assert e.value.offset == 12

    def test_truncated_payload(self, tmp_path, rng):
        raw, _ = _valid_bytes(rng)
        p = tmp_path / "x.udct"
        p.write_bytes(raw[:-8])  # drop one f64
        with pytest.raises(UdctFormatError) as e:
            data_io.read_udct(p)
        assert e.value.offset == len(raw) - 8

    def test_trailing_junk(self, tmp_path, rng):
        raw, _ = _valid_bytes(rng)
        p = tmp_path / "x.udct"
        p.write_bytes(raw + b"JUNK")
        with pytest.raises(UdctFormatError) as e:
            data_io.read_udct(p)
        assert e.value.offset == len(raw)


class TestPreview:
    def test_pixel_values(self, tmp_path):
        img = np.zeros((1, 3, 2, 2))
        img[0, :, 0, 0] = 0.0
        img[0, :, 0, 1] = 1.0
        img[0, :, 1, 0] = 500.0
        img[0, :, 1, 1] = 0.25
        p = tmp_path / "p.png"
        data_io.export_preview(Tensor(img), p)
        pix = np.asarray(Image.open(p))
        assert pix.shape == (2, 2, 3)
        assert pix[0, 0, 0] == 0
        assert pix[0, 1, 0] == 204  # round(0.8*255)
        assert pix[1, 0, 0] == 255  # round(0.99950...*255)
        assert pix[1, 1, 0] == 128  # round(0.5*255)

    def test_monotone(self, tmp_path, rng):
        vals = np.sort(rng.uniform(0, 500, size=64))
        img = np.broadcast_to(vals.reshape(1, 1, 8, 8), (1, 3, 8, 8)).copy()
        p = tmp_path / "m.png"
        data_io.export_preview(Tensor(img), p)
        pix = np.asarray(Image.open(p))[:, :, 0].astype(int).ravel()
        assert (np.diff(pix) >= 0).all()

    def test_shape_validation(self, tmp_path, rng):
        with pytest.raises(DataError):
            data_io.export_preview(Tensor(rng.uniform(size=(1, 1, 4, 4))), tmp_path / "x.png")


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("")
        model_cfg, train_cfg, degrade_cfg = data_io.parse_config(p)
        assert model_cfg.channels == 32
        assert model_cfg.blocks == (2, 2, 2, 8, 2, 2, 2)
        assert train_cfg.lr_max == 2e-4
        assert train_cfg.loss is LossKind.MAPPING_L1
        assert degrade_cfg.saturation_level == 500.0

    def test_paper_default_blocks_accepted(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("model.blocks = 2,2,2,8,2,2,2\n")
        model_cfg, _, _ = data_io.parse_config(p)
        assert model_cfg.blocks == (2, 2, 2, 8, 2, 2, 2)

    def test_invariant_violation_with_line(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# comment\ntrain.lr_max = -1\n")
        with pytest.raises(ConfigError) as e:
            data_io.parse_config(p)
        assert e.value.line == 2

    def test_unknown_key_with_line(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("train.lr_max = 1e-4\nmodel.bogus = 1\n")
        with pytest.raises(ConfigError, match="unknown key") as e:
            data_io.parse_config(p)
        assert e.value.line == 2

    def test_type_error_with_line(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("model.channels = soup\n")
        with pytest.raises(ConfigError, match="bad value") as e:
            data_io.parse_config(p)
        assert e.value.line == 1

    def test_cross_key_invariant(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("train.lr_min = 1e-3\ntrain.lr_max = 1e-4\n")
        with pytest.raises(ConfigError, match="lr_min"):
            data_io.parse_config(p)

    def test_loss_and_flags(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("train.loss = plain_l1\nmodel.use_skip = false\n"
                     "train.restart_iters = 10,20\ntrain.total_iters = 50\n")
        model_cfg, train_cfg, _ = data_io.parse_config(p)
        assert train_cfg.loss is LossKind.PLAIN_L1
        assert model_cfg.use_skip is False
        assert train_cfg.restart_iters == (10, 20)


class TestDatasetLayout:
    def _dataset(self, root, n=2):
        k = np.zeros((3, 3))
        k[1, 1] = 1.0
        psf = Psf(k)
        pairs = []
        for i in range(n):
            scene = scene_synthesize(16, 16, 1, 500.0, i)
            pairs.append(simulate(scene, psf, DegradationConfig(), i))
        data_io.save_dataset(root, pairs, psf, {"degrade.saturation_level": 500.0})
        return pairs

    def test_round_trip(self, tmp_path):
        pairs = self._dataset(tmp_path / "d")
        back, psf, meta = data_io.load_dataset(tmp_path / "d")
        assert len(back) == 2
        assert meta["degrade.saturation_level"] == "500.0"
        for orig, loaded in zip(pairs, back):
            assert np.array_equal(orig.clean.data, loaded.clean.data)
            assert np.array_equal(orig.degraded.data, loaded.degraded.data)

    def test_missing_psf_rejected(self, tmp_path):
        self._dataset(tmp_path / "d")
        (tmp_path / "d" / "psf.udct").unlink()
        with pytest.raises(DataError, match="psf"):
            data_io.load_dataset(tmp_path / "d")

    def test_name_mismatch_rejected(self, tmp_path):
        self._dataset(tmp_path / "d")
        (tmp_path / "d" / "clean" / "0001.udct").unlink()
        with pytest.raises(DataError, match="differ"):
            data_io.load_dataset(tmp_path / "d")


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = ModelConfig(channels=4, blocks=(1, 1, 1, 1, 1, 1, 1), use_skip=False)
        params = init_params(cfg, seed=0)
        data_io.write_checkpoint(tmp_path / "ck", params, cfg, iteration=42, is_ema=True)
        back, cfg2, manifest = data_io.read_checkpoint(tmp_path / "ck")
        assert cfg2 == cfg
        assert manifest["state.iteration"] == "42"
        assert manifest["state.ema"] == "true"
        assert set(back.paths()) == set(params.paths())
        for path, t in params.items():
            assert np.array_equal(back[path].data, t.data)
            assert back[path].requires_grad

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "ck").mkdir()
        with pytest.raises(DataError, match="manifest"):
            data_io.read_checkpoint(tmp_path / "ck")
