import numpy as np
import pytest

from trajdiff.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from trajdiff.errors import DataError
from trajdiff.rng import stream
from trajdiff.schedule import linear_beta_schedule
from trajdiff.trajdata import GridSpec, NormStats
from trajdiff.unet import TrajUNet, TrajUNetConfig


@pytest.fixture
def saved(tmp_path):
    cfg = TrajUNetConfig(length=16, base_channels=4, channel_multipliers=(1, 2),
                         resnet_blocks_per_level=1, groups=2)
    model = TrajUNet(cfg, rng=stream(1))
    sched = linear_beta_schedule(20, 1e-4, 0.05)
    norm = NormStats(lng_min=0.0, lng_max=0.16, lat_min=0.0, lat_max=0.16)
    grid = norm.grid()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, sched, norm, grid, train_steps=7, seed=1)
    return path, model, sched, norm, grid


class TestRoundtrip:
    def test_parameters_bit_exact(self, saved):
        path, model, *_ = saved
        loaded, *_ = load_checkpoint(path)
        assert set(loaded.params) == set(model.params)
        for k, p in model.params.items():
            assert loaded.params[k].data.tobytes() == p.data.tobytes()
            assert loaded.params[k].requires_grad

    def test_save_load_save_byte_identical(self, saved, tmp_path):
        path, *_ = saved
        loaded, sched, norm, grid, header = load_checkpoint(path)
        path2 = tmp_path / "m2.ckpt"
        save_checkpoint(path2, loaded, sched, norm, grid,
                        train_steps=header["train_steps"], seed=header["seed"])
        assert path.read_bytes() == path2.read_bytes()

    def test_header_restores_companions(self, saved):
        path, model, sched, norm, grid = saved
        loaded, s2, n2, g2, header = load_checkpoint(path)
        assert loaded.config == model.config
        assert s2.T == sched.T
        np.testing.assert_array_equal(s2.beta, sched.beta)
        assert n2.to_dict() == norm.to_dict()
        assert g2 == grid
        assert header["train_steps"] == 7
        assert header["seed"] == 1


class TestRejection:
    def test_corrupt_magic(self, saved, tmp_path):
        path, *_ = saved
        blob = bytearray(path.read_bytes())
        blob[:5] = b"WRONG"
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(bad)

    def test_truncated_payload(self, saved, tmp_path):
        path, *_ = saved
        blob = path.read_bytes()
        bad = tmp_path / "trunc.ckpt"
        bad.write_bytes(blob[:-100])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(bad)

    def test_truncated_header(self, saved, tmp_path):
        path, *_ = saved
        blob = path.read_bytes()
        bad = tmp_path / "tr2.ckpt"
        bad.write_bytes(blob[:20])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(bad)

    def test_wrong_schema_version(self, saved, tmp_path):
        path, *_ = saved
        blob = path.read_bytes()
        head_len = int.from_bytes(blob[5:9], "little")
        head = blob[9:9 + head_len].replace(b'"schema_version": 1', b'"schema_version": 9')
        assert len(head) == head_len
        bad = tmp_path / "ver.ckpt"
        bad.write_bytes(MAGIC + len(head).to_bytes(4, "little") + head + blob[9 + head_len:])
        with pytest.raises(DataError, match="schema version"):
            load_checkpoint(bad)

    def test_not_a_file_with_magic(self, tmp_path):
        bad = tmp_path / "junk.ckpt"
        bad.write_bytes(b"xy")
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(bad)
