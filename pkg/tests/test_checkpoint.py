import struct

import numpy as np
import pytest

from phd_transformer.attnmask import MaskSpec, Variant
from phd_transformer.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

from conftest import tiny_config
from phd_transformer.model import init_weights


@pytest.fixture
def saved(tmp_path):
    w = init_weights(tiny_config(MaskSpec(Variant.PHD_CSWA, 3, 16, 32), seed=7))
    path = tmp_path / "w.phdt"
    save_checkpoint(path, w, {"steps": 12})
    return w, path


class TestCheckpoint:
    def test_round_trip(self, saved):
        w, path = saved
        loaded, extra = load_checkpoint(path)
        assert loaded.config == w.config
        assert extra == {"steps": 12}
        for name in w.params:
            assert loaded[name].data.dtype == w[name].data.dtype
            np.testing.assert_array_equal(loaded[name].data, w[name].data)

    def test_f32_round_trip(self, tmp_path):
        w = init_weights(tiny_config(dtype="f32"))
        save_checkpoint(tmp_path / "w.phdt", w)
        loaded, _ = load_checkpoint(tmp_path / "w.phdt")
        assert loaded["embed"].data.dtype == np.float32
        np.testing.assert_array_equal(loaded["embed"].data, w["embed"].data)

    def test_header_layout(self, saved):
        _, path = saved
        raw = path.read_bytes()
        assert raw[:4] == b"PHDT"
        assert struct.unpack("<I", raw[4:8])[0] == 1
        n = struct.unpack("<I", raw[8:12])[0]
        assert b'"C": 32' in raw[12:12 + n]

    def test_bad_magic(self, saved):
        _, path = saved
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch(self, saved):
        _, path = saved
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, saved):
        _, path = saved
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)
