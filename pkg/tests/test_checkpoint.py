import numpy as np
import pytest

from paramdefense.bench.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from paramdefense.errors import CheckpointError
from paramdefense.nn import Model, ParamPartition


@pytest.fixture
def model():
    return Model.init([3, 5, 2], activation="tanh", seed=4)


class TestCheckpoint:
    def test_round_trip_at_32_bit(self, tmp_path, model):
        part = ParamPartition.layers(model, [1])
        path = save_checkpoint(model, part, tmp_path / "m.ckpt")
        back, back_part = load_checkpoint(path)
        np.testing.assert_array_equal(back.params, model.params.astype(np.float32).astype(np.float64))
        assert back.layers == model.layers and back.head == model.head
        assert back_part == part

    def test_save_load_save_byte_identical(self, tmp_path, model):
        a = save_checkpoint(model, None, tmp_path / "a.ckpt").read_bytes()
        m2, p2 = load_checkpoint(tmp_path / "a.ckpt")
        assert encode_checkpoint(m2, p2) == a

    def test_header(self, model):
        blob = encode_checkpoint(model)
        assert blob[:4] == MAGIC
        assert blob[4:6] == b"\x01\x00"

    def test_corrupted_payload(self, tmp_path, model):
        path = save_checkpoint(model, None, tmp_path / "c.ckpt")
        blob = bytearray(path.read_bytes())
        blob[60] ^= 0x40
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum") as exc:
            load_checkpoint(path)
        assert "c.ckpt" in str(exc.value)

    def test_version_bump(self, model):
        blob = bytearray(encode_checkpoint(model))
        blob[4] = 2
        with pytest.raises(CheckpointError, match="version 2 is not supported .*version 1"):
            decode_checkpoint(bytes(blob))

    def test_bad_magic(self, model):
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXX" + encode_checkpoint(model)[4:])

    def test_truncated(self, model):
        with pytest.raises(CheckpointError):
            decode_checkpoint(encode_checkpoint(model)[:10])
