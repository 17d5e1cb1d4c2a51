import struct

import numpy as np
import pytest

from app.errors import ChecksumMismatch, IoError, VersionMismatch
from app.services import checkpoint, engine


@pytest.fixture
def fitted(tiny_engine_config, healthy_features):
    return engine.fit_initial(tiny_engine_config, healthy_features)


def test_save_load_save_is_byte_identical(fitted, tmp_path):
    first = checkpoint.save(fitted, tmp_path / "a.ckpt")
    second = checkpoint.save(checkpoint.load(first), tmp_path / "nested" / "b.ckpt")
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes()[:8] == checkpoint.MAGIC


def test_restored_state_matches(fitted):
    restored = checkpoint.from_bytes(checkpoint.to_bytes(fitted))
    assert restored.epoch == fitted.epoch
    assert restored.registry == fitted.registry
    assert restored.config == fitted.config
    assert np.array_equal(restored.dpmm.ids, fitted.dpmm.ids)
    assert restored.dpmm.elbo == fitted.dpmm.elbo
    for name in fitted.params.names():
        assert np.array_equal(restored.params[name], fitted.params[name])


def test_resume_continues_identically(fitted, healthy_features):
    X = engine.normalize(fitted, healthy_features)
    restored = checkpoint.from_bytes(checkpoint.to_bytes(fitted))
    continued = engine.train_epoch(fitted, X)
    resumed = engine.train_epoch(restored, X)
    assert checkpoint.to_bytes(resumed) == checkpoint.to_bytes(continued)


def test_checkpoint_before_first_epoch(tiny_engine_config, healthy_features):
    fresh = engine.create_checkpoint(tiny_engine_config, healthy_features)
    raw = checkpoint.to_bytes(fresh)
    restored = checkpoint.from_bytes(raw)
    assert restored.dpmm is None
    assert checkpoint.to_bytes(restored) == raw


class TestCorruption:
    @pytest.mark.parametrize("cut", [slice(None, -10), slice(None, 10)])
    def test_truncated(self, fitted, cut):
        raw = checkpoint.to_bytes(fitted)
        with pytest.raises(ChecksumMismatch):
            checkpoint.from_bytes(raw[cut])

    def test_flipped_payload_byte(self, fitted):
        raw = bytearray(checkpoint.to_bytes(fitted))
        raw[-20] ^= 0xFF
        with pytest.raises(ChecksumMismatch):
            checkpoint.from_bytes(bytes(raw))

    def test_bad_magic(self, fitted):
        raw = b"NOTACKPT" + checkpoint.to_bytes(fitted)[8:]
        with pytest.raises(IoError):
            checkpoint.from_bytes(raw)

    def test_version_checked_before_crc(self, fitted):
        raw = bytearray(checkpoint.to_bytes(fitted))
        raw[8:12] = struct.pack("<I", checkpoint.FORMAT_VERSION + 1)
        with pytest.raises(VersionMismatch):
            checkpoint.from_bytes(bytes(raw))

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            checkpoint.load(tmp_path / "absent.ckpt")
