"""Checkpoint binary format: bit-exact round-trips and validation."""

import struct

import numpy as np
import pytest

from dialogrnn.checkpoint import FORMAT_VERSION, load_model, save_model
from dialogrnn.model import ModelConfig, init_parameters


@pytest.mark.parametrize("arch", ["flat", "hierarchical"])
def test_roundtrip_bit_exact(tmp_path, arch):
    params = init_parameters(ModelConfig(arch, 11, 3, 4, 5), seed=31)
    path = tmp_path / "model.ckpt"
    save_model(path, params)
    loaded = load_model(path)
    assert loaded.config == params.config
    for (n1, t1), (n2, t2) in zip(params.named_tensors(), loaded.named_tensors()):
        assert n1 == n2
        assert t1.array.dtype == t2.array.dtype == np.float64
        assert np.array_equal(t1.array, t2.array)
        # bit-exact, not merely value-equal
        assert t1.array.tobytes() == t2.array.tobytes()


def test_save_is_deterministic(tmp_path):
    params = init_parameters(ModelConfig("flat", 9, 2, 3, 2), seed=32)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_model(p1, params)
    save_model(p2, params)
    assert p1.read_bytes() == p2.read_bytes()


def test_header_contents(tmp_path):
    params = init_parameters(ModelConfig("hierarchical", 13, 4, 5, 6), seed=33)
    path = tmp_path / "model.ckpt"
    save_model(path, params)
    raw = path.read_bytes()
    version, tag_len = struct.unpack_from("<II", raw, 0)
    assert version == FORMAT_VERSION
    tag = raw[8 : 8 + tag_len].decode("utf-8")
    assert tag == "hierarchical"
    vocab, emb, hidden, attn = struct.unpack_from("<IIII", raw, 8 + tag_len)
    assert (vocab, emb, hidden, attn) == (13, 4, 5, 6)


def test_loaded_arrays_are_writable(tmp_path):
    params = init_parameters(ModelConfig("flat", 9, 2, 3, 2), seed=34)
    path = tmp_path / "model.ckpt"
    save_model(path, params)
    loaded = load_model(path)
    loaded.W_out.array += 1.0  # training mutates in place


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(struct.pack("<I", 999) + b"rest")
    with pytest.raises(ValueError, match="version"):
        load_model(path)


def test_truncated_file_rejected(tmp_path):
    params = init_parameters(ModelConfig("flat", 9, 2, 3, 2), seed=35)
    path = tmp_path / "model.ckpt"
    save_model(path, params)
    clipped = tmp_path / "clipped.ckpt"
    clipped.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ValueError, match="truncated"):
        load_model(clipped)
