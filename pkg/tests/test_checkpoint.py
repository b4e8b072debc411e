import struct

import numpy as np
import pytest

from conftest import TOY_TEACHER
from distilbench.checkpoint import (CheckpointError, decode, encode, file_digest, load_model,
                                    load_tensors, save_model, save_tensors)
from distilbench.transformer import forward, init_parameters


def test_byte_layout_hand_built():
    blob = encode({"ab": np.array([[1.5, -2.0, 0.25]])})
    expected = (b"KDT1" + struct.pack("<I", 1) + struct.pack("<H", 2) + b"ab"
                + struct.pack("<B", 2) + struct.pack("<2I", 1, 3)
                + struct.pack("<3d", 1.5, -2.0, 0.25))
    assert blob == expected


def test_scalar_and_empty_tensors_roundtrip():
    tensors = {"s": np.array(3.0), "e": np.zeros((0, 4)), "v": np.arange(5.0)}
    out = decode(encode(tensors))
    assert list(out) == ["s", "e", "v"]
    for k in tensors:
        assert out[k].shape == tensors[k].shape
        np.testing.assert_array_equal(out[k], tensors[k])


def test_model_roundtrip_bitwise(tmp_path, toy_teacher, toy_tokens):
    extra = {"proj.hs.1.2": np.random.default_rng(0).normal(size=(16, 8))}
    path = tmp_path / "m.kdt"
    save_model(path, toy_teacher, extra)
    loaded, got_extra = load_model(path)
    assert loaded.config == toy_teacher.config
    for name, p in toy_teacher.params.items():
        assert loaded[name].data.tobytes() == p.data.tobytes()
    assert got_extra["proj.hs.1.2"].tobytes() == extra["proj.hs.1.2"].tobytes()
    np.testing.assert_array_equal(forward(loaded, toy_tokens).logits.data,
                                  forward(toy_teacher, toy_tokens).logits.data)
    # re-saving gives identical bytes
    save_model(tmp_path / "again.kdt", loaded, got_extra)
    assert file_digest(path) == file_digest(tmp_path / "again.kdt")


def test_extra_name_clash_rejected(tmp_path):
    model = init_parameters(TOY_TEACHER, 0)
    with pytest.raises(CheckpointError, match="clash"):
        save_model(tmp_path / "x.kdt", model, {"head.weight": np.zeros(1)})


@pytest.mark.parametrize("cut", [3, 8, 11, 40, -1])
def test_truncation_detected(cut):
    blob = encode({"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(CheckpointError, match="truncated"):
        decode(blob[:cut])


def test_trailing_bytes_and_bad_magic():
    blob = encode({"w": np.ones(2)})
    with pytest.raises(CheckpointError, match="trailing"):
        decode(blob + b"\0")
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"KDT2" + blob[4:])


def test_missing_config_and_missing_file(tmp_path):
    save_tensors(tmp_path / "t.kdt", {"w": np.ones(2)})
    assert load_tensors(tmp_path / "t.kdt")["w"].tolist() == [1.0, 1.0]
    with pytest.raises(CheckpointError, match="_config"):
        load_model(tmp_path / "t.kdt")
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "absent.kdt")


def test_missing_parameter_rejected(tmp_path, toy_teacher):
    from distilbench.checkpoint import model_tensors
    tensors = model_tensors(toy_teacher)
    del tensors["layers.1.attention.query.weight"]
    save_tensors(tmp_path / "m.kdt", tensors)
    with pytest.raises(ValueError):
        load_model(tmp_path / "m.kdt")
