import os

import numpy as np
import pytest

from rsdcommon import CheckpointError, FormatError
from rsdio import (
    CHECKPOINT_MAGIC,
    DATASET_MAGIC,
    ModelCheckpoint,
    canonical_json,
    read_checkpoint,
    read_container,
    read_features,
    write_checkpoint,
    write_container,
    write_features,
)


def _checkpoint():
    rng = np.random.default_rng(0)
    return ModelCheckpoint(
        kind="rsdlstm",
        tensors={
            "lstm.W": rng.standard_normal((32, 5)).astype(np.float32),
            "lstm.b": rng.standard_normal(32),
            "head_rsd.W": rng.standard_normal((8, 1)).astype(np.float32),
        },
        metadata={"variant": {"kind": "rsdnet_multitask"}, "s_norm": 5.0},
    )


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    path = str(tmp_path / "model.rsdc")
    original = _checkpoint()
    write_checkpoint(path, original)
    loaded = read_checkpoint(path, expected_kind="rsdlstm")
    assert loaded.kind == "rsdlstm"
    assert loaded.metadata == original.metadata
    assert list(loaded.tensors) == list(original.tensors)
    for name, array in original.tensors.items():
        assert loaded.tensors[name].dtype == array.dtype
        assert loaded.tensors[name].tobytes() == array.tobytes()


def test_checkpoint_kind_mismatch(tmp_path):
    path = str(tmp_path / "model.rsdc")
    write_checkpoint(path, _checkpoint())
    with pytest.raises(CheckpointError, match="expected encoder"):
        read_checkpoint(path, expected_kind="encoder")


def test_wrong_magic_is_a_format_error(tmp_path):
    path = str(tmp_path / "data.rsds")
    write_container(path, DATASET_MAGIC, {"kind": "dataset"}, [])
    with pytest.raises(FormatError, match="magic"):
        read_container(path, CHECKPOINT_MAGIC)


def test_missing_file_is_a_format_error(tmp_path):
    with pytest.raises(FormatError, match="not found"):
        read_checkpoint(str(tmp_path / "absent.rsdc"))


def test_truncated_blob_is_a_format_error(tmp_path):
    path = tmp_path / "model.rsdc"
    write_checkpoint(str(path), _checkpoint())
    payload = path.read_bytes()
    path.write_bytes(payload[:-16])
    with pytest.raises(FormatError, match="truncated"):
        read_checkpoint(str(path))


def test_unsupported_version(tmp_path):
    path = tmp_path / "model.rsdc"
    write_checkpoint(str(path), _checkpoint())
    payload = bytearray(path.read_bytes())
    payload[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(payload))
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(str(path))


def test_features_round_trip(tmp_path):
    path = str(tmp_path / "features.rsdf")
    features = {
        "S0002": np.arange(12, dtype=np.float32).reshape(4, 3),
        "S0001": np.ones((2, 3), dtype=np.float32),
    }
    write_features(path, features, {"encoder": "progress-regression"})
    loaded, metadata = read_features(path)
    assert list(loaded) == ["S0002", "S0001"]
    assert metadata == {"encoder": "progress-regression"}
    for sid, array in features.items():
        assert np.array_equal(loaded[sid], array)


def test_write_leaves_no_temp_file(tmp_path):
    path = str(tmp_path / "nested" / "model.rsdc")
    write_checkpoint(path, _checkpoint())
    assert os.listdir(tmp_path / "nested") == ["model.rsdc"]


def test_canonical_json_is_key_order_independent():
    assert canonical_json({"b": 1, "a": [1, 2]}) == canonical_json({"a": [1, 2], "b": 1})
    assert canonical_json({"a": 1}) == '{"a":1}'
