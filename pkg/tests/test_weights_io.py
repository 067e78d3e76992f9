import json

import numpy as np
import pytest

from services.errors import ContainerError, InputError
from services.weights_io import HEADER_PREFIX, load_model, save_model, weights_from_bytes, weights_to_bytes


def test_save_and_load_preserve_every_tensor(tmp_path, tiny_model):
    save_model(tiny_model.weights, tmp_path / "weights.bin", tmp_path / "config.json")
    loaded = load_model(tmp_path / "weights.bin", tmp_path / "config.json")
    assert loaded.config == tiny_model.config
    for name, arr in tiny_model.weights.items():
        assert np.array_equal(loaded[name], arr), name


def test_flipped_data_byte_fails_checksum(tiny_model):
    blob = bytearray(weights_to_bytes(tiny_model.weights))
    blob[-3] ^= 0xFF
    with pytest.raises(ContainerError, match="checksum"):
        weights_from_bytes(bytes(blob), tiny_model.config)


@pytest.mark.parametrize("cut", [4, HEADER_PREFIX.size + 10])
def test_truncated_container(tiny_model, cut):
    blob = weights_to_bytes(tiny_model.weights)[:cut]
    with pytest.raises(ContainerError, match="truncated"):
        weights_from_bytes(blob, tiny_model.config)


def test_header_must_be_json(tiny_model):
    blob = HEADER_PREFIX.pack(3) + b"{{{" + b"\x00" * 8
    with pytest.raises(ContainerError, match="JSON"):
        weights_from_bytes(blob, tiny_model.config)


def test_missing_files_are_input_errors(tmp_path):
    with pytest.raises(InputError):
        load_model(tmp_path / "weights.bin", tmp_path / "config.json")


def test_header_shape_must_match_byte_count(tiny_model):
    blob = weights_to_bytes(tiny_model.weights)
    (header_len,) = HEADER_PREFIX.unpack_from(blob, 0)
    start = HEADER_PREFIX.size + header_len
    header = json.loads(blob[HEADER_PREFIX.size:start])
    header["final_norm.scale"]["shape"] = [tiny_model.config.d_model + 1]
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    forged = HEADER_PREFIX.pack(len(header_bytes)) + header_bytes + blob[start:]
    with pytest.raises(ContainerError, match="does not fit"):
        weights_from_bytes(forged, tiny_model.config)
