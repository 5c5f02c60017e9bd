from __future__ import annotations

import numpy as np
import pytest

from app.core.errors import ContractError, FormatError, InputError
from app.services.feature_cache import ArrayWriter, describe, has_array, load_array, save_array


def test_appended_records_are_memory_mapped_back(tmp_path, rng):
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(2, 4, 5))
    with ArrayWriter(tmp_path, "x", (4, 5), description="test records") as w:
        w.append(a)
        w.append(b)
    back = load_array(tmp_path, "x")
    assert isinstance(back, np.memmap)
    assert back.shape == (5, 4, 5)
    assert np.allclose(back, np.concatenate([a, b]).astype(np.float32))
    assert describe(tmp_path, "x") == {"shape": [5, 4, 5], "dtype": "float32", "layout": "C",
                                       "description": "test records"}


def test_wrong_record_shape_is_contract_error(tmp_path):
    with ArrayWriter(tmp_path, "x", (4,)) as w:
        with pytest.raises(ContractError):
            w.append(np.zeros((2, 5)))


def test_save_keeps_dtype_and_loads_without_mmap(tmp_path):
    values = np.arange(12, dtype=np.int64).reshape(6, 2)
    save_array(tmp_path, "ids", values)
    back = load_array(tmp_path, "ids", mmap=False)
    assert back.dtype == np.int64
    assert np.array_equal(back, values)


def test_empty_array(tmp_path):
    save_array(tmp_path, "e", np.zeros((0, 3), dtype=np.float32))
    assert load_array(tmp_path, "e").shape == (0, 3)


def test_missing_entry_is_input_error(tmp_path):
    assert not has_array(tmp_path, "nope")
    assert describe(tmp_path, "nope") is None
    with pytest.raises(InputError):
        load_array(tmp_path, "nope")


def test_truncated_binary_is_format_error(tmp_path):
    save_array(tmp_path, "x", np.ones((4, 3), dtype=np.float32))
    data = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(data[:-4])
    with pytest.raises(FormatError):
        load_array(tmp_path, "x")


def test_bad_descriptor_is_format_error(tmp_path):
    save_array(tmp_path, "x", np.ones((4, 3), dtype=np.float32))
    (tmp_path / "x.json").write_text("{}", encoding="utf-8")
    with pytest.raises(FormatError):
        load_array(tmp_path, "x")
