import numpy as np
import pytest

from patchsim.containers import load_arrays, save_arrays
from patchsim.errors import DataError


def test_round_trip_preserves_bits_and_order(tmp_path, rng):
    arrays = {
        "b.weight": rng.standard_normal((3, 4)),
        "a.bias": rng.standard_normal(5),
        "step": np.asarray(7.0),
    }
    path = tmp_path / "ck.bin"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], np.asarray(arrays[k], dtype=np.float64))
        assert loaded[k].shape == np.asarray(arrays[k]).shape


def test_exact_byte_layout(tmp_path):
    path = tmp_path / "ck.bin"
    save_arrays(path, {"x": np.array([1.0, 2.0])})
    blob = path.read_bytes()
    expected = (
        b"F64ARRAYS 1 1\nx f64 2\n\n"
        + np.array([1.0, 2.0]).astype("<f8").tobytes()
    )
    assert blob == expected


def test_save_is_deterministic(tmp_path, rng):
    arrays = {"w": rng.standard_normal((8, 2)), "v": rng.standard_normal(3)}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_arrays(p1, arrays)
    save_arrays(p2, arrays)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_name_rejected(tmp_path):
    with pytest.raises(DataError, match="name"):
        save_arrays(tmp_path / "x.bin", {"has space": np.zeros(1)})


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "ck.bin"
    save_arrays(path, {"x": np.zeros(4)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError, match="truncated"):
        load_arrays(path)
