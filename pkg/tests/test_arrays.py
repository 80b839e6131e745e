"""Binary array files with JSON headers, plus content digests."""

import numpy as np
import pytest

from exoego.arrays import array_digest, file_digest, load_array, save_array


def test_round_trip_values_shape_dtype(tmp_path):
    rng = np.random.default_rng(0)
    for arr in (
        rng.normal(size=(4, 7)).astype(np.float32),
        rng.normal(size=(2, 3, 5)),
        rng.integers(-50, 50, size=(6,)).astype(np.int64),
    ):
        base = tmp_path / f"a{arr.ndim}_{arr.dtype.kind}"
        save_array(base, arr)
        back, header = load_array(base)
        np.testing.assert_array_equal(back, arr)
        assert back.dtype == arr.dtype
        assert tuple(header["shape"]) == arr.shape


def test_save_returns_bin_digest(tmp_path):
    arr = np.arange(12, dtype=np.float64).reshape(3, 4)
    digest = save_array(tmp_path / "x", arr)
    assert digest == file_digest(tmp_path / "x.bin")


def test_rewrite_is_byte_identical(tmp_path):
    arr = np.linspace(0.0, 1.0, 9, dtype=np.float32)
    save_array(tmp_path / "x", arr, view="ego", fps=4.0)
    first = ((tmp_path / "x.bin").read_bytes(), (tmp_path / "x.json").read_bytes())
    save_array(tmp_path / "x", arr, view="ego", fps=4.0)
    assert ((tmp_path / "x.bin").read_bytes(), (tmp_path / "x.json").read_bytes()) == first


def test_extra_metadata_lands_in_header(tmp_path):
    save_array(tmp_path / "x", np.zeros(2), view="exo", times=np.array([0.5, 1.0]))
    _, header = load_array(tmp_path / "x")
    assert header["view"] == "exo"
    assert header["times"] == [0.5, 1.0]  # arrays are jsonified


def test_digest_covers_shape_and_dtype():
    a = np.arange(6, dtype=np.float64)
    assert array_digest(a.reshape(2, 3)) != array_digest(a.reshape(3, 2))
    same_bytes_i = np.array([1, 2], dtype="<i4")
    same_bytes_u = same_bytes_i.view("<u4")
    assert same_bytes_i.tobytes() == same_bytes_u.tobytes()
    assert array_digest(same_bytes_i) != array_digest(same_bytes_u)


def test_digest_normalizes_layout_and_byte_order():
    a = np.arange(24, dtype=np.float64).reshape(4, 6)
    assert array_digest(a) == array_digest(a.astype(">f8"))
    assert array_digest(a[:, ::2]) == array_digest(np.ascontiguousarray(a[:, ::2]))
    assert array_digest(a.T) == array_digest(a.T.copy())


def test_unsupported_dtypes_rejected():
    for bad in (np.zeros(2, dtype=bool), np.zeros(2, dtype=complex), np.array(["a"])):
        with pytest.raises(ValueError):
            array_digest(bad)


def test_load_missing_and_truncated(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_array(tmp_path / "nope")
    save_array(tmp_path / "x", np.zeros(8))
    bin_path = tmp_path / "x.bin"
    bin_path.write_bytes(bin_path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_array(tmp_path / "x")
