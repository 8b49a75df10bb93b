import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svctbench.errors import InvalidArgumentError
from svctbench.tensorio import MAGIC, decode_array, encode_array, load_tensor, save_tensor

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(a=arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 5)), elements=finite))
def test_base64_round_trip(a):
    b = decode_array(encode_array(a))
    assert b.shape == a.shape and b.tobytes() == a.tobytes()


def test_file_round_trip(tmp_path, rng):
    a = rng.standard_normal((3, 4, 5))
    path = save_tensor(tmp_path / "x" / "a.bin", a, "projection-major", meta={"p": 6})
    b, header = load_tensor(path)
    np.testing.assert_array_equal(a, b)
    assert header["layout"] == "projection-major" and header["meta"] == {"p": 6}
    assert path.read_bytes()[:8] == MAGIC


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(InvalidArgumentError):
        load_tensor(path)


def test_truncated_payload(tmp_path, rng):
    path = save_tensor(tmp_path / "a.bin", rng.standard_normal(10))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(InvalidArgumentError):
        load_tensor(path)


def test_unknown_layout(tmp_path):
    with pytest.raises(InvalidArgumentError):
        save_tensor(tmp_path / "a.bin", np.zeros(2), "column-major")
