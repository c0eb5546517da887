import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from incontext_seg.formats import (
    FormatError,
    config_hash,
    decode_sint,
    encode_sint,
    load_sint,
    quantize_image,
    read_mask,
    read_pgm,
    read_ppm,
    save_sint,
    write_mask,
    write_pgm,
    write_ppm,
)

shapes = hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)


@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), shapes, elements=st.floats(-1e6, 1e6, width=32)))
def test_sint_round_trip_bit_exact(a):
    b = decode_sint(encode_sint(a))
    assert b.dtype == a.dtype and b.shape == a.shape and b.tobytes() == a.tobytes()


def test_sint_header_layout():
    buf = encode_sint(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"SINT" and buf[4] == 1 and buf[5] == 1 and buf[6] == 2
    assert struct.unpack("<2I", buf[7:15]) == (1, 3)
    assert np.frombuffer(buf[15:], "<f8").tolist() == [1.0, 2.0, 3.0]


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda b: b"XINT" + b[4:], 0),
        (lambda b: b[:4] + b"\x02" + b[5:], 4),
        (lambda b: b[:5] + b"\x07" + b[6:], 5),
        (lambda b: b[:-3], 15),
        (lambda b: b[:3], 3),
    ],
)
def test_sint_errors_carry_offset(mutate, offset):
    buf = encode_sint(np.ones((2, 2)))
    with pytest.raises(FormatError) as err:
        decode_sint(mutate(buf))
    assert err.value.offset == offset


def test_sint_ndim_check(tmp_path):
    save_sint(tmp_path / "a.sint", np.ones((2, 2)))
    with pytest.raises(FormatError, match="ndim=3"):
        load_sint(tmp_path / "a.sint", ndim=3)


@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12)))
def test_pgm_round_trip(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("pgm") / "a.pgm"
    write_pgm(p, a)
    assert np.array_equal(read_pgm(p), a)
    assert p.read_bytes().startswith(b"P5")


def test_mask_and_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = rng.random((7, 9)) < 0.4
    write_mask(tmp_path / "m.pgm", m)
    assert np.array_equal(read_mask(tmp_path / "m.pgm"), m)
    img = rng.integers(0, 256, size=(5, 6, 3)).astype(np.uint8)
    write_ppm(tmp_path / "c.ppm", img)
    assert (tmp_path / "c.ppm").read_bytes().startswith(b"P6")
    assert np.array_equal(read_ppm(tmp_path / "c.ppm", as_float=False), img)
    f = quantize_image(rng.random((4, 4, 3)))
    write_ppm(tmp_path / "f.ppm", f)
    assert np.array_equal(read_ppm(tmp_path / "f.ppm"), f)


def test_pgm_rejects_bad_values(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.array([[300]]))
    write_ppm(tmp_path / "c.ppm", np.zeros((2, 2, 3)))
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "c.ppm")


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
