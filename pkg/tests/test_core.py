import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossview.core import (
    BadMagic,
    CVDFError,
    DecodeError,
    DimensionMismatch,
    Image,
    Tensor,
    TruncatedPayload,
    UnsupportedDtype,
    UnsupportedVersion,
    decode_tensor,
    encode_tensor,
    load_image,
    read_tensor,
    save_image,
    write_tensor,
)


def test_two_by_two_layout(tmp_path):
    t = Tensor.from_flat((2, 2), [1, 2, 3, 4])
    path = tmp_path / "t.cvdf"
    write_tensor(t, path)
    raw = path.read_bytes()
    # 4 magic + 2 version + 1 dtype + 1 rank + 2 * 4 dims
    assert len(raw) == 16 + 16
    assert raw[:4] == b"CVDF"
    assert struct.unpack("<HBB", raw[4:8]) == (1, 0, 2)
    assert struct.unpack("<2I", raw[8:16]) == (2, 2)
    assert np.frombuffer(raw[16:], "<f4").tolist() == [1, 2, 3, 4]
    assert read_tensor(path) == t


def test_rank_one_zero(tmp_path):
    t = Tensor.from_flat((1,), [0.0])
    write_tensor(t, tmp_path / "z.cvdf")
    assert read_tensor(tmp_path / "z.cvdf") == t


def test_random_rank3_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((3, 4, 5)).astype(np.float32)
    write_tensor(data, tmp_path / "r.cvdf")
    back = read_tensor(tmp_path / "r.cvdf")
    assert back.dims == (3, 4, 5)
    assert back.data.tobytes() == data.tobytes()


def test_bad_magic(tmp_path):
    raw = bytearray(encode_tensor(Tensor.from_flat((2,), [1, 2])))
    raw[:4] = b"XXXX"
    (tmp_path / "b.cvdf").write_bytes(bytes(raw))
    with pytest.raises(BadMagic):
        read_tensor(tmp_path / "b.cvdf")


def test_truncated_payload():
    raw = encode_tensor(Tensor.from_flat((2, 2), [1, 2, 3, 4]))
    with pytest.raises(TruncatedPayload):
        decode_tensor(raw[:16] + raw[16:24])


def test_version_and_dtype_rejected():
    raw = bytearray(encode_tensor(Tensor.from_flat((2,), [1, 2])))
    bumped = bytearray(raw)
    bumped[4] = 2
    with pytest.raises(UnsupportedVersion):
        decode_tensor(bytes(bumped))
    raw[6] = 1
    with pytest.raises(UnsupportedDtype):
        decode_tensor(bytes(raw))


def test_every_header_corruption_is_typed():
    t = Tensor.from_flat((2, 3), np.arange(6))
    raw = encode_tensor(t)
    header_len = 8 + 4 * 2
    for pos in range(header_len):
        for val in range(256):
            if val == raw[pos]:
                continue
            bad = bytearray(raw)
            bad[pos] = val
            with pytest.raises(CVDFError):
                decode_tensor(bytes(bad))


@settings(max_examples=60, deadline=None)
@given(
    arrays(
        np.float32,
        st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple),
        elements=st.floats(width=32, allow_nan=True, allow_infinity=True),
    )
)
def test_roundtrip_property(arr):
    t = Tensor(arr)
    assert decode_tensor(encode_tensor(t)) == t
    raw = encode_tensor(t)
    assert encode_tensor(decode_tensor(raw)) == raw


def test_tensor_rejects_empty_dims():
    with pytest.raises(CVDFError):
        Tensor(np.zeros((0, 3)))


def test_image_roundtrips_as_rank3_tensor(tmp_path):
    img = Image(np.random.default_rng(1).random((4, 6, 3)))
    write_tensor(img.to_tensor(), tmp_path / "i.cvdf")
    back = Image.from_tensor(read_tensor(tmp_path / "i.cvdf"))
    np.testing.assert_allclose(back.pixels, img.pixels, atol=1e-7)
    with pytest.raises(DimensionMismatch):
        Image.from_tensor(Tensor(np.zeros((2, 2))))


def test_image_range_enforced():
    with pytest.raises(ValueError):
        Image(np.full((2, 2, 1), 1.5))
    with pytest.raises(DimensionMismatch):
        Image(np.zeros((2, 2, 2)))


def test_png_codec_scales_by_255(tmp_path):
    px = np.array([[0, 51, 255]], dtype=float)[:, :, None] / 255.0
    save_image(Image(px), tmp_path / "g.png")
    back = load_image(tmp_path / "g.png")
    assert back.channels == 1
    np.testing.assert_array_equal(back.pixels[0, :, 0], [0.0, 0.2, 1.0])


def test_corrupt_png_raises_decode_error(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    with pytest.raises(DecodeError) as info:
        load_image(p)
    assert info.value.path == p
