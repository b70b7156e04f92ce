import numpy as np
import pytest

from veinbwr.errors import DomainError, FormatError
from veinbwr.fmap import (
    FMAP_MAGIC,
    ConvSpec,
    FeatureMap,
    Image,
    avg_pool,
    bilinear_sample,
    conv2d,
    decode_fmap,
    decode_pgm,
    encode_fmap,
    encode_pgm,
    read_fmap,
    read_pgm,
    write_fmap,
    write_pgm,
)


def loop_conv(x, w, b, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def test_feature_map_is_float32_and_readonly():
    f = FeatureMap(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
    assert f.data.dtype == np.float32
    assert f.shape == (2, 3, 4)
    with pytest.raises(ValueError):
        f.data[0, 0, 0] = 1


def test_feature_map_rejects_nonfinite_and_bad_rank():
    with pytest.raises(DomainError):
        FeatureMap(np.full((1, 2, 2), np.nan))
    with pytest.raises(DomainError):
        FeatureMap(np.zeros((2, 2)))


def test_bilinear_integer_coords_return_pixels():
    data = np.arange(12, dtype=np.float32).reshape(1, 3, 4)
    f = FeatureMap(data)
    for y in range(3):
        for x in range(4):
            assert bilinear_sample(f, 0, x, y) == data[0, y, x]


def test_bilinear_midpoint_and_clamp():
    f = FeatureMap(np.array([[[0.0, 2.0], [4.0, 6.0]]]))
    assert bilinear_sample(f, 0, 0.5, 0.5) == pytest.approx(3.0)
    assert bilinear_sample(f, 0, -5.0, 0.0) == 0.0
    assert bilinear_sample(f, 0, 9.0, 9.0) == 6.0
    with pytest.raises(DomainError):
        bilinear_sample(f, 1, 0, 0)
    with pytest.raises(DomainError):
        bilinear_sample(f, 0, np.nan, 0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 3)])
def test_conv2d_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 9, 11))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = conv2d(FeatureMap(x), ConvSpec(w, b, stride, pad)).data
    want = loop_conv(x.astype(np.float32).astype(np.float64), w, b, stride, pad)
    np.testing.assert_allclose(got, want, atol=1e-5, rtol=1e-5)


def test_conv2d_delta_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 5, 5)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    assert conv2d(FeatureMap(x), ConvSpec(w, [0.0], 1, 1)) == FeatureMap(x)


def test_conv2d_errors():
    with pytest.raises(DomainError):
        conv2d(FeatureMap(np.zeros((2, 4, 4))), ConvSpec(np.zeros((1, 1, 3, 3)), [0.0]))
    with pytest.raises(DomainError):
        conv2d(FeatureMap(np.zeros((1, 2, 2))), ConvSpec(np.zeros((1, 1, 3, 3)), [0.0]))


def test_avg_pool_matches_block_means():
    x = np.arange(2 * 6 * 6, dtype=np.float64).reshape(2, 6, 6)
    got = avg_pool(FeatureMap(x), 2, 2).data
    want = x.reshape(2, 3, 2, 3, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(got, want, atol=1e-5)
    with pytest.raises(DomainError):
        avg_pool(FeatureMap(x), 7, 1)


def test_fmap_roundtrip(tmp_path):
    f = FeatureMap(np.random.default_rng(1).normal(size=(3, 4, 5)))
    assert decode_fmap(encode_fmap(f)) == f
    write_fmap(tmp_path / "a.fmap", f)
    assert read_fmap(tmp_path / "a.fmap") == f


def test_fmap_layout_is_little_endian():
    f = FeatureMap(np.array([[[1.0, 2.0]]]))
    buf = encode_fmap(f)
    assert buf[:6] == FMAP_MAGIC
    assert buf[6:18] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(buf[18:], "<f4").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mutate", [
    lambda b: b[:10],
    lambda b: b"XMAP1\x00" + b[6:],
    lambda b: b[:-1],
    lambda b: b + b"\x00",
    lambda b: b[:6] + (1 << 20).to_bytes(4, "little") * 3 + b[18:],
])
def test_fmap_decode_rejects_corruption(mutate):
    buf = encode_fmap(FeatureMap(np.zeros((1, 2, 2))))
    with pytest.raises(FormatError):
        decode_fmap(mutate(buf))


def test_pgm_roundtrip_and_comments(tmp_path):
    img = Image(np.random.default_rng(2).integers(0, 256, (5, 7), dtype=np.uint8))
    assert decode_pgm(encode_pgm(img)) == img
    commented = b"P5\n# made by hand\n7 5\n255\n" + img.data.tobytes()
    assert decode_pgm(commented) == img
    write_pgm(tmp_path / "a.pgm", img)
    assert read_pgm(tmp_path / "a.pgm") == img


@pytest.mark.parametrize("buf", [b"P2\n1 1\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00", b"P5\n2 2\n255\n\x00", b"P5\n"])
def test_pgm_rejects_bad_input(buf):
    with pytest.raises(FormatError):
        decode_pgm(buf)
