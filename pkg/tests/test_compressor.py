import math

import numpy as np
import pytest

from veinbwr import synth
from veinbwr.compressor import (
    DeRConvParams,
    RoiBox,
    channel_weights,
    compress,
    de_r_conv,
    group_fuse,
    image_box_to_fmap,
    load_derconv,
    make_stem,
    roi_align,
    rotate_fmap,
    save_derconv,
    shallow_features,
)
from veinbwr.errors import DomainError
from veinbwr.fmap import ConvSpec, FeatureMap, Image
from veinbwr.locator import RoiPrediction, fit_locator, locate


def smooth_map(seed, c=2, h=33, w=41, sigma=3.0):
    from numpy.fft import fft2, ifft2

    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, h, w))
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    g = np.exp(-2 * (math.pi * sigma) ** 2 * (kx**2 + ky**2))
    return FeatureMap(np.real(ifft2(fft2(x) * g)))


def trivial_params(c=8, forward=None):
    """Attention saturated to w = 1, delta 3x3 convs, squeeze keeps the first half."""
    q, e = c // 4, c // 8
    delta = np.zeros((q, q, 3, 3))
    for i in range(q):
        delta[i, i, 1, 1] = 1.0
    squeeze = np.zeros((e, q, 1, 1))
    for i in range(e):
        squeeze[i, i, 0, 0] = 1.0
    return DeRConvParams(
        c,
        ConvSpec(np.zeros((q, c, 1, 1)), np.zeros(q)),
        ConvSpec(np.zeros((c, q, 1, 1)), np.full(c, 60.0)),
        ConvSpec(delta if forward is None else forward, np.zeros(q), 1, 1),
        ConvSpec(delta, np.zeros(q), 1, 1),
        ConvSpec(squeeze, np.zeros(e)),
    )


def test_roi_align_integer_box_is_crop():
    f = FeatureMap(np.random.default_rng(0).normal(size=(3, 20, 30)))
    out = roi_align(f, RoiBox(4, 5, 14, 13), 8, 10)
    assert np.array_equal(out.data, f.data[:, 5:13, 4:14])


def test_roi_align_constant_and_ramp():
    const = FeatureMap(np.full((2, 10, 12), 3.5))
    assert np.all(roi_align(const, RoiBox(-3.2, 1.1, 20.7, 8.9), 5, 7).data == np.float32(3.5))
    ramp = FeatureMap(np.tile(np.arange(40, dtype=np.float64), (1, 30, 1)))
    box = RoiBox(3.3, 2.2, 27.9, 20.4)
    out = roi_align(ramp, box, 6, 9)
    bin_w = (box.x_max - box.x_min) / 9
    centers = box.x_min + (np.arange(9) + 0.5) * bin_w - 0.5
    np.testing.assert_allclose(out.data[0], np.tile(centers, (6, 1)), atol=1e-5)


def test_roi_box_validation():
    with pytest.raises(DomainError):
        RoiBox(5, 5, 5, 10)
    with pytest.raises(DomainError):
        RoiBox(0, 0, math.inf, 1)
    with pytest.raises(DomainError):
        roi_align(FeatureMap(np.zeros((1, 4, 4))), RoiBox(0, 0, 4, 4), 0, 4)


def test_rotate_zero_is_identity_and_center_fixed():
    f = smooth_map(1)
    assert rotate_fmap(f, 0.0) is f
    spot = np.zeros((1, 33, 41))
    spot[0, 16, 20] = 1.0
    for phi in np.linspace(-3, 3, 13):
        out = rotate_fmap(FeatureMap(spot), float(phi)).data
        assert out[0, 16, 20] == pytest.approx(1.0)


def test_rotate_round_trip_on_smooth_maps():
    for seed in range(5):
        f = smooth_map(seed)
        for phi in (0.05, -0.12, 0.3):
            back = rotate_fmap(rotate_fmap(f, phi), -phi).data
            rng_ = f.data.max() - f.data.min()
            # compare away from the clamped corners
            inner = np.s_[:, 8:-8, 8:-8]
            assert np.abs(back[inner] - f.data[inner]).mean() < 0.02 * rng_


def test_rotate_direction_matches_rotation_map():
    # content rotated by phi: a point at +x from the center moves toward +y
    img = np.zeros((1, 41, 41))
    img[0, 20, 30] = 1.0
    out = rotate_fmap(FeatureMap(img), math.pi / 2).data[0]
    y, x = np.unravel_index(np.argmax(out), out.shape)
    assert (y, x) == (30, 20)


def test_channel_weights_contract():
    params = DeRConvParams.init(16, 3)
    f = smooth_map(2, c=16, h=8, w=8)
    w, wr = channel_weights(f, params)
    assert np.all((w > 0) & (w < 1))
    np.testing.assert_allclose(w + wr, 1.0, atol=1e-15)
    zero = trivial_params(16)
    zero = DeRConvParams(16, zero.attention1, ConvSpec(np.zeros((16, 4, 1, 1)), np.zeros(16)),
                         zero.forward_conv, zero.reverse_conv, zero.reverse_squeeze)
    w0, _ = channel_weights(f, zero)
    assert np.all(w0 == 0.5)
    with pytest.raises(DomainError):
        channel_weights(smooth_map(2, c=8, h=8, w=8), params)


def test_channel_weights_permutation_equivariant():
    params = DeRConvParams.init(16, 5)
    f = smooth_map(3, c=16, h=8, w=8)
    perm = np.random.default_rng(0).permutation(16)
    a1, a2 = params.attention1, params.attention2
    permuted = DeRConvParams(
        16,
        ConvSpec(a1.weights[:, perm], a1.bias),
        ConvSpec(a2.weights[perm], a2.bias[perm]),
        params.forward_conv, params.reverse_conv, params.reverse_squeeze,
    )
    w, _ = channel_weights(f, params)
    wp, _ = channel_weights(FeatureMap(f.data[perm]), permuted)
    np.testing.assert_allclose(wp, w[perm], atol=1e-12)


def test_group_fuse_matches_direct_sum():
    x = np.random.default_rng(4).normal(size=(16, 3, 5))
    fused = group_fuse(x)
    for k in range(4):
        np.testing.assert_allclose(fused[k], x[k] + x[4 + k] + x[8 + k] + x[12 + k], atol=1e-12)
    with pytest.raises(DomainError):
        group_fuse(np.zeros((6, 2, 2)))


def test_de_r_conv_shapes_and_trivial_path():
    f = smooth_map(5, c=64, h=12, w=16)
    out = de_r_conv(f, DeRConvParams.init(64, 1))
    assert out.shape == (24, 12, 16)
    trivial = trivial_params(8)
    g = smooth_map(6, c=8, h=6, w=7)
    out = de_r_conv(g, trivial).data
    x = g.data.astype(np.float64)
    np.testing.assert_allclose(out[:2], x[0:2] + x[2:4] + x[4:6] + x[6:8], atol=1e-5)
    np.testing.assert_allclose(out[2:], 0.0, atol=1e-6)  # w' = 0 on the reverse path
    with pytest.raises(DomainError):
        de_r_conv(smooth_map(7, c=12, h=4, w=4), DeRConvParams.init(64, 1))
    with pytest.raises(DomainError):
        DeRConvParams.init(12, 0)


def test_parameter_count_is_size_independent():
    p = DeRConvParams.init(64, 0)
    q = 16
    expected = (q * 64 + q) + (64 * q + 64) + 2 * (q * q * 9 + q) + (8 * q + 8)
    assert p.parameter_count() == expected
    assert de_r_conv(smooth_map(1, c=64, h=8, w=8), p).channels == p.out_channels == 24


def test_derconv_save_load(tmp_path):
    p = DeRConvParams.init(16, 9)
    save_derconv(p, tmp_path / "d")
    back = load_derconv(tmp_path / "d" / "derconv.json")
    f = smooth_map(8, c=16, h=6, w=6)
    np.testing.assert_allclose(de_r_conv(f, back).data, de_r_conv(f, p).data, atol=1e-6)
    (tmp_path / "seed.json").write_text('{"C": 16, "init_seed": 9}')
    assert de_r_conv(f, load_derconv(tmp_path / "seed.json")) == de_r_conv(f, p)


def test_compress_composition_on_fmap():
    trivial = trivial_params(8)
    f = smooth_map(9, c=8, h=40, w=72)
    pred = RoiPrediction((4.0, 4.0, 68.0, 36.0), 0.0)
    got = compress(f, pred, trivial)
    want = de_r_conv(FeatureMap(f.data[:, 4:36, 4:68]), trivial)
    assert got == want


def test_compress_image_defaults(small_dataset):
    img, truth = small_dataset[0]
    p = DeRConvParams.init(64, 0)
    out = compress(img, RoiPrediction(truth.box, truth.angle), p)
    assert out.shape == (24, 32, 64)
    assert out == compress(img, RoiPrediction(truth.box, truth.angle), p)


def test_image_box_maps_to_stem_grid():
    stem = make_stem(8, 0)
    # output pixel i is centered on input pixel 2i: center-frame c lands at c / 2
    b = image_box_to_fmap((15.5, 9.5, 80.5, 60.5), stem)
    assert b.as_tuple() == (8.0, 5.0, 40.5, 30.5)
    # round trip through roi_align: a ramp in input x reads back as x / 2
    ramp = np.tile(np.arange(64, dtype=np.float64), (1, 40, 1))
    img_box = (10.0, 6.0, 50.0, 30.0)
    fb = image_box_to_fmap(img_box, ConvSpec(np.ones((1, 1, 7, 7)), np.zeros(1), 2, 3))
    out = roi_align(FeatureMap(ramp[:, :20, :32]), fb, 4, 8).data[0, 0]
    centers = 10.0 + (np.arange(8) + 0.5) * 5.0 - 0.5
    np.testing.assert_allclose(out, centers / 2, atol=1e-5)


def test_stem_kernels_are_zero_mean():
    stem = make_stem(16, 3)
    np.testing.assert_allclose(stem.weights.sum(axis=(1, 2, 3)), 0.0, atol=1e-15)
    flat = shallow_features(Image(np.full((20, 20), 77, dtype=np.uint8)), stem)
    np.testing.assert_allclose(flat.data[:, 3:-3, 3:-3], 0.0, atol=1e-5)


def test_alignment_raises_same_finger_similarity():
    # similarity of two poses after locate + compress beats the similarity of
    # the unaligned shallow features the compressor starts from
    model = fit_locator(synth.synthesize(40, 5, 100))
    data = synth.synthesize(50, 2, 300)
    p = DeRConvParams.init(64, 0)
    stem = make_stem(64, 0)

    def cos(a, b):
        a, b = a.ravel().astype(float), b.ravel().astype(float)
        return a @ b / np.linalg.norm(a) / np.linalg.norm(b)

    pre, post = [], []
    for i in range(50):
        (a, _), (b, _) = data[2 * i], data[2 * i + 1]
        pre.append(cos(shallow_features(a, stem).data, shallow_features(b, stem).data))
        ca = compress(a, locate(model, a), p, stem=stem)
        cb = compress(b, locate(model, b), p, stem=stem)
        post.append(cos(ca.data, cb.data))
    assert np.mean(post) > np.mean(pre)
