"""Spatial and channel redundancy removal ahead of the keyed transform.

Boxes are given in pixel-edge coordinates (pixel ``j`` spans ``[j, j+1)``);
sampling converts to the pixel-center frame of :mod:`veinbwr.fmap` by
subtracting one half, so an integer box with matching output size is an
exact crop.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .fmap import ConvSpec, FeatureMap, Image, conv2d, read_fmap, sample_bilinear, write_fmap
from .locator import RoiPrediction
from .prng import SplitMix64, mix64

GROUPS = 4
DEFAULT_OUT_H, DEFAULT_OUT_W = 32, 64
STEM_KERNEL, STEM_STRIDE, STEM_PADDING = 7, 2, 3


@dataclass(frozen=True)
class RoiBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError("box coordinates must be finite")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DomainError(f"degenerate box {vals}")

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def roi_align(fmap: FeatureMap, box: RoiBox, out_h: int = DEFAULT_OUT_H,
              out_w: int = DEFAULT_OUT_W) -> FeatureMap:
    """One bilinear sample at the real-valued center of each sub-region."""
    if out_h < 1 or out_w < 1:
        raise DomainError("output dims must be >= 1")
    if not isinstance(box, RoiBox):
        box = RoiBox(*box)
    bw = (box.x_max - box.x_min) / out_w
    bh = (box.y_max - box.y_min) / out_h
    xs = box.x_min + (np.arange(out_w) + 0.5) * bw - 0.5
    ys = box.y_min + (np.arange(out_h) + 0.5) * bh - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return FeatureMap(sample_bilinear(fmap.data, gx, gy).astype(np.float32))


def rotate_fmap(fmap: FeatureMap, phi: float) -> FeatureMap:
    """Rotate content by ``phi`` about the map center (destination-driven)."""
    if not math.isfinite(phi):
        raise DomainError("phi must be finite")
    if phi == 0.0:
        return fmap
    _, h, w = fmap.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = gx - cx, gy - cy
    c, s = math.cos(phi), math.sin(phi)
    # inverse of [[c, -s], [s, c]]
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    return FeatureMap(sample_bilinear(fmap.data, sx, sy).astype(np.float32))


def _uniform_conv(rng: SplitMix64, c_out: int, c_in: int, k: int, padding: int) -> ConvSpec:
    bound = 1.0 / math.sqrt(c_in * k * k)
    vals = np.array([rng.uniform() for _ in range(c_out * c_in * k * k)])
    w = ((2.0 * vals - 1.0) * bound).reshape(c_out, c_in, k, k)
    return ConvSpec(w, np.zeros(c_out), stride=1, padding=padding)


@dataclass(frozen=True)
class DeRConvParams:
    in_channels: int
    attention1: ConvSpec  # 1x1, C -> C/4
    attention2: ConvSpec  # 1x1, C/4 -> C
    forward_conv: ConvSpec  # 3x3, C/4 -> C/4
    reverse_conv: ConvSpec  # 3x3, C/4 -> C/4
    reverse_squeeze: ConvSpec  # 1x1, C/4 -> C/8
    init_seed: int | None = None

    def __post_init__(self):
        c = self.in_channels
        if c < 8 or c % 8:
            raise DomainError(f"De-R Conv needs channels divisible by 8, got {c}")
        q, e = c // 4, c // 8
        expect = {
            "attention1": (q, c, 1, 1),
            "attention2": (c, q, 1, 1),
            "forward_conv": (q, q, 3, 3),
            "reverse_conv": (q, q, 3, 3),
            "reverse_squeeze": (e, q, 1, 1),
        }
        for name, shape in expect.items():
            got = getattr(self, name).weights.shape
            if got != shape:
                raise DomainError(f"{name} weights {got} != {shape}")

    @classmethod
    def init(cls, channels: int, seed: int) -> "DeRConvParams":
        """Fan-in scaled uniform weights drawn from a SplitMix64 stream, zero bias."""
        if channels < 8 or channels % 8:
            raise DomainError(f"De-R Conv needs channels divisible by 8, got {channels}")
        rng = SplitMix64(mix64(seed, 0xDE8))
        q, e = channels // 4, channels // 8
        return cls(
            channels,
            _uniform_conv(rng, q, channels, 1, 0),
            _uniform_conv(rng, channels, q, 1, 0),
            _uniform_conv(rng, q, q, 3, 1),
            _uniform_conv(rng, q, q, 3, 1),
            _uniform_conv(rng, e, q, 1, 0),
            seed,
        )

    @property
    def out_channels(self) -> int:
        return 3 * self.in_channels // 8

    def parameter_count(self) -> int:
        return sum(
            spec.weights.size + spec.bias.size
            for spec in (self.attention1, self.attention2, self.forward_conv,
                         self.reverse_conv, self.reverse_squeeze)
        )


_DERCONV_PARTS = ("attention1", "attention2", "forward_conv", "reverse_conv", "reverse_squeeze")


def save_derconv(params: DeRConvParams, directory) -> Path:
    """Write weight/bias FMAP blobs plus ``derconv.json`` describing them."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    doc = {"C": params.in_channels, "init_seed": params.init_seed, "weights": {}}
    for name in _DERCONV_PARTS:
        spec = getattr(params, name)
        o, i, kh, kw = spec.weights.shape
        write_fmap(d / f"{name}.w.fmap", FeatureMap(spec.weights.reshape(o * i, kh, kw)))
        write_fmap(d / f"{name}.b.fmap", FeatureMap(spec.bias.reshape(1, 1, o)))
        doc["weights"][name] = {"weights": f"{name}.w.fmap", "bias": f"{name}.b.fmap",
                                "shape": [o, i, kh, kw], "padding": spec.padding}
    path = d / "derconv.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_derconv(path) -> DeRConvParams:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        c = int(doc["C"])
        seed = doc.get("init_seed")
        if "weights" not in doc:
            return DeRConvParams.init(c, int(seed))
        specs = {}
        for name in _DERCONV_PARTS:
            ref = doc["weights"][name]
            o, i, kh, kw = (int(v) for v in ref["shape"])
            w = read_fmap(path.parent / ref["weights"]).data.reshape(o, i, kh, kw)
            b = read_fmap(path.parent / ref["bias"]).data.reshape(o)
            specs[name] = ConvSpec(w, b, 1, int(ref["padding"]))
        return DeRConvParams(c, **specs, init_seed=seed)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, (FormatError, DomainError)):
            raise
        raise FormatError(f"cannot load De-R Conv params {path}: {exc}") from exc


def _pointwise(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    return np.tensordot(spec.weights[:, :, 0, 0], x, axes=(1, 0)) + spec.bias.reshape(
        (-1,) + (1,) * (x.ndim - 1)
    )


def channel_weights(fmap: FeatureMap, params: DeRConvParams) -> tuple[np.ndarray, np.ndarray]:
    """Channel attention ``w`` and its complement ``w' = 1 - w``."""
    if fmap.channels != params.in_channels:
        raise DomainError(f"input has {fmap.channels} channels, params expect {params.in_channels}")
    pooled = fmap.data.astype(np.float64).mean(axis=(1, 2))
    z = _pointwise(_pointwise(pooled, params.attention1), params.attention2)
    w = 1.0 / (1.0 + np.exp(-z))
    return w, 1.0 - w


def group_fuse(data: np.ndarray, groups: int = GROUPS) -> np.ndarray:
    """Split channels into contiguous equal groups and sum them position-wise."""
    c = data.shape[0]
    if c % groups:
        raise DomainError(f"{c} channels do not split into {groups} groups")
    return data.reshape(groups, c // groups, *data.shape[1:]).sum(axis=0)


def de_r_conv(fmap: FeatureMap, params: DeRConvParams) -> FeatureMap:
    c = fmap.channels
    if c % 8:
        raise DomainError(f"De-R Conv needs channels divisible by 8, got {c}")
    w, w_rev = channel_weights(fmap, params)
    x = fmap.data.astype(np.float64)
    fwd = FeatureMap(group_fuse(x * w[:, None, None]))
    rev = FeatureMap(group_fuse(x * w_rev[:, None, None]))
    fwd = conv2d(fwd, params.forward_conv)
    rev = conv2d(conv2d(rev, params.reverse_conv), params.reverse_squeeze)
    return FeatureMap(np.concatenate([fwd.data, rev.data], axis=0))


def make_stem(channels: int, seed: int) -> ConvSpec:
    """Untrained 7x7/stride-2/pad-3 shallow stem with zero-mean smooth kernels.

    Each kernel is seeded noise under a Gaussian window with its mean removed,
    so flat regions map to zero and the response follows vessel structure.
    """
    rng = SplitMix64(mix64(seed, 0x57E3))
    k = STEM_KERNEL
    r = np.arange(k) - (k - 1) / 2
    window = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * 2.0**2))
    w = np.empty((channels, 1, k, k))
    for ch in range(channels):
        noise = np.array([rng.uniform() for _ in range(k * k)]).reshape(k, k) * 2 - 1
        kern = noise * window
        kern -= kern.mean()
        w[ch, 0] = kern / np.linalg.norm(kern)
    return ConvSpec(w / 255.0, np.zeros(channels), STEM_STRIDE, STEM_PADDING)


def shallow_features(image: Image, stem: ConvSpec) -> FeatureMap:
    return conv2d(image.as_fmap(), stem)


def image_box_to_fmap(box, stem: ConvSpec) -> RoiBox:
    """Map an image-space box to the stem output grid.

    Output pixel ``i`` is centered on input pixel ``i*stride - padding + (k-1)/2``.
    """
    st = stem.stride
    shift = stem.padding - (stem.kernel_w - 1) / 2.0
    x0, y0, x1, y1 = box

    def f(v):
        # edge -> center frame, invert the center map, back to edge frame
        return (v - 0.5 + shift) / st + 0.5

    return RoiBox(f(x0), f(y0), f(x1), f(y1))


def compress(image_or_fmap, prediction: RoiPrediction, params: DeRConvParams,
             out_h: int = DEFAULT_OUT_H, out_w: int = DEFAULT_OUT_W,
             stem: ConvSpec | None = None) -> FeatureMap:
    """roi_align -> de_r_conv -> rotation correction.

    An :class:`Image` is first run through the shallow stem (seeded from
    ``params.init_seed`` unless given) and the box is mapped onto the stem
    grid; a :class:`FeatureMap` is used as-is with the box in its own frame.
    """
    if isinstance(image_or_fmap, Image):
        if stem is None:
            if params.init_seed is None:
                raise DomainError("an image input needs a stem or a seeded De-R Conv")
            stem = make_stem(params.in_channels, params.init_seed)
        fmap = shallow_features(image_or_fmap, stem)
        box = image_box_to_fmap(prediction.box, stem)
    else:
        fmap = image_or_fmap
        box = RoiBox(*prediction.box)
    aligned = roi_align(fmap, box, out_h, out_w)
    return rotate_fmap(de_r_conv(aligned, params), prediction.phi)
