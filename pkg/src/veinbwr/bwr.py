"""Keyed Block-Warping-Remapping (BWR) template protection.

A feature map is cut into ``b x b`` blocks. Each block carries a regular mesh
of ``s x s`` pixel cells whose interior vertices are pushed by keyed offsets;
the block is resampled so every warped cell lands on its regular cell. A keyed
subset of the warped blocks is then scattered over all block slots, with
reuse, to form the protected map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .fmap import FeatureMap, sample_bilinear
from .prng import MASK64, SplitMix64

WARP_DOMAIN = 0x5741525000000001
SELECT_DOMAIN = 0x53454C4500000002
MAP_DOMAIN = 0x4D41500000000003


@dataclass(frozen=True)
class BwrParams:
    b: int = 16
    s: int = 8
    o: float = 0.625
    r: float = 0.8
    symmetric_offsets: bool = False

    def __post_init__(self):
        if self.b < 1 or self.s < 1:
            raise DomainError("b and s must be positive")
        if self.b % self.s:
            raise DomainError(f"s must divide b (b={self.b}, s={self.s})")
        if not 0.0 <= self.o < 1.0:
            raise DomainError(f"o must lie in [0, 1), got {self.o}")
        if not 0.0 < self.r <= 1.0:
            raise DomainError(f"r must lie in (0, 1], got {self.r}")

    def check_shape(self, h: int, w: int) -> None:
        if h % self.b or w % self.b or h == 0 or w == 0:
            raise DomainError(f"map {h}x{w} is not divisible into {self.b}x{self.b} blocks")

    @property
    def mesh_vertices(self) -> int:
        """Vertices per mesh axis inside one block."""
        return self.b // self.s + 1


@dataclass(frozen=True)
class TransformKey:
    key: int

    def __post_init__(self):
        if not 0 <= self.key <= MASK64:
            raise DomainError("key must be a 64-bit unsigned integer")

    @property
    def hex(self) -> str:
        return f"{self.key:016x}"

    @classmethod
    def from_hex(cls, text: str) -> "TransformKey":
        if len(text) != 16:
            raise FormatError(f"key_hex must be 16 hex chars, got {len(text)}")
        try:
            return cls(int(text, 16))
        except ValueError as exc:
            raise FormatError(f"key_hex is not hexadecimal: {text!r}") from exc


@dataclass(frozen=True, eq=False)
class BwrPlan:
    """Expanded keyed randomness for one (key, params, map size).

    ``vertex_offsets`` has shape (n_blocks, V, V, 2) holding (dx, dy) per
    mesh vertex, V = b/s + 1. ``slot_assignment[T]`` indexes ``selected``.
    """

    n_blocks: int
    vertex_offsets: np.ndarray
    selected: tuple[int, ...]
    slot_assignment: tuple[int, ...]

    def __eq__(self, other):
        if not isinstance(other, BwrPlan):
            return NotImplemented
        return (
            self.n_blocks == other.n_blocks
            and self.selected == other.selected
            and self.slot_assignment == other.slot_assignment
            and np.array_equal(self.vertex_offsets, other.vertex_offsets)
        )

    def source_blocks(self) -> list[int]:
        """Source block index feeding each output slot."""
        return [self.selected[i] for i in self.slot_assignment]

    @classmethod
    def identity(cls, params: BwrParams, h: int, w: int) -> "BwrPlan":
        params.check_shape(h, w)
        n = (h // params.b) * (w // params.b)
        v = params.mesh_vertices
        return cls(n, np.zeros((n, v, v, 2)), tuple(range(n)), tuple(range(n)))


def n_selected(params: BwrParams, n_blocks: int) -> int:
    return max(1, math.floor(params.r * n_blocks))


def derive_plan(key: TransformKey, params: BwrParams, h: int, w: int) -> BwrPlan:
    params.check_shape(h, w)
    n_blocks = (h // params.b) * (w // params.b)
    v = params.mesh_vertices
    reach = params.o * params.s

    warp = SplitMix64(key.key ^ WARP_DOMAIN)
    offsets = np.zeros((n_blocks, v, v, 2))
    for t in range(n_blocks):
        for i in range(1, v - 1):
            for j in range(1, v - 1):
                ux = warp.uniform()
                uy = warp.uniform()
                if params.symmetric_offsets:
                    ux, uy = 2.0 * ux - 1.0, 2.0 * uy - 1.0
                offsets[t, i, j] = (ux * reach, uy * reach)

    n_s = n_selected(params, n_blocks)
    order = SplitMix64(key.key ^ SELECT_DOMAIN).shuffle(list(range(n_blocks)))
    selected = tuple(order[:n_s])

    mapper = SplitMix64(key.key ^ MAP_DOMAIN)
    slots = mapper.shuffle(list(range(n_blocks)))
    assignment = [0] * n_blocks
    for rank, slot in enumerate(slots):
        assignment[slot] = rank if rank < n_s else mapper.below(n_s)

    offsets.setflags(write=False)
    return BwrPlan(n_blocks, offsets, selected, tuple(assignment))


def warp_coordinates(offsets: np.ndarray, params: BwrParams) -> tuple[np.ndarray, np.ndarray]:
    """Source (x, y) for every pixel of a warped block.

    Output pixel ``(cx*s + tx, cy*s + ty)`` is the node ``(tx, ty)`` of cell
    ``(cx, cy)``; its source is the matching node of the warped quad
    B1 B2 B3 B4, i.e. the intersection of the ``tx``-th and ``ty``-th node
    lines, which is the bilinear blend of the four warped vertices.
    """
    b, s = params.b, params.s
    v = params.mesh_vertices
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (v, v, 2):
        raise DomainError(f"mesh offsets must have shape {(v, v, 2)}, got {offsets.shape}")
    grid = np.arange(v, dtype=np.float64) * s
    vx = grid[None, :] + offsets[..., 0]
    vy = grid[:, None] + offsets[..., 1]

    pix = np.arange(b)
    cell, node = pix // s, pix % s
    frac = node / s
    cy, cx = cell[:, None], cell[None, :]
    fy, fx = frac[:, None], frac[None, :]

    def blend(vert):
        b1 = vert[cy, cx]
        b2 = vert[cy, cx + 1]
        b3 = vert[cy + 1, cx + 1]
        b4 = vert[cy + 1, cx]
        # M1 on B1B4, M2 on B2B3 at row fraction fy; P on M1M2 at column fraction fx
        m1 = b1 + (b4 - b1) * fy
        m2 = b2 + (b3 - b2) * fy
        return m1 + (m2 - m1) * fx

    return blend(vx), blend(vy)


def warp_block(block: FeatureMap, offsets: np.ndarray, params: BwrParams) -> FeatureMap:
    if block.height != params.b or block.width != params.b:
        raise DomainError(f"block must be {params.b}x{params.b}, got {block.height}x{block.width}")
    xs, ys = warp_coordinates(offsets, params)
    return FeatureMap(sample_bilinear(block.data, xs, ys).astype(np.float32))


def apply_plan(fmap: FeatureMap, plan: BwrPlan, params: BwrParams) -> FeatureMap:
    c, h, w = fmap.shape
    params.check_shape(h, w)
    b = params.b
    cols = w // b
    if plan.n_blocks != (h // b) * cols:
        raise DomainError("plan does not match the map's block grid")

    blocks = fmap.data.reshape(c, h // b, b, cols, b).transpose(1, 3, 0, 2, 4).reshape(-1, c, b, b)
    warped = {}
    for src in sorted(set(plan.selected)):
        offs = plan.vertex_offsets[src]
        if not offs.any():
            warped[src] = blocks[src]
            continue
        xs, ys = warp_coordinates(offs, params)
        warped[src] = sample_bilinear(blocks[src], xs, ys).astype(np.float32)

    out = np.empty_like(fmap.data)
    for slot, idx in enumerate(plan.slot_assignment):
        row, col = divmod(slot, cols)
        out[:, row * b : (row + 1) * b, col * b : (col + 1) * b] = warped[plan.selected[idx]]
    return FeatureMap(out)


def protect(fmap: FeatureMap, key: TransformKey, params: BwrParams) -> FeatureMap:
    plan = derive_plan(key, params, fmap.height, fmap.width)
    return apply_plan(fmap, plan, params)


def save_key(path, key: TransformKey, params: BwrParams) -> None:
    doc = {
        "key_hex": key.hex,
        "params": {"b": params.b, "s": params.s, "o": params.o, "r": params.r},
        "symmetric_offsets": params.symmetric_offsets,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_key(path) -> tuple[TransformKey, BwrParams]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read key file {path}: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) - {"key_hex", "params", "symmetric_offsets"}:
        raise FormatError("key file must hold key_hex, params and symmetric_offsets only")
    try:
        p = doc["params"]
        if set(p) != {"b", "s", "o", "r"}:
            raise FormatError("key params must be exactly {b, s, o, r}")
        params = BwrParams(
            int(p["b"]), int(p["s"]), float(p["o"]), float(p["r"]),
            bool(doc.get("symmetric_offsets", False)),
        )
        key = TransformKey.from_hex(str(doc["key_hex"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed key file: {exc}") from exc
    except DomainError as exc:
        raise FormatError(f"invalid key params: {exc}") from exc
    return key, params
