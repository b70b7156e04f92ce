"""Deterministic synthetic finger-vein images with ground-truth ROI and pose.

The canonical image is 256x320 with a horizontal finger band. Its region of
interest is the band inset by 4 px, a 128x256 rectangle in which each
identity's vessel polylines live. A pose rotates the finger about the image
center and shifts it; the ground truth box is the canonical ROI moved with the
finger center, and the ground-truth angle is the correction that undoes the
rotation (``rotate_fmap(crop, angle)`` restores the upright ROI).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .fmap import Image, read_pgm, write_pgm
from .prng import mix64

IMAGE_H, IMAGE_W = 256, 320
FRAME_H, FRAME_W = 128, 256
ROI_INSET = 4
# canonical ROI box (x_min, y_min, x_max, y_max) in pixel-edge coordinates
CANONICAL_BOX = (32.0, 64.0, 288.0, 192.0)
BAND = (
    CANONICAL_BOX[0] - ROI_INSET,
    CANONICAL_BOX[1] - ROI_INSET,
    CANONICAL_BOX[2] + ROI_INSET,
    CANONICAL_BOX[3] + ROI_INSET,
)
MAX_SHIFT = 10.0
MAX_ROTATION = math.radians(10.0)
NOISE_SIGMA = 8.0

_BACKGROUND = 24.0
_FINGER = 190.0
_EDGE_SOFTNESS = 1.5


@dataclass(frozen=True, eq=False)
class VeinPattern:
    identity_seed: int
    polylines: tuple  # of (k, 2) float arrays holding (x, y) in the 128x256 frame
    widths: tuple  # Gaussian profile sigma per vessel, pixels
    depths: tuple  # fractional attenuation at the vessel core

    def __eq__(self, other):
        if not isinstance(other, VeinPattern):
            return NotImplemented
        return (
            self.identity_seed == other.identity_seed
            and self.widths == other.widths
            and self.depths == other.depths
            and len(self.polylines) == len(other.polylines)
            and all(np.array_equal(a, b) for a, b in zip(self.polylines, other.polylines))
        )


@dataclass(frozen=True)
class GroundTruth:
    box: tuple[float, float, float, float]
    angle: float
    identity: int


@dataclass(frozen=True)
class Pose:
    dx: float
    dy: float
    rotation: float  # radians, content rotation applied to the canonical finger


def generate_identity(seed: int) -> VeinPattern:
    rng = np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, 0x1D])
    lines, widths, depths = [], [], []

    n_main = int(rng.integers(3, 6))
    lanes = np.sort(rng.uniform(12, FRAME_H - 12, size=n_main))
    for lane in lanes:
        n_pts = int(rng.integers(5, 9))
        xs = np.linspace(0, FRAME_W, n_pts) + np.r_[0, rng.uniform(-12, 12, n_pts - 2), 0]
        ys = lane + np.cumsum(rng.normal(0, 9, n_pts))
        lines.append(np.column_stack([np.clip(xs, 0, FRAME_W), np.clip(ys, 2, FRAME_H - 2)]))

    for _ in range(int(rng.integers(2, 6))):
        parent = lines[int(rng.integers(len(lines)))]
        k = int(rng.integers(1, len(parent) - 1))
        start = parent[k]
        length = rng.uniform(40, 110)
        angle = rng.choice([-1, 1]) * rng.uniform(0.5, 1.2) + rng.choice([0, math.pi])
        mid = start + 0.5 * length * np.array([math.cos(angle), math.sin(angle)])
        mid = mid + rng.normal(0, 6, 2)
        end = start + length * np.array([math.cos(angle), math.sin(angle)])
        pts = np.vstack([start, mid, end])
        pts[:, 0] = np.clip(pts[:, 0], 0, FRAME_W)
        pts[:, 1] = np.clip(pts[:, 1], 2, FRAME_H - 2)
        lines.append(pts)

    for i in range(len(lines)):
        main = i < n_main
        widths.append(float(rng.uniform(3.0, 5.0) if main else rng.uniform(2.0, 3.5)))
        depths.append(float(rng.uniform(0.35, 0.5) if main else rng.uniform(0.25, 0.4)))
    return VeinPattern(seed, tuple(lines), tuple(widths), tuple(depths))


def pose_from_seed(pose_seed: int) -> Pose:
    """Pose seed 0 is the canonical (identity) pose."""
    if pose_seed == 0:
        return Pose(0.0, 0.0, 0.0)
    rng = np.random.default_rng([pose_seed & 0xFFFFFFFF, pose_seed >> 32, 0x505])
    dx, dy = rng.uniform(-MAX_SHIFT, MAX_SHIFT, 2)
    return Pose(float(dx), float(dy), float(rng.uniform(-MAX_ROTATION, MAX_ROTATION)))


def _segment_distance2(px, py, a, b):
    dx, dy = b[0] - a[0], b[1] - a[1]
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        t = 0.0
    else:
        t = np.clip(((px - a[0]) * dx + (py - a[1]) * dy) / seg2, 0.0, 1.0)
    ex = px - (a[0] + t * dx)
    ey = py - (a[1] + t * dy)
    return ex * ex + ey * ey


def _vessel_transmission(pattern: VeinPattern, fx, fy):
    """Multiplicative attenuation at frame coordinates (fx, fy)."""
    trans = np.ones_like(fx)
    for pts, sigma, depth in zip(pattern.polylines, pattern.widths, pattern.depths):
        reach = 4.0 * sigma
        lo, hi = pts.min(axis=0) - reach, pts.max(axis=0) + reach
        near = (fx >= lo[0]) & (fx <= hi[0]) & (fy >= lo[1]) & (fy <= hi[1])
        if not near.any():
            continue
        qx, qy = fx[near], fy[near]
        d2 = np.full(qx.shape, np.inf)
        for a, b in zip(pts[:-1], pts[1:]):
            d2 = np.minimum(d2, _segment_distance2(qx, qy, a, b))
        trans[near] *= 1.0 - depth * np.exp(-d2 / (2.0 * sigma * sigma))
    return trans


def _band_profile(cx, cy):
    """Soft finger band in canonical image coordinates (pixel-center frame)."""

    def ramp(v, lo, hi):
        # pixel centers sit at v + 0.5 in edge coordinates
        v = v + 0.5
        return 1.0 / (1.0 + np.exp(-(v - lo) / _EDGE_SOFTNESS)) * (
            1.0 / (1.0 + np.exp((v - hi) / _EDGE_SOFTNESS))
        )

    return ramp(cx, BAND[0], BAND[2]) * ramp(cy, BAND[1], BAND[3])


def render_clean(pattern: VeinPattern, pose: Pose) -> np.ndarray:
    """Noise-free float rendering of a posed finger."""
    ys, xs = np.mgrid[0:IMAGE_H, 0:IMAGE_W].astype(np.float64)
    # pixel-edge coordinates of each pixel center, relative to the posed center
    ic_x, ic_y = IMAGE_W / 2.0, IMAGE_H / 2.0
    rx = xs + 0.5 - ic_x - pose.dx
    ry = ys + 0.5 - ic_y - pose.dy
    c, s = math.cos(pose.rotation), math.sin(pose.rotation)
    # inverse rotation back to the canonical finger
    qx = c * rx + s * ry + ic_x
    qy = -s * rx + c * ry + ic_y
    band = _band_profile(qx - 0.5, qy - 0.5)
    fx = qx - CANONICAL_BOX[0]
    fy = qy - CANONICAL_BOX[1]
    vessels = _vessel_transmission(pattern, fx, fy)
    return _BACKGROUND + (_FINGER - _BACKGROUND) * band * vessels


def pose_truth(pose: Pose, identity: int) -> GroundTruth:
    x0, y0, x1, y1 = CANONICAL_BOX
    box = (x0 + pose.dx, y0 + pose.dy, x1 + pose.dx, y1 + pose.dy)
    return GroundTruth(box, -pose.rotation, identity)


def render_sample(pattern: VeinPattern, pose_seed: int, identity: int | None = None):
    """Render one 256x320 capture; returns (Image, GroundTruth)."""
    pose = pose_from_seed(pose_seed)
    clean = render_clean(pattern, pose)
    rng = np.random.default_rng([pattern.identity_seed & 0xFFFFFFFF, pattern.identity_seed >> 32,
                                 pose_seed & 0xFFFFFFFF, pose_seed >> 32, 0x4E])
    theta = rng.uniform(0, 2 * math.pi)
    strength = rng.uniform(0.0, 0.15)
    ys, xs = np.mgrid[0:IMAGE_H, 0:IMAGE_W]
    proj = ((xs - IMAGE_W / 2) * math.cos(theta) + (ys - IMAGE_H / 2) * math.sin(theta)) / (IMAGE_W / 2)
    lit = clean * (1.0 + strength * proj)
    noisy = lit + rng.normal(0.0, NOISE_SIGMA, lit.shape)
    img = Image(np.clip(np.rint(noisy), 0, 255).astype(np.uint8))
    label = pattern.identity_seed if identity is None else identity
    return img, pose_truth(pose, label)


@dataclass(frozen=True)
class ManifestRow:
    file: str
    identity: int
    box: tuple[float, float, float, float]
    angle_rad: float

    def to_json(self) -> dict:
        return {"file": self.file, "identity": self.identity, "box": list(self.box),
                "angle_rad": self.angle_rad}

    @property
    def truth(self) -> GroundTruth:
        return GroundTruth(self.box, self.angle_rad, self.identity)


def identity_seed(master_seed: int, index: int) -> int:
    return mix64(master_seed, 0x1D, index)


def sample_pose_seed(master_seed: int, index: int, sample: int) -> int:
    return mix64(master_seed, 0x505E, index, sample) or 1


def synthesize(n_identities: int, samples_per_identity: int, master_seed: int, workers: int = 1):
    """In-memory dataset: list of (Image, GroundTruth) ordered by identity then sample."""
    if n_identities < 1 or samples_per_identity < 1:
        raise ValueError("counts must be >= 1")
    patterns = [generate_identity(identity_seed(master_seed, i)) for i in range(n_identities)]
    jobs = [(i, j) for i in range(n_identities) for j in range(samples_per_identity)]

    def one(job):
        i, j = job
        return render_sample(patterns[i], sample_pose_seed(master_seed, i, j), identity=i)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, jobs))
    return [one(job) for job in jobs]


def generate_dataset(n_identities: int, samples_per_identity: int, master_seed: int, out_dir,
                     workers: int = 1) -> list[ManifestRow]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = synthesize(n_identities, samples_per_identity, master_seed, workers)
    rows = []
    for k, (img, truth) in enumerate(samples):
        i, j = divmod(k, samples_per_identity)
        name = f"id{i:04d}_s{j:02d}.pgm"
        write_pgm(out / name, img)
        rows.append(ManifestRow(name, truth.identity, truth.box, truth.angle))
    write_manifest(out / "manifest.json", rows)
    return rows


def write_manifest(path, rows) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in rows], indent=1) + "\n")


def read_manifest(path) -> list[ManifestRow]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, list):
        raise FormatError("manifest must be a JSON array")
    rows = []
    for n, item in enumerate(doc):
        try:
            if set(item) != {"file", "identity", "box", "angle_rad"}:
                raise FormatError(f"manifest row {n} has fields {sorted(item)}")
            box = tuple(float(v) for v in item["box"])
            if len(box) != 4 or not (box[0] < box[2] and box[1] < box[3]):
                raise FormatError(f"manifest row {n} has an invalid box")
            rows.append(ManifestRow(str(item["file"]), int(item["identity"]), box,
                                    float(item["angle_rad"])))
        except (TypeError, ValueError, AttributeError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"manifest row {n} is malformed: {exc}") from exc
    return rows


def load_dataset(manifest_path) -> list[tuple[Image, GroundTruth]]:
    """Load images listed in a manifest (synthetic or externally supplied)."""
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    base = manifest_path.parent
    return [(read_pgm(base / r.file), r.truth) for r in rows]
