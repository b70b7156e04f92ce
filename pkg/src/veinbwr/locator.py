"""ROI box and rotation regression from grid-pooled intensities.

Features are per-cell means of the image on a ``grid_h x grid_w`` grid,
scaled to [0, 1]. A ridge regressor maps them (plus a bias) directly to the
five targets ``(x_min, y_min, x_max, y_max, phi)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, SingularSystemError
from .fmap import Image

N_TARGETS = 5
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class RoiPrediction:
    box: tuple[float, float, float, float]
    phi: float

    def to_json(self) -> dict:
        return {"box": list(self.box), "phi": self.phi}

    @classmethod
    def from_json(cls, doc) -> "RoiPrediction":
        try:
            box = tuple(float(v) for v in doc["box"])
            if len(box) != 4:
                raise FormatError("prediction box must have 4 coordinates")
            return cls(box, float(doc["phi"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed prediction: {exc}") from exc


@dataclass(frozen=True, eq=False)
class RidgeRegressor:
    """Weights of shape (feature_dim + 1, 5); the last row is the bias."""

    weights: np.ndarray
    lam: float
    feature_dim: int
    grid: tuple[int, int] = (8, 16)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.shape != (self.feature_dim + 1, N_TARGETS):
            raise DomainError(f"weights shape {w.shape} != {(self.feature_dim + 1, N_TARGETS)}")
        if not np.all(np.isfinite(w)) or self.lam < 0:
            raise DomainError("weights must be finite and lambda >= 0")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def predict_raw(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.feature_dim:
            raise DomainError(f"feature dim {x.shape[-1]} != model dim {self.feature_dim}")
        return x @ self.weights[:-1] + self.weights[-1]

    def save(self, path) -> None:
        doc = {
            "lambda": self.lam,
            "feature_dim": self.feature_dim,
            "grid": list(self.grid),
            "weights": self.weights.reshape(-1).tolist(),
        }
        Path(path).write_text(json.dumps(doc) + "\n")

    @classmethod
    def load(cls, path) -> "RidgeRegressor":
        try:
            doc = json.loads(Path(path).read_text())
            d = int(doc["feature_dim"])
            w = np.asarray(doc["weights"], dtype=np.float64).reshape(d + 1, N_TARGETS)
            grid = tuple(int(g) for g in doc["grid"])
            return cls(w, float(doc["lambda"]), d, grid)
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"cannot load locator model {path}: {exc}") from exc


def cell_edges(n: int, cells: int) -> np.ndarray:
    return (np.arange(cells + 1) * n) // cells


def pool_features(image: Image, grid_h: int = 8, grid_w: int = 16) -> np.ndarray:
    h, w = image.height, image.width
    if not (1 <= grid_h <= h and 1 <= grid_w <= w):
        raise DomainError(f"grid {grid_h}x{grid_w} does not fit image {h}x{w}")
    ye, xe = cell_edges(h, grid_h), cell_edges(w, grid_w)
    data = image.data.astype(np.float64)
    # integral image gives every cell sum in one gather
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = data.cumsum(0).cumsum(1)
    sums = ii[ye[1:, None], xe[None, 1:]] - ii[ye[:-1, None], xe[None, 1:]] \
        - ii[ye[1:, None], xe[None, :-1]] + ii[ye[:-1, None], xe[None, :-1]]
    area = np.diff(ye)[:, None] * np.diff(xe)[None, :]
    return (sums / area / 255.0).reshape(-1)


def ridge_fit(X, Y, lam: float = 1.0, grid: tuple[int, int] = (8, 16)) -> RidgeRegressor:
    """Closed-form minimizer of sum ||y - W^T [x; 1]||^2 + lam ||W_x||^2.

    The bias row is not regularized.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0] or X.shape[0] < 1:
        raise DomainError(f"inconsistent shapes X{X.shape}, Y{Y.shape}")
    if Y.shape[1] != N_TARGETS:
        raise DomainError(f"targets must have {N_TARGETS} columns")
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    reg = np.full(d + 1, float(lam))
    reg[-1] = 0.0
    G = A.T @ A + np.diag(reg)
    if np.linalg.cond(G) > _COND_LIMIT:
        raise SingularSystemError("normal equations are singular; use lambda > 0")
    W = np.linalg.solve(G, A.T @ Y)
    return RidgeRegressor(W, float(lam), d, tuple(grid))


def ridge_objective(W, X, Y, lam: float) -> float:
    A = np.hstack([np.asarray(X, float), np.ones((len(X), 1))])
    resid = np.asarray(Y, float) - A @ W
    return float((resid**2).sum() + lam * (np.asarray(W)[:-1] ** 2).sum())


def repair_box(box, bounds: tuple[int, int]) -> tuple[float, float, float, float]:
    """Swap inverted coordinates and clamp into the image, keeping >= 1 px extent."""
    h, w = bounds
    x0, y0, x1, y1 = (float(v) for v in box)
    x0, x1 = min(x0, x1), max(x0, x1)
    y0, y1 = min(y0, y1), max(y0, y1)

    def clamp_span(lo, hi, size):
        lo = min(max(lo, 0.0), size - 1.0)
        hi = min(max(hi, lo + 1.0), float(size))
        return lo, hi

    x0, x1 = clamp_span(x0, x1, w)
    y0, y1 = clamp_span(y0, y1, h)
    return (x0, y0, x1, y1)


def predict_roi(model: RidgeRegressor, features, bounds: tuple[int, int] = (256, 320)) -> RoiPrediction:
    out = model.predict_raw(features)
    if out.ndim != 1:
        raise DomainError("predict_roi takes a single feature vector")
    return RoiPrediction(repair_box(out[:4], bounds), float(out[4]))


def smooth_l1(pred, truth) -> float:
    e = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64))
    return float(np.where(e < 1.0, 0.5 * e * e, e - 0.5).sum())


def rotation_map(phi: float, x: float, y: float) -> tuple[float, float]:
    c, s = math.cos(phi), math.sin(phi)
    return (x * c - y * s, x * s + y * c)


def fit_locator(samples, grid: tuple[int, int] = (8, 16), lam: float = 1.0) -> RidgeRegressor:
    """Fit on (Image, GroundTruth) pairs."""
    X = np.stack([pool_features(img, *grid) for img, _ in samples])
    Y = np.array([[*t.box, t.angle] for _, t in samples])
    return ridge_fit(X, Y, lam, grid)


def locate(model: RidgeRegressor, image: Image) -> RoiPrediction:
    return predict_roi(model, pool_features(image, *model.grid), (image.height, image.width))
