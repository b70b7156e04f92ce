"""Matching scores and cancelable-biometrics evaluation metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .fmap import FeatureMap

SCORE_LABELS = ("genuine", "impostor", "pseudo_impostor", "mated", "non_mated")


@dataclass
class ScoreSet:
    genuine: list = field(default_factory=list)
    impostor: list = field(default_factory=list)
    pseudo_impostor: list | None = None
    mated: list | None = None
    non_mated: list | None = None

    def __post_init__(self):
        for name in SCORE_LABELS:
            vals = getattr(self, name)
            if vals is not None and not np.all(np.isfinite(np.asarray(vals, dtype=float))):
                raise DomainError(f"{name} scores must be finite")


def _flat(fmap) -> np.ndarray:
    data = fmap.data if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    return data.astype(np.float64).reshape(-1)


def cosine_score(a, b) -> float:
    va, vb = _flat(a), _flat(b)
    if va.shape != vb.shape or np.shape(getattr(a, "data", a)) != np.shape(getattr(b, "data", b)):
        raise DomainError("templates must have identical dims")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cannot score a zero-norm template")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def roc_eer(scores: ScoreSet):
    """Threshold sweep over all distinct scores.

    Returns ``(roc, eer, threshold)`` where ``roc`` is a list of
    ``(far, frr, threshold)`` rows in ascending threshold order. A final
    threshold just above the largest score closes the curve at FAR = 0.
    """
    gen = np.sort(np.asarray(scores.genuine, dtype=np.float64))
    imp = np.sort(np.asarray(scores.impostor, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise DomainError("genuine and impostor scores must be non-empty")
    thr = np.unique(np.concatenate([gen, imp]))
    thr = np.append(thr, np.nextafter(thr[-1], np.inf))
    far = (imp.size - np.searchsorted(imp, thr, side="left")) / imp.size
    frr = np.searchsorted(gen, thr, side="left") / gen.size
    roc = [(float(a), float(r), float(t)) for a, r, t in zip(far, frr, thr)]

    diff = far - frr
    exact = np.flatnonzero(diff == 0)
    if exact.size:
        k = exact[0]
        return roc, float(far[k]), float(thr[k])
    # diff starts >= 0 (FAR = 1 at the lowest score) and ends < 0
    k = int(np.flatnonzero(diff < 0)[0])
    t = diff[k - 1] / (diff[k - 1] - diff[k])
    eer = far[k - 1] + t * (far[k] - far[k - 1])
    threshold = thr[k - 1] + t * (thr[k] - thr[k - 1])
    return roc, float(eer), float(threshold)


def far_at(impostor, threshold: float) -> float:
    imp = np.asarray(impostor, dtype=np.float64)
    return float(np.mean(imp >= threshold))


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = (a.as_tuple() if hasattr(a, "as_tuple") else a)
    bx0, by0, bx1, by1 = (b.as_tuple() if hasattr(b, "as_tuple") else b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union) if union > 0 else 0.0


def _pooled_ranks(mated, non_mated):
    pooled = np.concatenate([mated, non_mated])
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(pooled.size)
    ranks[order] = np.arange(pooled.size, dtype=np.float64)
    # ties share their mean rank
    _, inv, counts = np.unique(pooled, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, weights=ranks)
    ranks = (sums / counts)[inv]
    return ranks[: mated.size], ranks[mated.size :]


def dsys_curve(mated, non_mated, n_bins: int = 100, binning: str = "score"):
    """Histogram estimate of the local measure D(s).

    Returns ``(bin_edges, p_mated, p_non_mated, d_local)`` with densities
    Laplace-smoothed by one count per bin and equal priors.
    """
    m = np.sort(np.asarray(mated, dtype=np.float64))
    nm = np.sort(np.asarray(non_mated, dtype=np.float64))
    if m.size == 0 or nm.size == 0:
        raise DomainError("mated and non-mated scores must be non-empty")
    if n_bins < 2:
        raise DomainError("n_bins must be >= 2")
    if binning == "rank":
        m, nm = _pooled_ranks(m, nm)
    elif binning != "score":
        raise DomainError(f"unknown binning {binning!r}")
    lo = min(m[0], nm[0])
    hi = max(m[-1], nm[-1])
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    width = edges[1] - edges[0]
    cm = np.histogram(m, bins=edges)[0]
    cn = np.histogram(nm, bins=edges)[0]
    pm = (cm + 1.0) / ((m.size + n_bins) * width)
    pn = (cn + 1.0) / ((nm.size + n_bins) * width)
    lr = pm / pn
    d = np.maximum(0.0, (lr - 1.0) / (lr + 1.0))
    return edges, pm, pn, d


def dsys(mated, non_mated, n_bins: int = 100, binning: str = "score") -> float:
    """Global linkability: integral of p(s|mated) * D(s) over score bins."""
    edges, pm, _, d = dsys_curve(mated, non_mated, n_bins, binning)
    width = edges[1] - edges[0]
    return float(np.clip(np.sum(pm * d) * width, 0.0, 1.0))


def decidability(dist1, dist2) -> float:
    a = np.asarray(dist1, dtype=np.float64)
    b = np.asarray(dist2, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DomainError("decidability needs >= 2 scores per distribution")
    gap = abs(a.mean() - b.mean())
    pooled = math.sqrt(0.5 * (a.var(ddof=1) + b.var(ddof=1)))
    if pooled == 0.0:
        return math.inf if gap > 0 else 0.0
    return float(gap / pooled)


def piamr(attack_templates, enrolled_protected, threshold: float) -> float:
    """Fraction of unprotected attack templates whose best protected match is accepted."""
    if len(attack_templates) == 0 or len(enrolled_protected) == 0:
        raise DomainError("attack and enrolled template lists must be non-empty")
    accepted = 0
    for attack in attack_templates:
        best = max(cosine_score(attack, enrolled) for enrolled in enrolled_protected)
        accepted += best >= threshold
    return accepted / len(attack_templates)


def write_scores_csv(path, scores: ScoreSet) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["pair_id", "label", "score"])
        n = 0
        for label in SCORE_LABELS:
            for s in getattr(scores, label) or ():
                out.writerow([n, label, repr(float(s))])
                n += 1


def read_scores_csv(path) -> ScoreSet:
    buckets = {label: [] for label in SCORE_LABELS}
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["pair_id", "label", "score"]:
                raise FormatError(f"scores CSV header must be pair_id,label,score, got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3 or row[1] not in buckets:
                    raise FormatError(f"bad scores row {lineno}: {row}")
                val = float(row[2])
                if not math.isfinite(val):
                    raise FormatError(f"non-finite score on row {lineno}")
                buckets[row[1]].append(val)
    except (OSError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"cannot read scores {path}: {exc}") from exc
    return ScoreSet(
        buckets["genuine"], buckets["impostor"],
        buckets["pseudo_impostor"] or None, buckets["mated"] or None, buckets["non_mated"] or None,
    )


def write_roc_csv(path, roc) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["threshold", "far", "frr"])
        for far, frr, thr in roc:
            out.writerow([repr(thr), repr(far), repr(frr)])
