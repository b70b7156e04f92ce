"""End-to-end protected-domain evaluation under the three threat scenarios.

Every sample goes locate -> compress once. The target system protects each
identity under its enrolled key with the target BWR parameters; genuine and
impostor scores, the EER threshold and rank-1 identification come from it.

Cross-matching uses ``n_keys`` systems per scenario:

* ``normal``: every per-identity key of every system comes with its own
  randomly drawn BWR parameters.
* ``stolen_params``: systems share the target parameters, keys are fresh.
* ``stolen_key``: systems share the target parameters and reuse each
  identity's enrolled key.

Mated scores pair two different samples of one identity in two different
systems (these also serve as the pseudo-impostor distribution); non-mated
scores pair different identities across systems.

Attacks (rank-1 / EER analog) present another identity's finger, protected
the way the scenario allows, against the enrolled gallery of a victim.
P-IAMR probes each victim's enrolled template with the victim's own
unprotected templates.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .bwr import BwrParams, TransformKey, protect
from .compressor import DeRConvParams, compress, make_stem
from .errors import DomainError
from .locator import RidgeRegressor, fit_locator, locate
from .metrics import ScoreSet, decidability, dsys, far_at, piamr, roc_eer
from .prng import SplitMix64, mix64

SCENARIOS = ("normal", "stolen_params", "stolen_key")
_SCENARIO_CODE = {"normal": 1, "stolen_params": 2, "stolen_key": 3}
_ENROLL = 0xE7
_SYSTEM = 0x5E
_ATTACK = 0xA7


@dataclass
class EvalReport:
    scenario: str
    eer: float
    threshold: float
    roc: list
    dsys: float
    d_gi: float
    d_gp: float
    d_ip: float
    piamr: float
    far_at_threshold: float
    genuine_rank1: float
    attack_rank1: float
    attack_eer: float
    counts: dict = field(default_factory=dict)
    systems: list = field(default_factory=list)  # per system: BWR params of each identity

    def to_json(self) -> str:
        doc = asdict(self)
        doc["roc"] = [list(row) for row in self.roc]
        for k in ("d_gi", "d_gp", "d_ip"):
            if math.isinf(doc[k]):
                doc[k] = "inf"
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def enrolled_key(master_seed: int, identity: int) -> TransformKey:
    return TransformKey(mix64(master_seed, _ENROLL, identity))


def random_params(seed: int, h: int, w: int, symmetric: bool = False) -> BwrParams:
    """BWR parameters drawn uniformly from the valid set for an h x w map.

    Only block sizes whose block count gives at least 2**64 orderings are
    eligible, so the remapping is never weaker than the 64-bit key.
    """
    rng = SplitMix64(seed)
    sizes = [b for b in range(4, min(h, w) + 1)
             if h % b == 0 and w % b == 0 and _log2_factorial((h // b) * (w // b)) >= 64]
    if not sizes:
        raise DomainError(f"no block size for {h}x{w} gives 2**64 block orderings")
    b = sizes[rng.below(len(sizes))]
    meshes = [s for s in range(2, b // 2 + 1) if b % s == 0]
    s = meshes[rng.below(len(meshes))]
    o = rng.uniform()
    r = 0.5 + 0.5 * (1.0 - rng.uniform())
    return BwrParams(b, s, o, r, symmetric)


def _log2_factorial(n: int) -> float:
    return math.lgamma(n + 1) / math.log(2)


def _unit_rows(templates) -> np.ndarray:
    flat = np.stack([t.data.reshape(-1) for t in templates]).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("cannot score a zero-norm template")
    return flat / norms


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def run_scenario(
    samples,
    scenario: str,
    n_keys: int = 5,
    master_seed: int = 0,
    bwr_params: BwrParams | None = None,
    derconv: DeRConvParams | None = None,
    out_hw: tuple[int, int] = (32, 64),
    model: RidgeRegressor | None = None,
    grid: tuple[int, int] = (8, 16),
    lam: float = 1.0,
    n_bins: int = 100,
    workers: int = 1,
    return_scores: bool = False,
):
    """Evaluate a dataset of (Image, GroundTruth) pairs under one scenario.

    Returns an :class:`EvalReport`, or ``(report, ScoreSet)`` when
    ``return_scores`` is set.
    """
    if scenario not in SCENARIOS:
        raise DomainError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    if n_keys < 2:
        raise DomainError("cross-matching needs n_keys >= 2")
    samples = list(samples)
    target = bwr_params or BwrParams()
    derconv = derconv or DeRConvParams.init(64, master_seed)
    stem = make_stem(derconv.in_channels, derconv.init_seed if derconv.init_seed is not None
                     else master_seed)
    labels = np.array([t.identity for _, t in samples])
    idents = sorted(set(labels.tolist()))
    members = {x: np.flatnonzero(labels == x) for x in idents}
    if len(idents) < 2 or any(len(m) < 2 for m in members.values()):
        raise DomainError("need >= 2 identities with >= 2 samples each")
    index_of = {x: i for i, x in enumerate(idents)}

    if model is None:
        model = fit_locator(samples, grid, lam)

    def stage(item):
        img, _ = item
        return compress(img, locate(model, img), derconv, *out_hw, stem=stem)

    comp = _map(stage, samples, workers)
    h, w = comp[0].height, comp[0].width
    target.check_shape(h, w)
    n = len(samples)

    def protect_all(keys, params):
        # params: one BwrParams for all samples, or one per sample
        per = params if isinstance(params, list) else [params] * n
        return _map(lambda k: protect(comp[k], keys[k], per[k]), range(n), workers)

    # target system
    enroll = [enrolled_key(master_seed, index_of[x]) for x in labels.tolist()]
    T0 = _unit_rows(protect_all(enroll, target))
    S0 = T0 @ T0.T
    iu = np.triu_indices(n, 1)
    same = labels[iu[0]] == labels[iu[1]]
    genuine = S0[iu][same]
    impostor = S0[iu][~same]
    roc, eer, threshold = roc_eer(ScoreSet(genuine, impostor))

    gallery = np.array([members[x][0] for x in idents])
    probes = np.array([k for x in idents for k in members[x][1:]])
    best = np.argmax(S0[np.ix_(probes, gallery)], axis=1)
    genuine_rank1 = float(np.mean(np.array(idents)[best] == labels[probes]))

    # cross-matching systems
    code = _SCENARIO_CODE[scenario]
    systems, cross = [], []
    for p in range(n_keys):
        if scenario == "normal":
            drawn = {x: random_params(mix64(master_seed, _SYSTEM, code, p, index_of[x], 1), h, w,
                                      target.symmetric_offsets) for x in idents}
            params = [drawn[x] for x in labels.tolist()]
        else:
            drawn = {x: target for x in idents}
            params = target
        if scenario == "stolen_key":
            keys = enroll
        else:
            keys = [TransformKey(mix64(master_seed, _SYSTEM, code, p, index_of[x]))
                    for x in labels.tolist()]
        systems.append([{"b": q.b, "s": q.s, "o": q.o, "r": q.r} for q in drawn.values()])
        cross.append(_unit_rows(protect_all(keys, params)))

    diff_sample = ~np.eye(n, dtype=bool)
    same_id = labels[:, None] == labels[None, :]
    mated, non_mated = [], []
    for p in range(n_keys):
        for q in range(p + 1, n_keys):
            S = cross[p] @ cross[q].T
            mated.append(S[same_id & diff_sample])
            non_mated.append(S[~same_id])
    mated = np.concatenate(mated)
    non_mated = np.concatenate(non_mated)
    pseudo = mated

    # attacks: the next identity's finger aimed at each victim
    attack_scores, hits = [], []
    for x in idents:
        victim = index_of[x]
        attacker = idents[(victim + 1) % len(idents)]
        rows = members[attacker]
        if scenario == "normal":
            params = random_params(mix64(master_seed, _ATTACK, victim), h, w,
                                   target.symmetric_offsets)
        else:
            params = target
        if scenario == "stolen_key":
            key = enroll[members[x][0]]
        else:
            key = TransformKey(mix64(master_seed, _ATTACK, code, victim))
        A = _unit_rows([protect(comp[k], key, params) for k in rows])
        attack_scores.append((A @ T0[members[x]].T).ravel())
        hits.append(np.array(idents)[np.argmax(A @ T0[gallery].T, axis=1)] == x)
    attack_scores = np.concatenate(attack_scores)
    attack_rank1 = float(np.mean(np.concatenate(hits)))
    _, attack_eer, _ = roc_eer(ScoreSet(genuine, attack_scores))

    # pre-image attack: unprotected probes against the victim's enrolled template
    accepted = 0.0
    for x in idents:
        probe_maps = [comp[k] for k in members[x][1:]]
        accepted += piamr(probe_maps, [protect(comp[members[x][0]], enroll[members[x][0]], target)],
                          threshold) * len(probe_maps)
    p_iamr = accepted / len(probes)

    report = EvalReport(
        scenario=scenario,
        eer=eer,
        threshold=threshold,
        roc=roc,
        dsys=dsys(mated, non_mated, n_bins),
        d_gi=decidability(genuine, impostor),
        d_gp=decidability(genuine, pseudo),
        d_ip=decidability(impostor, pseudo),
        piamr=p_iamr,
        far_at_threshold=far_at(impostor, threshold),
        genuine_rank1=genuine_rank1,
        attack_rank1=attack_rank1,
        attack_eer=attack_eer,
        counts={
            "identities": len(idents), "samples": n, "genuine": int(genuine.size),
            "impostor": int(impostor.size), "mated": int(mated.size),
            "non_mated": int(non_mated.size), "attacks": int(sum(h.size for h in hits)),
        },
        systems=systems,
    )
    if return_scores:
        return report, ScoreSet(genuine.tolist(), impostor.tolist(), pseudo.tolist(),
                                mated.tolist(), non_mated.tolist())
    return report
