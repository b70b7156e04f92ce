import json
import math

import pytest

from veinbwr import synth
from veinbwr.errors import DomainError
from veinbwr.scenario import SCENARIOS, enrolled_key, random_params, run_scenario


def test_random_params_are_valid_and_strong():
    seen = set()
    for seed in range(300):
        p = random_params(seed, 32, 64)
        n = (32 // p.b) * (64 // p.b)
        assert math.lgamma(n + 1) / math.log(2) >= 64
        assert p.b % p.s == 0 and 2 <= p.s <= p.b // 2
        assert 0 <= p.o < 1 and 0.5 < p.r <= 1
        seen.add((p.b, p.s))
    assert {b for b, _ in seen} == {4, 8}
    assert random_params(7, 32, 64) == random_params(7, 32, 64)
    assert random_params(7, 32, 64, symmetric=True).symmetric_offsets
    with pytest.raises(DomainError):
        random_params(0, 4, 4)


def test_enrolled_keys_differ_per_identity():
    keys = {enrolled_key(0, i) for i in range(100)}
    assert len(keys) == 100 and enrolled_key(0, 3) == enrolled_key(0, 3)


@pytest.fixture(scope="module")
def reports(small_dataset):
    return {s: run_scenario(small_dataset, s, n_keys=3, return_scores=True) for s in SCENARIOS}


def test_report_shape(reports):
    for name, (rep, scores) in reports.items():
        assert rep.scenario == name
        assert 0 <= rep.eer <= 1 and 0 <= rep.dsys <= 1 and 0 <= rep.piamr <= 1
        assert rep.counts["identities"] == 6 and rep.counts["samples"] == 24
        assert rep.counts["genuine"] == 6 * 6 == len(scores.genuine)
        assert rep.counts["impostor"] == 24 * 23 // 2 - 36
        # mated: ordered pairs of different samples of one identity, per system pair
        assert len(scores.mated) == 3 * 6 * 4 * 3
        assert len(scores.non_mated) == 3 * 24 * 20
        assert len(rep.systems) == 3
        doc = json.loads(rep.to_json())
        assert doc["scenario"] == name and len(doc["roc"]) == len(rep.roc)


def test_target_system_is_scenario_independent(reports):
    eers = {rep.eer for rep, _ in reports.values()}
    assert len(eers) == 1


def test_stolen_key_is_linkable(reports):
    assert reports["stolen_key"][0].dsys > reports["normal"][0].dsys
    assert all(s == reports["stolen_key"][0].systems[0] for s in reports["stolen_key"][0].systems)


def test_scenario_is_schedule_invariant(small_dataset, reports):
    rep, scores = run_scenario(small_dataset, "normal", n_keys=3, workers=4, return_scores=True)
    assert rep.to_json() == reports["normal"][0].to_json()
    assert scores.mated == reports["normal"][1].mated


def test_scenario_errors(small_dataset):
    with pytest.raises(DomainError):
        run_scenario(small_dataset, "stolen_everything")
    with pytest.raises(DomainError):
        run_scenario(small_dataset, "normal", n_keys=1)
    one_each = [s for s in small_dataset if s[1].identity == 0][:1] + \
        [s for s in small_dataset if s[1].identity == 1][:1]
    with pytest.raises(DomainError):
        run_scenario(one_each, "normal")
    with pytest.raises(DomainError):
        from veinbwr.bwr import BwrParams
        run_scenario(small_dataset, "normal", bwr_params=BwrParams(8, 4), out_hw=(20, 40))


def test_external_locator_is_used(small_dataset):
    from veinbwr.locator import fit_locator

    model = fit_locator(synth.synthesize(10, 3, 99))
    a = run_scenario(small_dataset, "normal", n_keys=2, model=model)
    b = run_scenario(small_dataset, "normal", n_keys=2)
    assert a.to_json() != b.to_json()
