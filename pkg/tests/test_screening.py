import dataclasses

import numpy as np
import pytest

from gridshed.env import GridEnv, Scenario
from gridshed.sampling import SamplingConfig, hierarchical_lhs
from gridshed.screening import (CYCLE_S, DATASET_HEADER, ScenarioDataset,
                                Screener, build_datasets, compute_cct,
                                load_dataset, rank_and_sample_contingencies,
                                zone_of_bus)

from conftest import FIXTURE_CCT_CYCLES, RING_BUSES


@pytest.fixture(scope="module")
def screener(base_case):
    return Screener(base_case)


def test_cct_matches_exhaustive_scan(base_case, screener):
    """Bisection must agree with the definition: the longest duration on the
    cycle grid that survives without control, found here by scanning."""
    for bus in (4, 9):
        stable_ns = [n for n in range(1, 31)
                     if screener.stable(base_case.case_id, bus, n * CYCLE_S)]
        scan_cct = max(stable_ns) * CYCLE_S
        r = compute_cct(screener, bus, case_id=base_case.case_id)
        assert abs(r.cct_s - scan_cct) <= CYCLE_S + 1e-12
        assert not r.below_range and not r.above_range
        assert round(r.cct_s / CYCLE_S) == FIXTURE_CCT_CYCLES[bus]


def test_cct_fixture_table(base_case, screener):
    for bus in (1, 2, 7, 10):
        r = compute_cct(screener, bus, case_id=base_case.case_id)
        assert round(r.cct_s / CYCLE_S) == FIXTURE_CCT_CYCLES[bus]


def test_cct_below_range(base_case, screener):
    """With a resolution coarser than the true CCT, even one step fails."""
    r = compute_cct(screener, 4, resolution=0.4, max_duration=1.2,
                    case_id=base_case.case_id)
    assert r.below_range and not r.above_range
    assert r.cct_s == 0.0
    assert r.n_rollouts == 1


def test_cct_above_range(base_case, screener):
    """With a ceiling below the true CCT, even the longest duration survives."""
    r = compute_cct(screener, 9, max_duration=5 * CYCLE_S,
                    case_id=base_case.case_id)
    assert r.above_range and not r.below_range
    assert r.cct_s == pytest.approx(5 * CYCLE_S)
    assert r.n_rollouts == 2


def test_cct_shrinks_with_motor_load(base_case):
    """10% heavier motor load must not lengthen any CCT; on this grid it
    strictly shortens the two probed buses."""
    heavy = dataclasses.replace(
        base_case,
        loads=tuple(dataclasses.replace(ld, p0=ld.p0 * 1.1)
                    if ld.motor is not None else ld for ld in base_case.loads),
        case_id="mini-south-heavy")
    scr = Screener(heavy)
    expect = {1: 7, 7: 8}
    for bus, cycles in expect.items():
        r = compute_cct(scr, bus, case_id="mini-south-heavy")
        assert round(r.cct_s / CYCLE_S) == cycles
        assert r.cct_s < FIXTURE_CCT_CYCLES[bus] * CYCLE_S


def test_label_matches_zero_action_reward(base_case, spec, screener):
    """The alignment contract: a scenario is labeled benign exactly when a
    zero-action episode in the full environment (relays armed) scores 0.0."""
    env = GridEnv(base_case, spec)
    for bus, cycles in [(4, 8), (4, 9), (8, 11), (8, 12)]:
        dur = cycles * CYCLE_S
        label = not screener.stable(base_case.case_id, bus, dur)
        env.reset(Scenario(f"al-{bus}-{cycles}", base_case.case_id, bus, dur))
        total, done = 0.0, False
        while not done:
            _, rb, done, _ = env.step(np.zeros(spec.act_dim))
            total += rb.total
        if label:
            assert total < 0.0
        else:
            assert total == 0.0


def test_zone_of_bus_borrowing(base_case):
    assert zone_of_bus(base_case, 101) == "navarro"
    assert zone_of_bus(base_case, 213) == "bosque"
    # unzoned ring buses borrow the nearest zone; ties resolve alphabetically
    assert zone_of_bus(base_case, 3) == "navarro"
    assert zone_of_bus(base_case, 4) == "navarro"
    assert zone_of_bus(base_case, 7) == "bosque"
    with pytest.raises(KeyError):
        zone_of_bus(base_case, 999)


def test_rank_covers_zones_and_severity_bands(base_case, screener):
    rng = np.random.default_rng(0)
    cands = [3, 4, 7, 9, 10]
    pairs = rank_and_sample_contingencies(
        base_case, cands, 4, rng, durations_per_bus=2, screener=screener)
    assert len(pairs) == 8
    chosen = [b for b, _ in pairs[::2]]
    assert len(set(chosen)) == 4
    # navarro has exactly two candidates: both must be taken
    assert {3, 4} <= set(chosen)
    # bosque's lone high-severity band member is bus 10 (shortest CCT band
    # is {7, 9}; members sort by CCT so 10 sits alone in the top band)
    assert 10 in set(chosen)
    assert len({7, 9} & set(chosen)) == 1
    for b, d in pairs:
        cycles = d / CYCLE_S
        assert 3 - 1e-9 <= cycles <= 25 + 1e-9
        assert abs(cycles - round(cycles)) < 1e-9
    # per-bus durations are drawn without replacement
    for b in set(chosen):
        ds = [d for bb, d in pairs if bb == b]
        assert len(set(ds)) == len(ds) == 2


def test_rank_takes_all_candidates_when_asked(base_case, screener):
    rng = np.random.default_rng(1)
    cands = [3, 4, 9, 10]
    pairs = rank_and_sample_contingencies(
        base_case, cands, 4, rng, screener=screener)
    assert sorted(b for b, _ in pairs) == sorted(cands)


def test_rank_validation(base_case, screener):
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        rank_and_sample_contingencies(base_case, [3, 4], 3, rng, screener=screener)
    with pytest.raises(ValueError):
        rank_and_sample_contingencies(base_case, [3, 4], 0, rng, screener=screener)


@pytest.fixture(scope="module")
def small_pool(base_case):
    rep = hierarchical_lhs(base_case, SamplingConfig(n_cases=4, seed=3))
    return rep.cases


def test_build_datasets_disjoint(base_case, small_pool):
    buses = [4, 4, 8, 8]
    durs = [8 * CYCLE_S, 18 * CYCLE_S, 3 * CYCLE_S, 20 * CYCLE_S]
    train, test = build_datasets(small_pool, buses, durs, seed=5)
    assert not (train.case_ids & test.case_ids)
    assert not (train.fault_buses & test.fault_buses)
    # every case of a role pairs with every (bus, duration) owned by the role
    assert len(train) == len(train.case_ids) * 2
    assert len(test) == len(test.case_ids) * 2
    assert len(train.case_ids) + len(test.case_ids) == 4
    # the same counting rule at production scale
    assert 140 * 100 == 14000
    assert 280 * 200 == 56000
    assert len(train.scenarios) == len(set(s.scenario_id for s in train.scenarios))


def test_build_datasets_labels_match_screener(base_case, small_pool):
    buses = [4, 8]
    durs = [18 * CYCLE_S, 3 * CYCLE_S]
    train, test = build_datasets(small_pool, buses, durs, seed=5)
    scr = Screener(small_pool)
    for ds in (train, test):
        for s, lab in zip(ds.scenarios, ds.requires_shedding):
            assert lab == (not scr.stable(s.case_id, s.fault_bus, s.fault_duration))


def test_dataset_csv_roundtrip(tmp_path, small_pool):
    buses = [4, 8]
    durs = [9 * CYCLE_S, 11 * CYCLE_S]
    train, _ = build_datasets(small_pool, buses, durs, seed=5)
    p = tmp_path / "train.csv"
    train.to_csv(p)
    header = p.read_text().splitlines()[0]
    assert header.split(",") == DATASET_HEADER
    back = load_dataset(p, role="train", seed=5)
    assert back.scenarios == train.scenarios  # exact, durations included
    assert back.requires_shedding == train.requires_shedding


def test_dataset_label_lookup(small_pool):
    train, _ = build_datasets(small_pool, [4, 8], [9 * CYCLE_S, 11 * CYCLE_S],
                              seed=5)
    sid = train.scenarios[0].scenario_id
    assert train.label_of(sid) == train.requires_shedding[0]
    with pytest.raises(KeyError):
        train.label_of("nope")


def test_build_datasets_validation(base_case, small_pool):
    with pytest.raises(ValueError, match="parallel"):
        build_datasets(small_pool, [4, 8], [0.1], seed=0)
    with pytest.raises(ValueError, match="sum to 1"):
        build_datasets(small_pool, [4, 8], [0.1, 0.1], split=(0.7, 0.5), seed=0)
    with pytest.raises(ValueError, match="non-empty disjoint"):
        build_datasets(small_pool[:1], [4, 8], [0.1, 0.1], seed=0)
    with pytest.raises(ValueError, match="non-empty disjoint"):
        build_datasets(small_pool, [4, 4], [0.1, 0.2], seed=0)
    with pytest.raises(ValueError, match="duplicate"):
        build_datasets([small_pool[0], small_pool[0]], [4, 8], [0.1, 0.1], seed=0)
    with pytest.raises(ValueError):
        ScenarioDataset("train", (Scenario("a", "c", 4, 0.1),), (), 0)


def test_dataset_bit_identical_across_runs(small_pool, tmp_path):
    buses = [4, 8]
    durs = [9 * CYCLE_S, 11 * CYCLE_S]
    a_train, a_test = build_datasets(small_pool, buses, durs, seed=5)
    b_train, b_test = build_datasets(small_pool, buses, durs, seed=5)
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    a_train.to_csv(pa)
    b_train.to_csv(pb)
    assert pa.read_bytes() == pb.read_bytes()
    assert a_test.scenarios == b_test.scenarios
