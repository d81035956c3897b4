import itertools
import logging
import random
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from blindrank.ingestion import RankValue
from blindrank.testset import (REGIONS, TIERS, ExcludedFromUniverse, TestSetSpec, UniverseMember,
                               allocate_with_capacity, assign_tier, build_testset, consensus_rank,
                               filter_for_system, largest_remainder, read_testset, region_for, write_testset)


@pytest.mark.parametrize("ranks, expected", [({"QS": 5, "THE": 7}, 6.0), ({"THE": 3}, 3.0),
                                             ({"QS": 10, "THE": 20, "ARWU": 400}, 20.0),
                                             ({"QS": None, "THE": RankValue(601, 800)}, 700.5)])
def test_consensus(ranks, expected):
    assert consensus_rank(ranks).rank == expected


def test_consensus_all_null():
    with pytest.raises(ExcludedFromUniverse):
        consensus_rank({"QS": None, "THE": None})


@pytest.mark.parametrize("rank, tier", [(1, "Elite"), (25, "Elite"), (25.5, "Strong"), (150, "Strong"),
                                        (150.5, "Mid"), (400, "Mid"), (401, "Lower"), (700, "Lower"),
                                        (700.5, "Tail"), (701, "Tail"), (1e6, "Tail")])
def test_tier_boundaries(rank, tier):
    assert assign_tier(rank) == tier


def test_tier_rejects_below_one():
    with pytest.raises(ValueError):
        assign_tier(0.5)


@given(st.floats(1, 1e7))
def test_tier_partition_total(r):
    assert assign_tier(r) in TIERS


def test_region_map():
    assert region_for("us") == "North America"
    assert region_for("JP") == "Asia-Pacific"
    assert region_for("ZZ") == "Mixed"


def lr_oracle(total, shares):
    """Exact-fraction largest remainder."""
    keys = list(shares)
    w = sum(Fraction(shares[k]).limit_denominator(10 ** 9) for k in keys)
    q = {k: total * Fraction(shares[k]).limit_denominator(10 ** 9) / w for k in keys}
    seats = {k: int(q[k]) for k in keys}
    order = sorted(keys, key=lambda k: (-(q[k] - seats[k]), keys.index(k)))
    for k in order[: total - sum(seats.values())]:
        seats[k] += 1
    return seats


@given(st.integers(0, 1000), st.lists(st.integers(1, 100), min_size=1, max_size=6))
def test_largest_remainder_matches_oracle(total, weights):
    shares = {f"r{i}": w for i, w in enumerate(weights)}
    got = largest_remainder(total, shares)
    assert sum(got.values()) == total
    assert got == lr_oracle(total, shares)


def test_capacity_spill():
    got = allocate_with_capacity(10, {"a": 0.5, "b": 0.5}, {"a": 2, "b": 100})
    assert got == {"a": 2, "b": 8}
    assert allocate_with_capacity(10, {"a": 0.5, "b": 0.5}, {"a": 1, "b": 2}) == {"a": 1, "b": 2}


def universe(n_per_tier=120, seed=1):
    rng = random.Random(seed)
    ranks = {"Elite": (1, 25), "Strong": (26, 150), "Mid": (151, 400), "Lower": (401, 700), "Tail": (701, 2000)}
    out = []
    for t, (lo, hi) in ranks.items():
        for i in range(n_per_tier):
            out.append(UniverseMember(f"{t}-{i}", f"I{len(out)}", rng.uniform(lo, hi), rng.choice(REGIONS)))
    return out


def test_build_500():
    members = build_testset(universe(), TestSetSpec(500, seed=3))
    assert len(members) == 500
    for t in TIERS:
        assert sum(m.tier == t for m in members) == 100
    assert len({m.name for m in members}) == 500


def test_deterministic_and_seed_sensitive():
    u = universe()
    a = build_testset(u, TestSetSpec(100, seed=1))
    assert a == build_testset(list(reversed(u)), TestSetSpec(100, seed=1))
    assert a != build_testset(u, TestSetSpec(100, seed=2))


def test_toy_universe_allocation():
    rng = random.Random(5)
    u = [UniverseMember(f"U{i}", f"I{i}", 1 + (i % 5) * 200, REGIONS[rng.randrange(5)]) for i in range(50)]
    spec = TestSetSpec(25, seed=0)
    members = build_testset(u, spec)
    for t in TIERS:
        cap = {r: sum(1 for m in u if m.tier == t and m.region == r) for r in REGIONS}
        quota = min(5, sum(cap.values()))
        want = allocate_with_capacity(quota, spec.region_shares, cap)
        for r in REGIONS:
            got = sum(1 for m in members if m.tier == t and m.region == r)
            assert abs(got - want[r]) <= 1


def test_shortfall_warns(caplog):
    u = [UniverseMember(f"U{i}", f"I{i}", 5, "Europe") for i in range(3)]
    with caplog.at_level(logging.WARNING):
        members = build_testset(u, TestSetSpec(50))
    assert len(members) == 3 and "below quota" in caplog.text


def test_spec_validation():
    with pytest.raises(ValueError):
        TestSetSpec(tier_shares={"Elite": 0.5})


def test_file_roundtrip_and_filter(tmp_path):
    members = build_testset(universe(20), TestSetSpec(40, seed=2))
    p = tmp_path / "ts.csv"
    write_testset(members, p)
    assert read_testset(p) == members
    assert p.read_text().splitlines()[0] == "name,openalex_id,tier,region,consensus_rank,seed"
    keep = [m.name for m in itertools.islice(members, 0, 40, 2)]
    assert [m.name for m in filter_for_system(members, keep)] == keep
