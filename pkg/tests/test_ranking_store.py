import copy
import threading

import pytest
from hypothesis import given, settings, strategies as st

from blindrank.bibliometrics import compute_features
from blindrank.ingestion import GroundTruthEntry, GroundTruthTable, RankValue
from blindrank.ranking_store import (REFUSAL_MESSAGE, LeakageRefusal, RankingStore, UnknownUniversityError,
                                     execute_tool, hide, verify_hidden)

from synthetic import make_world


@pytest.fixture(scope="module")
def world():
    return make_world(100)


def sweep(view, system="THE", step=10, count=20):
    """Union of every sample returned over consecutive windows covering [1, N]."""
    seen = set()
    n = view.store.system_size(system)
    for lo in range(1, n + 1, step):
        for e in view.get_ranking_samples(system, lo, lo + step - 1, count):
            seen.add(e.name)
    return seen


def test_hide_cardinality(world):
    store, raws, _ = world
    view = hide(store, raws[4].display_name)
    assert len(store) == 100 and len(view) == 99


def test_sweep_excludes_target(world):
    store, raws, _ = world
    name = raws[37].display_name
    got = sweep(hide(store, name))
    assert name not in got and len(got) == 99


def test_restoration(world):
    store, raws, _ = world
    before = copy.deepcopy(store.fingerprint())
    for r in raws[:10]:
        v = hide(store, r.display_name)
        v.get_ranking_samples("THE", 1, 100, 20)
        with pytest.raises(LeakageRefusal):
            v.compute_metrics(r.display_name)
        del v
    assert store.fingerprint() == before


def test_hide_unknown(world):
    with pytest.raises(UnknownUniversityError):
        hide(world[0], "Nowhere University")


def test_verify_hidden(world):
    store, raws, _ = world
    u, v = raws[3].display_name, raws[4].display_name
    view = hide(store, u)
    assert verify_hidden(view, u)
    assert verify_hidden(view, u.upper())
    assert not verify_hidden(view, v)
    assert view.leakage_attempts == []


def test_case_and_diacritic_variants_hidden():
    t = GroundTruthTable("THE", 2025, [GroundTruthEntry("Université Laval", "CA", RankValue.point(1)),
                                       GroundTruthEntry("Other", "CA", RankValue.point(2))])
    store = RankingStore({"THE": t})
    view = hide(store, "UNIVERSITE   laval")
    assert verify_hidden(view, "Université Laval")
    assert [e.name for e in view.visible_entries("THE")] == ["Other"]


def test_samples_basic(world):
    store = world[0]
    rows = store.full_view().get_ranking_samples("THE", 1, 10, 3)
    assert len(rows) == 3 and all(1 <= r.representative <= 10 for r in rows)
    rows = store.full_view().get_ranking_samples("THE", 30, 40, 5)
    ranks = [r.representative for r in rows]
    assert len(rows) == 5 and ranks == sorted(ranks)


def test_samples_exclude_hidden(world):
    store, raws = world[0], world[1]
    view = hide(store, raws[4].display_name)  # rank 5
    rows = view.get_ranking_samples("THE", 1, 10, 10)
    assert raws[4].display_name not in {r.name for r in rows} and len(rows) == 9


def test_samples_deterministic_and_errors(world):
    view = world[0].full_view()
    assert view.get_ranking_samples("THE", 1, 100, 7, seed=3) == view.get_ranking_samples("THE", 1, 100, 7, seed=3)
    assert view.get_ranking_samples("THE", 500, 600, 3) == []
    with pytest.raises(ValueError):
        view.get_ranking_samples("THE", 10, 5, 3)
    with pytest.raises(ValueError):
        view.get_ranking_samples("THE", 1, 5, 0)


def test_compute_metrics_paths(world):
    store, raws, _ = world
    view = hide(store, raws[0].display_name)
    assert view.compute_metrics(raws[1].display_name) == compute_features(raws[1], store.benchmarks)
    with pytest.raises(LeakageRefusal):
        view.compute_metrics(raws[0].display_name.lower())
    assert view.leakage_attempts == [raws[0].display_name.lower()]
    with pytest.raises(UnknownUniversityError):
        view.compute_metrics("Nowhere")


def test_cached_features_take_precedence(world):
    store, raws, _ = world
    fv = compute_features(raws[5])
    cached = RankingStore({"THE": GroundTruthTable("THE", 2025, [GroundTruthEntry(raws[5].display_name, "US",
                                                                                  RankValue.point(1))])},
                          features={raws[5].display_name: fv})
    assert cached.full_view().compute_metrics(raws[5].display_name) is fv


def test_concurrent_views_isolated(world):
    store, raws, _ = world
    errors = []

    def worker(i):
        name = raws[i].display_name
        v = hide(store, name)
        got = sweep(v, step=25, count=25)
        if name in got or len(got) != 99:
            errors.append(i)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(0, 100, 7)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []


def test_tool_wire_layer(world):
    store, raws, _ = world
    view = hide(store, raws[2].display_name)
    out = execute_tool(view, "get_ranking_samples", '{"system": "THE", "rankMin": 1, "rankMax": 5, "count": 5}')
    assert [s["rankValue"] for s in out["samples"]] == [1.0, 2.0, 4.0, 5.0]
    assert execute_tool(view, "compute_metrics", {"universityName": raws[2].display_name}) == \
        {"error": "refused", "message": REFUSAL_MESSAGE}
    assert execute_tool(view, "compute_metrics", {"universityName": "Nope"})["error"] == "not_found"
    assert execute_tool(view, "compute_metrics", "{not json")["error"] == "invalid_arguments"
    assert execute_tool(view, "get_ranking_samples", {"system": "QS", "rankMin": 1, "rankMax": 2,
                                                      "count": 1})["error"] == "invalid_arguments"
    assert execute_tool(view, "delete_everything", {})["error"] == "unknown_tool"


def test_banded_entries_returned_with_flag():
    t = GroundTruthTable("THE", 2025, [GroundTruthEntry("A", "US", RankValue.point(1)),
                                       GroundTruthEntry("B", "US", RankValue(601, 800))])
    rows = RankingStore({"THE": t}).full_view().get_ranking_samples("THE", 600, 800, 5)
    assert rows[0].to_tool_dict()["isBand"] and rows[0].representative == 700.5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 99), st.integers(1, 40), st.integers(1, 20))
def test_property_never_returns_hidden(world, idx, step, count):
    store, raws, _ = world
    name = raws[idx].display_name
    assert name not in sweep(hide(store, name), step=step, count=count)
