import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blindrank import pipeline as pl
from blindrank.anonymization import LeakDetector, anonymize, build_profile
from blindrank.backends import (BackendConfig, BackendError, BackendUnavailable, ChatCompletionsBackend,
                                KnnBaselineBackend, ScriptedBackend, load_backend)
from blindrank.estimates import EstimateRange
from blindrank.ingestion import GroundTruthEntry, GroundTruthTable, RankValue
from blindrank.ranking_store import REFUSAL_MESSAGE, RankingStore, hide

import oracles
from synthetic import make_raw, make_world

FIRST = {"estimates": {"THE": {"rankMin": 300, "rankMax": 420, "confidence": "low", "rationale": "first"}}}
FETCH = {"tool_calls": [{"name": "get_ranking_samples",
                         "arguments": {"system": "THE", "rankMin": 300, "rankMax": 400, "count": 5}}]}
FINAL = {"rankMin": 340, "rankMax": 380, "confidence": "medium", "rationale": "peers"}


@pytest.fixture(scope="module")
def world():
    return make_world(100)


def anon_for(store, raw, seed=0):
    return anonymize(build_profile(raw, store.benchmarks), seed)


def test_stage1_passthrough(world):
    store, raws, _ = world
    be = ScriptedBackend({"stage1": [FIRST]})
    init = pl.stage1_estimate(anon_for(store, raws[0]), be, ("THE",))
    assert init["THE"] == EstimateRange(300, 420, "low", "first")
    assert init.attempts == 1 and init.flags == {}
    assert be.calls[0].tools is None


def test_stage1_inverted_range_reasked_then_fails(world):
    store, raws, _ = world
    bad = {"estimates": {"THE": {"rankMin": 500, "rankMax": 100}}}
    be = ScriptedBackend({"stage1": [bad]})
    with pytest.raises(pl.StageFailure) as exc:
        pl.stage1_estimate(anon_for(store, raws[0]), be, ("THE",))
    assert exc.value.stage == "stage1" and len(be.calls) == 3
    assert "not valid" in be.calls[1].messages[-1]["content"]


def test_stage1_recovers_on_reask(world):
    store, raws, _ = world
    be = ScriptedBackend({"stage1": ["not json at all", FIRST]})
    init = pl.stage1_estimate(anon_for(store, raws[0]), be, ("THE",))
    assert init.attempts == 2 and init["THE"].rank_min == 300


def test_stage1_partial_failure_gets_flagged_prior(world):
    store, raws, _ = world
    be = ScriptedBackend({"stage1": [{"THE": {"rankMin": 10, "rankMax": 30}}]})
    init = pl.stage1_estimate(anon_for(store, raws[0]), be, ("THE", "QS"), view=store.full_view())
    assert (init["QS"].rank_min, init["QS"].rank_max) == (1, pl.DEFAULT_SYSTEM_SIZE)
    assert init.flags == {"QS": [pl.FLAG_PRIOR]}
    init = pl.stage1_estimate(anon_for(store, raws[0]), be, ("QS", "THE"), view=store.full_view())
    assert init["THE"].rank_max == 30


def test_stage2_scripted_two_steps(world):
    store, raws, _ = world
    view = hide(store, raws[0].display_name)
    be = ScriptedBackend({"stage2": [FETCH, FINAL]})
    tr = pl.stage2_calibrate("THE", anon_for(store, raws[0]), EstimateRange(300, 420), view, be)
    assert tr.step_count == 2 and tr.completed
    assert tr.final.width == 40 and tr.final.midpoint == 360 and tr.width_target_met
    assert [s.kind for s in tr.steps] == ["tool", "final"]
    call = tr.steps[0].tool_calls[0]
    assert call["name"] == "get_ranking_samples" and len(call["result"]) == 16


def test_stage2_refusal_is_fed_back(world):
    store, raws, _ = world
    target = raws[10].display_name
    view = hide(store, target)
    ask = {"tool_calls": [{"name": "compute_metrics", "arguments": {"universityName": target}}]}
    be = ScriptedBackend({"stage2": [ask, FINAL]})
    tr = pl.stage2_calibrate("THE", anon_for(store, raws[10]), EstimateRange(1, 50), view, be)
    assert tr.completed and tr.refusals == 1
    tool_msg = [m for m in be.calls[1].messages if m["role"] == "tool"][0]
    assert json.loads(tool_msg["content"])["message"] == REFUSAL_MESSAGE
    assert view.leakage_attempts == [target]


def test_stage2_final_may_leave_initial(world):
    store, raws, _ = world
    be = ScriptedBackend({"stage2": [{"rankMin": 900, "rankMax": 930}]})
    tr = pl.stage2_calibrate("THE", anon_for(store, raws[0]), EstimateRange(1, 50), store.full_view(), be)
    assert tr.final.rank_min == 900


def test_stage2_wide_final_flagged(world):
    store, raws, _ = world
    be = ScriptedBackend({"stage2": [{"rankMin": 328, "rankMax": 383}]})
    tr = pl.stage2_calibrate("THE", anon_for(store, raws[0]), EstimateRange(300, 420), store.full_view(), be)
    assert tr.final.midpoint == 355.5 and tr.final.width == 55
    assert not tr.width_target_met and pl.FLAG_WIDTH_UNMET in tr.flags


def test_stage2_step_and_tool_budgets(world):
    store, raws, _ = world
    be = ScriptedBackend({"stage2": [{"content": '{"rankMin": 200, "rankMax": 240}', **FETCH}]})
    tr = pl.stage2_calibrate("THE", anon_for(store, raws[0]), EstimateRange(300, 420), store.full_view(), be)
    assert tr.step_count == pl.MAX_STEPS and tr.tool_calls == pl.MAX_TOOL_CALLS
    assert not tr.completed and tr.final == EstimateRange(200, 240)
    assert pl.FLAG_BUDGET in tr.flags and pl.FLAG_TOOL_BUDGET in tr.flags


def test_stage2_budget_without_proposal_keeps_initial(world):
    store, raws, _ = world
    be = ScriptedBackend({"stage2": [FETCH]})
    tr = pl.stage2_calibrate("THE", anon_for(store, raws[0]), EstimateRange(300, 420), store.full_view(), be)
    assert tr.final == EstimateRange(300, 420) and pl.FLAG_BUDGET in tr.flags


def test_stage2_invalid_three_times(world):
    store, raws, _ = world
    be = ScriptedBackend({"stage2": ["nope"]})
    tr = pl.stage2_calibrate("THE", anon_for(store, raws[0]), EstimateRange(300, 420), store.full_view(), be)
    assert [s.kind for s in tr.steps] == ["invalid"] * 3 and tr.final == EstimateRange(300, 420)


def test_stage2_skipped_without_tools(world):
    store, raws, _ = world
    be = ScriptedBackend({"stage2": [FINAL]}, supports_tools=False)
    tr = pl.stage2_calibrate("THE", anon_for(store, raws[0]), EstimateRange(300, 420), store.full_view(), be)
    assert tr.final == EstimateRange(300, 420) and pl.FLAG_SKIPPED in tr.flags and be.calls == []


def test_report_sections_and_provenance(world):
    store, raws, _ = world
    res = pl.run_pipeline(raws[20].display_name, store, KnnBaselineBackend(), seed=1)
    assert res.ok and res.evaluation_mode
    assert res.report.missing_sections == [] and len(pl.REPORT_SECTIONS) == 7
    profile = build_profile(raws[20], store.benchmarks)
    nums = pl.profile_numbers(profile, res.initial.ranges, res.calibrated)
    peers = [p for tr in res.traces.values() for p in tr.peers]
    assert any(ch.isdigit() for p in peers for ch in p)
    assert pl.unsupported_values(res.report.text, nums, peers + [profile.name]) == []
    assert pl.unsupported_values("rank 1234.5 here", nums) == ["1234.5"]


def test_report_states_missing_influential_data():
    store, raws, _ = make_world(40, enriched=False)
    res = pl.run_pipeline(raws[5].display_name, store, KnnBaselineBackend())
    body = res.report.sections[pl.REPORT_SECTIONS[4]]
    assert "missing" in body


def test_report_failure_keeps_estimates(world):
    store, raws, _ = world
    be = ScriptedBackend({"stage1": [FIRST], "stage2": [FINAL], "stage3": [BackendError("boom")]})
    res = pl.run_pipeline(raws[1].display_name, store, be)
    assert res.ok and res.report is None and pl.FLAG_NO_REPORT in res.flags
    assert res.calibrated["THE"] == EstimateRange.from_dict(FINAL)


def test_unavailable_backend_propagates(world):
    store, raws, _ = world
    be = ScriptedBackend({"stage1": [BackendUnavailable("down")]})
    with pytest.raises(BackendUnavailable):
        pl.run_pipeline(raws[1].display_name, store, be)


def test_stage_failure_tagged(world):
    store, raws, _ = world
    res = pl.run_pipeline(raws[1].display_name, store, ScriptedBackend({"stage1": ["{}"]}))
    assert not res.ok and res.failed_stage == "stage1" and res.traces == {}


def test_deterministic_runs(world):
    store, raws, _ = world
    a = pl.run_pipeline(raws[30].display_name, store, KnnBaselineBackend(), seed=9)
    b = pl.run_pipeline(raws[30].display_name, store, KnnBaselineBackend(), seed=9)
    assert a.to_json() == b.to_json()


def test_prompts_never_leak(world):
    store, raws, _ = world
    raw = raws[42]
    be = ScriptedBackend({"stage1": [FIRST], "stage2": [FETCH, FINAL], "stage3": ["# r\n"]})
    res = pl.run_pipeline(raw.display_name, store, be)
    assert res.ok
    det = LeakDetector(raw)
    for req in be.calls:
        if req.stage == "stage3":
            continue
        text = json.dumps(req.messages, ensure_ascii=False)
        assert all(r.passed for r in det.scan(text).values())
        for res_ in (json.loads(m["content"]) for m in req.messages if m["role"] == "tool"):
            assert raw.display_name not in {s["name"] for s in res_.get("samples", [])}


def test_estimation_only_mode(world):
    store, _, _ = world
    outsider = make_raw(500, 0.7, name="Unranked Institute of Somewhere")
    res = pl.run_pipeline(outsider, store, KnnBaselineBackend(), published_ranks={"THE": "12"})
    assert res.ok and not res.evaluation_mode
    d = res.to_dict()
    assert "actual" not in json.dumps(d) and d["calibration"]["THE"]["final"] is not None


def test_every_trace_within_step_budget(world):
    store, raws, _ = world
    for i in (0, 33, 66, 99):
        res = pl.run_pipeline(raws[i].display_name, store, KnnBaselineBackend(), with_report=False)
        assert all(t.step_count <= pl.MAX_STEPS for t in res.traces.values())


# -- k-NN baseline -----------------------------------------------------------

def test_knn_k1_zero_width(world):
    store, raws, _ = world
    view = hide(store, raws[50].display_name)
    est = pl.baseline_estimate(anon_for(store, raws[50]), view, k=1)
    assert est.width == 0 and est.rank_min in (50, 52)


def test_knn_elite_profile(world):
    store, raws, _ = world
    est = pl.baseline_estimate(anon_for(store, raws[2]), hide(store, raws[2].display_name), k=5)
    assert est.midpoint <= 50


def test_knn_matches_bruteforce(world):
    store, raws, _ = world
    view = hide(store, raws[40].display_name)
    pop = view.cached_population("THE")
    X = np.vstack([fv.as_array() for _, fv in pop])
    target = anon_for(store, raws[40]).features.as_array()
    cols = [c for c in range(X.shape[1]) if np.isfinite(target[c]) and np.all(np.isfinite(X[:, c]))]
    got = pl.knn_neighbours(target[cols], X[:, cols], 5)
    want = oracles.knn_bruteforce(list(target[cols]), X[:, cols].tolist(), 5)
    assert list(got) == want
    rows = [pop[i][0].representative for i in want]
    assert pl.baseline_estimate(anon_for(store, raws[40]), view, k=5) == \
        EstimateRange(min(rows), max(rows), "medium" if max(rows) - min(rows) > 40 else "high",
                      "5 nearest neighbours in THE")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(-5, 5), min_size=3, max_size=3), min_size=3, max_size=12),
       st.lists(st.integers(-5, 5), min_size=3, max_size=3), st.integers(1, 4))
def test_knn_property(rows, target, k):
    X = np.array(rows, float)
    if not (X.std(axis=0) > 0).any():
        with pytest.raises(ValueError):
            pl.knn_neighbours(np.array(target, float), X, k)
        return
    got = list(pl.knn_neighbours(np.array(target, float), X, k))
    assert got == oracles.knn_bruteforce(target, rows, k)[:len(got)]


def test_knn_errors(world):
    store, raws, _ = world
    with pytest.raises(ValueError):
        pl.baseline_estimate(anon_for(store, raws[0]), store.full_view(), k=0)
    with pytest.raises(KeyError):
        pl.baseline_estimate(anon_for(store, raws[0]), store.full_view(), system="QS")
    bare = RankingStore({"THE": GroundTruthTable("THE", 2025, [GroundTruthEntry("A", "US", RankValue.point(1))])})
    with pytest.raises(ValueError):
        pl.baseline_estimate(anon_for(store, raws[0]), bare.full_view())


# -- remote backend ----------------------------------------------------------

def chat_handler(seen):
    def handle(request):
        body = json.loads(request.content)
        seen.append(body)
        if body["messages"][-1]["content"] == "down":
            return httpx.Response(503)
        if body["messages"][-1]["content"] == "empty":
            return httpx.Response(200, json={"choices": []})
        if body.get("tools"):
            return httpx.Response(200, json={"choices": [{"message": {"content": None, "tool_calls": [
                {"id": "t1", "type": "function", "function": {"name": "compute_metrics",
                                                              "arguments": '{"universityName": "X"}'}}]}}],
                "usage": {"prompt_tokens": 10, "completion_tokens": 3}})
        return httpx.Response(200, json={"choices": [{"message": {"content": '{"rankMin": 1, "rankMax": 2}'}}]})
    return handle


def remote(seen):
    cfg = BackendConfig("https://llm.test/v1", "some-model", api_key="k", seed=5)
    return ChatCompletionsBackend(cfg, http=httpx.Client(transport=httpx.MockTransport(chat_handler(seen))),
                                  sleep=lambda s: None)


def test_chat_backend_wire_format():
    seen = []
    be = remote(seen)
    reply = be.complete(pl.BackendRequest("stage2", "THE", [{"role": "user", "content": "hi"}],
                                          [{"type": "function"}], None, {"view": object()}))
    assert reply.tool_calls[0].arguments == {"universityName": "X"} and reply.usage["prompt_tokens"] == 10
    assert seen[0]["seed"] == 5 and seen[0]["reasoning_effort"] == "medium" and "context" not in seen[0]
    reply = be.complete(pl.BackendRequest("stage1", None, [{"role": "user", "content": "hi"}]))
    assert reply.content.startswith("{") and seen[1]["response_format"] == {"type": "json_object"}


def test_chat_backend_errors():
    be = remote([])
    with pytest.raises(BackendUnavailable):
        be.complete(pl.BackendRequest("stage1", None, [{"role": "user", "content": "down"}]))
    with pytest.raises(BackendError):
        be.complete(pl.BackendRequest("stage1", None, [{"role": "user", "content": "empty"}]))


def test_backend_config_env_override(tmp_path):
    p = tmp_path / "b.json"
    p.write_text(json.dumps({"url": "https://a", "model": "m1", "unknown": 1}))
    cfg = BackendConfig.load(p, env={"BLINDRANK_MODEL": "m2", "BLINDRANK_REASONING_EFFORT": "high"})
    assert (cfg.url, cfg.model, cfg.reasoning_effort) == ("https://a", "m2", "high")
    with pytest.raises(ValueError):
        BackendConfig.load(None, env={})
    assert isinstance(load_backend("knn"), KnnBaselineBackend)
