"""Estimator backends.

A backend answers one chat turn at a time. Messages use the chat-completions
shape (``role``/``content``/``tool_calls``), so the same conversation can go
to a remote endpoint or to one of the local deterministic backends.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Union

import httpx

from .ingestion import TransientError, _ApiClient

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """A backend turn failed; the pipeline records a stage failure."""


class BackendUnavailable(BackendError):
    """The backend is down. The harness halts the run instead of recording a failure."""


@dataclass(frozen=True)
class ToolCall:
    id: str
    name: str
    arguments: Mapping[str, Any]

    def to_message(self) -> dict:
        return {"id": self.id, "type": "function",
                "function": {"name": self.name, "arguments": json.dumps(self.arguments, sort_keys=True)}}


@dataclass
class BackendRequest:
    """One turn. ``context`` carries local objects for in-process backends;
    it never goes over the wire."""

    stage: str
    system: Optional[str]
    messages: List[dict]
    tools: Optional[List[dict]] = None
    seed: Optional[int] = None
    context: Dict[str, Any] = field(default_factory=dict)

    @property
    def turn(self) -> int:
        return sum(1 for m in self.messages if m["role"] == "assistant")


@dataclass
class BackendReply:
    content: Optional[str] = None
    tool_calls: List[ToolCall] = field(default_factory=list)
    usage: Dict[str, int] = field(default_factory=dict)

    def to_message(self) -> dict:
        msg: dict = {"role": "assistant", "content": self.content}
        if self.tool_calls:
            msg["tool_calls"] = [c.to_message() for c in self.tool_calls]
        return msg


class Backend:
    supports_tools = True
    deterministic = False
    name = "backend"

    def complete(self, request: BackendRequest) -> BackendReply:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"backend": self.name}


def tool_results(messages: Sequence[dict]) -> List[dict]:
    """Parsed payloads of the tool messages in a conversation, in order."""
    out = []
    for m in messages:
        if m["role"] == "tool":
            try:
                out.append(json.loads(m["content"]))
            except (TypeError, json.JSONDecodeError):
                out.append({"error": "unparseable"})
    return out


# ---------------------------------------------------------------------------
# Scripted

ScriptStep = Union[Mapping, str, Callable[[BackendRequest], Any]]


def _coerce_reply(step, request: BackendRequest) -> BackendReply:
    if callable(step):
        step = step(request)
    if isinstance(step, BackendReply):
        return step
    if isinstance(step, Exception):
        raise step
    if isinstance(step, str):
        return BackendReply(content=step)
    if "tool_calls" in step:
        calls = [c if isinstance(c, ToolCall) else
                 ToolCall(c.get("id", f"call_{request.turn}_{i}"), c["name"], dict(c.get("arguments", {})))
                 for i, c in enumerate(step["tool_calls"])]
        return BackendReply(step.get("content"), calls)
    return BackendReply(content=json.dumps(step))


class ScriptedBackend(Backend):
    """Replays canned replies keyed by stage or ``"stage2:<SYSTEM>"``.

    The reply for a turn is picked by how many assistant turns the
    conversation already has, so concurrent conversations do not interfere.
    A step may be a dict (serialized as JSON content, or a tool-call turn if
    it has ``tool_calls``), a string, an exception to raise, or a callable
    receiving the request. A script that runs out repeats its last step.
    """

    name = "scripted"
    deterministic = True

    def __init__(self, script: Mapping[str, Sequence[ScriptStep]], supports_tools: bool = True):
        self.script = {k: list(v) for k, v in script.items()}
        self.supports_tools = supports_tools
        self.calls: List[BackendRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: BackendRequest) -> BackendReply:
        with self._lock:
            self.calls.append(request)
        key = f"{request.stage}:{request.system}" if request.system else request.stage
        steps = self.script.get(key) or self.script.get(request.stage)
        if not steps:
            raise BackendError(f"no script for {key}")
        return _coerce_reply(steps[min(request.turn, len(steps) - 1)], request)


# ---------------------------------------------------------------------------
# Deterministic nearest-neighbour baseline

class KnnBaselineBackend(Backend):
    """Offline backend built on :func:`blindrank.pipeline.baseline_estimate`.

    Stage 2 follows the calibration procedure mechanically: fetch samples
    around the first-pass midpoint, pull their metrics, then recentre the
    range on a distance-weighted blend of the first-pass midpoint and the
    sample ranks.
    """

    name = "knn-baseline"
    deterministic = True

    def __init__(self, k: int = 5, samples: int = 3, width: float = 40.0, blend: float = 0.5):
        self.k = k
        self.samples = samples
        self.width = width
        self.blend = blend

    def describe(self) -> dict:
        return {"backend": self.name, "k": self.k, "samples": self.samples, "width": self.width,
                "blend": self.blend}

    def complete(self, request: BackendRequest) -> BackendReply:
        from . import pipeline

        ctx = request.context
        if request.stage == "stage1":
            out = {}
            for system in ctx["systems"]:
                est = pipeline.baseline_estimate(ctx["anon"], ctx["view"], self.k, system)
                out[system] = est.to_dict()
            return BackendReply(json.dumps({"estimates": out}))
        if request.stage == "stage2":
            return self._calibrate(request, ctx)
        if request.stage == "stage3":
            return BackendReply(pipeline.render_report(ctx["profile"], ctx["initial"], ctx["calibrated"],
                                                       ctx.get("peers", ())))
        raise BackendError(f"unknown stage {request.stage}")

    def _calibrate(self, request: BackendRequest, ctx) -> BackendReply:
        from .bibliometrics import FEATURE_NAMES

        initial = ctx["initial"]
        results = tool_results(request.messages)
        if request.turn == 0:
            half = max(self.width, initial.width) / 2
            lo = max(1, int(initial.midpoint - half))
            hi = max(lo, int(initial.midpoint + half + 0.5))
            return BackendReply(tool_calls=[ToolCall("c0", "get_ranking_samples",
                                                     {"system": request.system, "rankMin": lo, "rankMax": hi,
                                                      "count": self.samples})])
        samples = results[0].get("samples", []) if results else []
        if request.turn == 1 and samples:
            return BackendReply(tool_calls=[ToolCall(f"c1_{i}", "compute_metrics", {"universityName": s["name"]})
                                            for i, s in enumerate(samples)])
        target = ctx["anon"].features.as_dict()
        ranks, weights = [], []
        metrics = {r["universityName"]: r["metrics"] for r in results[1:] if "metrics" in r}
        for s in samples:
            m = metrics.get(s["name"])
            if m is None:
                continue
            diffs = [(_log1p(target[f]) - _log1p(m[f])) ** 2 for f in FEATURE_NAMES
                     if target[f] is not None and m[f] is not None]
            d = (sum(diffs) / len(diffs)) ** 0.5 if diffs else 1.0
            ranks.append(s["rankValue"])
            weights.append(1.0 / (d + 1e-6))
        centre = initial.midpoint
        if ranks:
            sample_centre = sum(r * w for r, w in zip(ranks, weights)) / sum(weights)
            centre = self.blend * initial.midpoint + (1 - self.blend) * sample_centre
        lo = max(1.0, float(round(centre - self.width / 2)))
        return BackendReply(json.dumps({"rankMin": lo, "rankMax": lo + self.width, "confidence": "medium",
                                        "rationale": f"recentred on {len(ranks)} comparators"}))


def _log1p(v: float) -> float:
    import math
    return math.copysign(math.log1p(abs(v)), v)


# ---------------------------------------------------------------------------
# Remote chat-completions endpoint

@dataclass(frozen=True)
class BackendConfig:
    url: str
    model: str
    api_key: Optional[str] = None
    reasoning_effort: Optional[str] = "medium"
    seed: Optional[int] = None
    timeout: float = 120.0
    retries: int = 3

    @classmethod
    def load(cls, path: Union[str, Path, None] = None, env: Optional[Mapping[str, str]] = None) -> "BackendConfig":
        """JSON config file, then ``BLINDRANK_BACKEND_URL`` / ``BLINDRANK_API_KEY`` /
        ``BLINDRANK_MODEL`` / ``BLINDRANK_REASONING_EFFORT`` overrides."""
        env = os.environ if env is None else env
        data: Dict[str, Any] = {}
        if path is not None:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        for key, var in (("url", "BLINDRANK_BACKEND_URL"), ("api_key", "BLINDRANK_API_KEY"),
                         ("model", "BLINDRANK_MODEL"), ("reasoning_effort", "BLINDRANK_REASONING_EFFORT")):
            if env.get(var):
                data[key] = env[var]
        if not data.get("url") or not data.get("model"):
            raise ValueError("backend config needs url and model")
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})

    def digest_fields(self) -> dict:
        return {"url": self.url, "model": self.model, "reasoning_effort": self.reasoning_effort,
                "seed": self.seed}


class ChatCompletionsBackend(Backend):
    """Any endpoint that speaks the chat-completions protocol with tool calls."""

    name = "chat-completions"

    def __init__(self, config: BackendConfig, http: Optional[httpx.Client] = None, sleep=None):
        self.config = config
        headers = {"Authorization": f"Bearer {config.api_key}"} if config.api_key else {}
        self._api = _ApiClient(config.url, http=http or httpx.Client(timeout=config.timeout), min_interval=0.0,
                               headers=headers, **({"sleep": sleep} if sleep else {}))
        self._api.retries = config.retries

    def describe(self) -> dict:
        return {"backend": self.name, **self.config.digest_fields()}

    def complete(self, request: BackendRequest) -> BackendReply:
        body: Dict[str, Any] = {"model": self.config.model, "messages": copy.deepcopy(request.messages)}
        if request.tools:
            body["tools"] = request.tools
            body["tool_choice"] = "auto"
        else:
            body["response_format"] = {"type": "json_object"} if request.stage != "stage3" else {"type": "text"}
        if self.config.reasoning_effort:
            body["reasoning_effort"] = self.config.reasoning_effort
        seed = request.seed if request.seed is not None else self.config.seed
        if seed is not None:
            body["seed"] = seed
        try:
            data = self._api.post_json("/chat/completions", body)
        except TransientError as exc:
            raise BackendUnavailable(str(exc)) from exc
        except Exception as exc:  # malformed responses, 4xx
            raise BackendError(str(exc)) from exc
        try:
            msg = data["choices"][0]["message"]
        except (KeyError, IndexError, TypeError):
            raise BackendError("response has no choices") from None
        calls = []
        for c in msg.get("tool_calls") or []:
            try:
                args = json.loads(c["function"].get("arguments") or "{}")
            except json.JSONDecodeError:
                args = {"_raw": c["function"].get("arguments")}
            calls.append(ToolCall(c.get("id", ""), c["function"]["name"], args))
        usage = {k: int(v) for k, v in (data.get("usage") or {}).items() if isinstance(v, int)}
        return BackendReply(msg.get("content"), calls, usage)


def load_backend(spec: Union[str, Path, None]) -> Backend:
    """``knn``/``baseline`` for the offline baseline, otherwise a config path."""
    if spec in (None, "knn", "baseline"):
        return KnnBaselineBackend()
    return ChatCompletionsBackend(BackendConfig.load(spec))
