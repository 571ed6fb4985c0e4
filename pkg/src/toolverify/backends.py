"""Generation backends: scripted mock and OpenAI-compatible remote.

The in-process trainable policy lives in :mod:`toolverify.toypolicy`; all three
share the ``generate(request) -> GenerationResult`` surface.
"""

from __future__ import annotations

import enum
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Protocol, Union

import httpx

from .errors import BackendTransportError, LogitsUnavailableError, ScriptExhaustedError
from .protocol import STOP_SEQUENCES, Kind

logger = logging.getLogger(__name__)

API_KEY_ENV = "TOOLVERIFY_API_KEY"

# Rollout sampling defaults (temperature 1.0, top-p 0.95).
DEFAULT_TEMPERATURE = 1.0
DEFAULT_TOP_P = 0.95


class StopReason(str, enum.Enum):
    STOP_SEQUENCE = "StopSequence"
    MAX_TOKENS = "MaxTokens"
    END_OF_TEXT = "EndOfText"


@dataclass(frozen=True)
class GenerationRequest:
    context: str
    stop_sequences: tuple[str, ...] = STOP_SEQUENCES
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_new_tokens: int = 256
    # Where the prompt ends inside ``context``; the rest is the trajectory so far.
    prompt_chars: Optional[int] = None
    instance_id: str = ""
    rollout_index: int = 0
    turn_index: int = 0
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")

    @property
    def prompt(self) -> str:
        return self.context if self.prompt_chars is None else self.context[: self.prompt_chars]

    @property
    def transcript(self) -> str:
        return "" if self.prompt_chars is None else self.context[self.prompt_chars :]


@dataclass
class GenerationResult:
    text: str
    stop_reason: StopReason
    token_logprobs: Optional[list[tuple[str, float]]] = None


class Backend(Protocol):
    def generate(self, req: GenerationRequest) -> GenerationResult: ...

    def answer_logits(self, context: str) -> tuple[float, float]: ...


def stop_reason_for(text: str, stops: tuple[str, ...]) -> StopReason:
    return StopReason.STOP_SEQUENCE if any(text.endswith(s) for s in stops) else StopReason.END_OF_TEXT


def generate(backend: Backend, req: GenerationRequest) -> GenerationResult:
    return backend.generate(req)


def two_way_confidence(z1: float, z0: float) -> float:
    """Softmax probability of the ``1`` token against the ``0`` token."""
    d = z0 - z1
    if d >= 0:
        e = math.exp(-d)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(d))


def judgment_confidence(backend: Backend, context: str) -> float:
    z1, z0 = backend.answer_logits(context)
    return two_way_confidence(z1, z0)


Script = Mapping[tuple, str]
Responder = Callable[[GenerationRequest], str]


class MockPolicy:
    """Scripted policy keyed on ``(instance_id, turn_index)``.

    Keys of the form ``(instance_id, rollout_index, turn_index)`` take
    precedence, so one instance can have different scripts per rollout. A
    ``responder`` callable may be given instead of (or as a fallback to) the
    script.
    """

    def __init__(
        self,
        script: Optional[Script] = None,
        responder: Optional[Responder] = None,
        logits: Optional[Union[Mapping[str, tuple[float, float]], Callable[[str], tuple[float, float]]]] = None,
    ) -> None:
        self.script = dict(script or {})
        self.responder = responder
        self._logits = logits
        self.calls = 0

    @classmethod
    def from_turns(cls, turns: Mapping[str, list[str]], **kwargs: Any) -> "MockPolicy":
        script = {(iid, i): text for iid, texts in turns.items() for i, text in enumerate(texts)}
        return cls(script, **kwargs)

    def generate(self, req: GenerationRequest) -> GenerationResult:
        self.calls += 1
        text = self.script.get((req.instance_id, req.rollout_index, req.turn_index))
        if text is None:
            text = self.script.get((req.instance_id, req.turn_index))
        if text is None and self.responder is not None:
            text = self.responder(req)
        if text is None:
            raise ScriptExhaustedError(
                f"no script entry for instance {req.instance_id!r} turn {req.turn_index}"
            )
        return GenerationResult(text, stop_reason_for(text, req.stop_sequences))

    def answer_logits(self, context: str) -> tuple[float, float]:
        if self._logits is None:
            raise LogitsUnavailableError("mock policy has no logits configured")
        if callable(self._logits):
            return self._logits(context)
        try:
            return self._logits[context]
        except KeyError:
            raise LogitsUnavailableError("no logits scripted for this context") from None


def _restore_stop(text: str, finish_reason: Optional[str], matched: Any, stops: tuple[str, ...]) -> tuple[str, StopReason]:
    """OpenAI-style servers drop the matched stop string; put it back."""
    if finish_reason == "length":
        return text, StopReason.MAX_TOKENS
    if any(text.endswith(s) for s in stops):
        return text, StopReason.STOP_SEQUENCE
    if finish_reason != "stop":
        return text, StopReason.END_OF_TEXT
    if isinstance(matched, str) and matched in stops:
        return text + matched, StopReason.STOP_SEQUENCE
    # Infer from the last unclosed tag.
    for kind in (Kind.SEARCH, Kind.ANSWER):
        if kind.close_tag in stops and text.rfind(kind.open_tag) > text.rfind(kind.close_tag):
            return text + kind.close_tag, StopReason.STOP_SEQUENCE
    return text, StopReason.END_OF_TEXT


class RemoteChatPolicy:
    """OpenAI-compatible ``/chat/completions`` client.

    The prompt is sent as the user message; a non-empty trajectory so far is
    sent as a trailing assistant message for the server to continue.
    """

    def __init__(
        self,
        base_url: str,
        model: str = "verifier",
        api_key: Optional[str] = None,
        timeout: float = 60.0,
        max_in_flight: int = 8,
        client: Optional[httpx.Client] = None,
        top_logprobs: int = 20,
    ) -> None:
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.top_logprobs = top_logprobs

    def _messages(self, prompt: str, transcript: str) -> list[dict[str, str]]:
        messages = [{"role": "user", "content": prompt}]
        if transcript:
            messages.append({"role": "assistant", "content": transcript})
        return messages

    def _post(self, body: dict) -> dict:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        with self._slots:
            try:
                resp = self._client.post(self.url, json=body, headers=headers)
                resp.raise_for_status()
                return resp.json()
            except (httpx.HTTPError, ValueError) as exc:
                raise BackendTransportError(f"chat completion failed: {exc}") from exc

    def generate(self, req: GenerationRequest) -> GenerationResult:
        body = {
            "model": self.model,
            "messages": self._messages(req.prompt, req.transcript),
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_new_tokens,
            "stop": list(req.stop_sequences),
        }
        if req.seed is not None:
            body["seed"] = req.seed
        data = self._post(body)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendTransportError(f"malformed chat completion response: {exc}") from exc
        text, reason = _restore_stop(text, choice.get("finish_reason"), choice.get("stop_reason"), req.stop_sequences)
        token_logprobs = None
        lp = choice.get("logprobs") or {}
        if lp.get("content"):
            token_logprobs = [(c["token"], float(c["logprob"])) for c in lp["content"]]
        return GenerationResult(text, reason, token_logprobs)

    def answer_logits(self, context: str, prompt_chars: Optional[int] = None) -> tuple[float, float]:
        """Next-token log-probabilities of ``1`` and ``0`` after ``<answer>``.

        Log-softmax values differ from logits by a shared constant, so the
        two-way softmax over them is unchanged.
        """
        prompt = context if prompt_chars is None else context[:prompt_chars]
        transcript = "" if prompt_chars is None else context[prompt_chars:]
        body = {
            "model": self.model,
            "messages": self._messages(prompt, transcript),
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": True,
            "top_logprobs": self.top_logprobs,
        }
        data = self._post(body)
        try:
            top = data["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
        except (KeyError, IndexError, TypeError):
            raise LogitsUnavailableError("server returned no top_logprobs") from None
        found: dict[str, float] = {}
        for entry in top:
            tok = str(entry.get("token", "")).strip()
            if tok in ("0", "1") and tok not in found:
                found[tok] = float(entry["logprob"])
        if "0" not in found or "1" not in found:
            raise LogitsUnavailableError("'0'/'1' not among the returned top_logprobs")
        return found["1"], found["0"]
