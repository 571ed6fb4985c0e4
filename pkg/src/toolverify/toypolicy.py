"""A small trainable softmax policy over a fixed token vocabulary.

Logits are a linear function of features of the last few context tokens.
The bias and the previous token (when it is in the vocabulary) get dedicated
rows; everything else is hashed into the remaining rows. It is small enough to differentiate analytically, which lets the RL
objective be checked against finite differences, yet it speaks the same tag
protocol as a real verifier.
"""

from __future__ import annotations

import re
import threading
import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import sparse

from .backends import GenerationRequest, GenerationResult, StopReason
from .errors import ShapeMismatchError, UnknownTokenError
from .protocol import ALL_TAGS, Kind

TASK_TOKENS = ("check", "claim", "fact", "ok")
DEFAULT_VOCAB = ALL_TAGS + ("0", "1") + TASK_TOKENS
WINDOW = 8

_CTX_TOKEN_RE = re.compile(
    r"</?(?:think|search|information|answer)>"
    r"|[A-Za-z0-9]+(?:[+\-*/=][A-Za-z0-9]+)*"
    r"|[^\sA-Za-z0-9]"
)


def tokenize(text: str) -> list[str]:
    return _CTX_TOKEN_RE.findall(text)


@lru_cache(maxsize=4096)
def _tokenize_cached(text: str) -> tuple[str, ...]:
    return tuple(tokenize(text))


def render_tokens(tokens: Iterable[str], prev: str = "") -> str:
    """Join tokens so that :func:`tokenize` splits them back apart."""
    out = []
    last = prev[-1:] if prev else ""
    for tok in tokens:
        if last and (last.isalnum() or last in "+-*/=") and tok[0].isalnum():
            out.append(" ")
        out.append(tok)
        last = tok[-1]
    return "".join(out)


@lru_cache(maxsize=65536)
def _bucket(key: str, dim: int) -> int:
    return zlib.crc32(key.encode("utf-8")) % dim


def _logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))).squeeze(axis)


@dataclass
class EncodedSequence:
    """Feature rows and token ids for every scored position of a continuation."""

    features: sparse.csr_matrix  # (n_tokens, feature_dim)
    token_ids: np.ndarray  # -1 where the token is outside the vocabulary
    tokens: list[str]
    environment: np.ndarray  # True for tokens inserted by the environment


class ToySoftmaxPolicy:
    def __init__(
        self,
        vocabulary: Sequence[str] = DEFAULT_VOCAB,
        feature_dim: int = 4096,
        theta: Optional[np.ndarray] = None,
        window: int = WINDOW,
    ) -> None:
        self.vocabulary = tuple(vocabulary)
        self.token_index = {t: i for i, t in enumerate(self.vocabulary)}
        self.feature_dim = feature_dim
        self.window = window
        self._reserved = len(self.vocabulary) + 1
        if feature_dim <= self._reserved:
            raise ShapeMismatchError(f"feature_dim must exceed {self._reserved}")
        if theta is None:
            theta = np.zeros((feature_dim, len(self.vocabulary)))
        if theta.shape != (feature_dim, len(self.vocabulary)):
            raise ShapeMismatchError(f"theta has shape {theta.shape}")
        self.theta = np.asarray(theta, dtype=np.float64)
        self.lock = threading.RLock()

    @classmethod
    def with_format_prior(
        cls,
        feature_dim: int = 4096,
        strength: float = 8.0,
        bias: float = 4.0,
        search_gap: float = 2.5,
        noise: float = 0.01,
        seed: int = 0,
    ) -> "ToySoftmaxPolicy":
        """A base policy that already follows the tag grammar.

        Judgments start out as a coin flip: ``0`` and ``1`` get equal weight
        after ``<answer>``.
        """
        policy = cls(feature_dim=feature_dim)
        rng = np.random.default_rng(seed)
        policy.theta += noise * rng.standard_normal(policy.theta.shape)
        T = Kind
        rules = {
            T.THINK.open_tag: {"check": strength},
            "check": {T.THINK.close_tag: strength},
            T.THINK.close_tag: {T.ANSWER.open_tag: strength, T.SEARCH.open_tag: strength - search_gap},
            T.SEARCH.open_tag: {"claim": strength},
            "claim": {T.SEARCH.close_tag: strength},
            T.INFORMATION.close_tag: {T.THINK.open_tag: strength},
            T.ANSWER.open_tag: {"0": strength, "1": strength},
            "0": {T.ANSWER.close_tag: strength},
            "1": {T.ANSWER.close_tag: strength},
        }
        for prev, nxt in rules.items():
            row = policy.feature_row(0, prev)
            for tok, w in nxt.items():
                policy.theta[row, policy.token_index[tok]] += w
        b = policy.bias_row()
        policy.theta[b, policy.token_index[T.THINK.open_tag]] += bias
        for tag in (T.INFORMATION.open_tag, T.INFORMATION.close_tag):
            policy.theta[b, policy.token_index[tag]] -= strength
        return policy

    def copy(self) -> "ToySoftmaxPolicy":
        return ToySoftmaxPolicy(self.vocabulary, self.feature_dim, self.theta.copy(), self.window)

    # features

    def bias_row(self) -> int:
        return 0

    def _hashed_row(self, key: str) -> int:
        return self._reserved + _bucket(key, self.feature_dim - self._reserved)

    def feature_row(self, offset: int, token: str) -> int:
        if offset == 0 and token in self.token_index:
            return 1 + self.token_index[token]
        return self._hashed_row(f"{offset}\x1f{token}")

    def features(self, tokens: Sequence[str]) -> dict[int, float]:
        """Bias, bag-of-tokens and offset-tagged tokens over the last window."""
        feats: dict[int, float] = {self.bias_row(): 1.0}
        tail = tokens[-self.window :] if self.window else ()
        for offset, tok in enumerate(reversed(tail)):
            for key in (self.feature_row(offset, tok), self._hashed_row(f"*\x1f{tok}")):
                feats[key] = feats.get(key, 0.0) + 1.0
        return feats

    def context_tokens(self, context: str, prompt_chars: Optional[int] = None) -> list[str]:
        if prompt_chars is not None and 0 < prompt_chars <= len(context) and context[prompt_chars - 1].isspace():
            return list(_tokenize_cached(context[:prompt_chars])) + tokenize(context[prompt_chars:])
        return tokenize(context)

    def logits_for(self, tokens: Sequence[str]) -> np.ndarray:
        feats = self.features(tokens)
        rows = np.fromiter(feats.keys(), dtype=np.int64)
        vals = np.fromiter(feats.values(), dtype=np.float64)
        return vals @ self.theta[rows]

    def logits(self, context: str) -> np.ndarray:
        return self.logits_for(tokenize(context))

    def probabilities(self, context: str) -> np.ndarray:
        z = self.logits(context)
        p = np.exp(z - _logsumexp(z))
        return p

    # backend surface

    def answer_logits(self, context: str) -> tuple[float, float]:
        z = self.logits(context)
        return float(z[self.token_index["1"]]), float(z[self.token_index["0"]])

    def _sample(self, z: np.ndarray, temperature: float, top_p: float, rng: np.random.Generator) -> int:
        if temperature == 0:
            return int(np.argmax(z))
        scaled = z / temperature
        p = np.exp(scaled - _logsumexp(scaled))
        if top_p < 1.0:
            order = np.argsort(-p, kind="stable")
            cum = np.cumsum(p[order])
            keep = order[: int(np.searchsorted(cum, top_p) + 1)]
            q = np.zeros_like(p)
            q[keep] = p[keep]
            p = q / q.sum()
        return int(rng.choice(len(p), p=p))

    def generate(self, req: GenerationRequest) -> GenerationResult:
        rng = np.random.default_rng(req.seed)
        ctx = self.context_tokens(req.context, req.prompt_chars)
        new: list[str] = []
        logprobs: list[tuple[str, float]] = []
        reason = StopReason.MAX_TOKENS
        with self.lock:
            for _ in range(req.max_new_tokens):
                z = self.logits_for(ctx + new)
                idx = self._sample(z, req.temperature, req.top_p, rng)
                tok = self.vocabulary[idx]
                new.append(tok)
                logprobs.append((tok, float(z[idx] - _logsumexp(z))))
                if tok in req.stop_sequences:
                    reason = StopReason.STOP_SEQUENCE
                    break
        return GenerationResult(render_tokens(new, req.context), reason, logprobs)

    # scoring and gradients

    def vocab_ids(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.token_index[t] for t in tokens]
        except KeyError as exc:
            raise UnknownTokenError(f"token {exc.args[0]!r} is not in the vocabulary") from None

    def encode(
        self,
        context: str,
        pieces: Sequence[tuple[str, bool]],
        prompt_chars: Optional[int] = None,
    ) -> EncodedSequence:
        """Encode ``(text, from_environment)`` pieces that follow ``context``.

        Policy-produced tokens must be in the vocabulary; environment tokens
        outside it get id -1.
        """
        ctx = self.context_tokens(context, prompt_chars)
        rows, cols, vals = [], [], []
        ids: list[int] = []
        toks: list[str] = []
        env: list[bool] = []
        for text, from_env in pieces:
            piece_tokens = tokenize(text)
            if not from_env:
                self.vocab_ids(piece_tokens)
            for tok in piece_tokens:
                r = len(ids)
                for col, v in self.features(ctx).items():
                    rows.append(r)
                    cols.append(col)
                    vals.append(v)
                ids.append(self.token_index.get(tok, -1))
                toks.append(tok)
                env.append(from_env)
                ctx.append(tok)
        feats = sparse.csr_matrix((vals, (rows, cols)), shape=(len(ids), self.feature_dim))
        return EncodedSequence(feats, np.asarray(ids, dtype=np.int64), toks, np.asarray(env, dtype=bool))

    def token_logprobs(self, enc: EncodedSequence, theta: Optional[np.ndarray] = None) -> np.ndarray:
        """Log-probabilities of ``enc``'s tokens; NaN where the id is -1."""
        th = self.theta if theta is None else theta
        if not len(enc.token_ids):
            return np.zeros(0)
        z = enc.features @ th
        lse = _logsumexp(z, axis=1)
        ids = np.where(enc.token_ids >= 0, enc.token_ids, 0)
        out = z[np.arange(len(ids)), ids] - lse
        return np.where(enc.token_ids >= 0, out, np.nan)

    def weighted_logprob_gradient(
        self, enc: EncodedSequence, weights: np.ndarray, theta: Optional[np.ndarray] = None
    ) -> np.ndarray:
        """d/dtheta of sum_t weights[t] * log p(token_t)."""
        th = self.theta if theta is None else theta
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != enc.token_ids.shape:
            raise ShapeMismatchError(f"{weights.shape} weights for {enc.token_ids.shape} tokens")
        grad = np.zeros_like(th)
        active = weights != 0
        if not active.any():
            return grad
        if (enc.token_ids[active] < 0).any():
            raise UnknownTokenError("non-zero weight on a token outside the vocabulary")
        feats = enc.features[np.flatnonzero(active)]
        z = feats @ th
        p = np.exp(z - _logsumexp(z, axis=1)[:, None])
        resid = -p
        resid[np.arange(len(resid)), enc.token_ids[active]] += 1.0
        resid *= weights[active][:, None]
        return np.asarray(feats.T @ resid)

    def sequence_logprob(self, context: str, continuation: str) -> tuple[float, list[float]]:
        enc = self.encode(context, [(continuation, False)])
        per = self.token_logprobs(enc)
        return float(np.sum(per)), [float(x) for x in per]

    def gradient(self, batch: Sequence[tuple[str, str, Sequence[float]]]) -> np.ndarray:
        """Gradient of sum over ``(context, continuation, weights)`` of weighted logprobs."""
        grad = np.zeros_like(self.theta)
        for context, continuation, weights in batch:
            enc = self.encode(context, [(continuation, False)])
            grad += self.weighted_logprob_gradient(enc, np.asarray(weights, dtype=np.float64))
        return grad
