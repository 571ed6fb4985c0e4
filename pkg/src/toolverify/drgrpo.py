"""Dr.GRPO advantages and clipped token-level surrogate, trained on the toy policy.

Advantages are plain group-mean baselines (no std scaling) and the surrogate
is summed over tokens with a 1/G factor per group (no length normalisation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, TYPE_CHECKING

import numpy as np

from .errors import DegenerateGroupError, ShapeMismatchError, UnknownTokenError

if TYPE_CHECKING:
    from .rollout import RolloutGroup
    from .toypolicy import EncodedSequence, ToySoftmaxPolicy


@dataclass(frozen=True)
class GrpoConfig:
    eps_low: float = 0.2
    eps_high: float = 0.3
    learning_rate: float = 1e-2
    epochs_per_iteration: int = 5
    mask_information_tokens: bool = True

    def __post_init__(self) -> None:
        if not 0 < self.eps_low <= self.eps_high < 1:
            raise ValueError("need 0 < eps_low <= eps_high < 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs_per_iteration < 1:
            raise ValueError("epochs_per_iteration must be positive")


def group_advantages(rewards: Sequence[float]) -> list[float]:
    if len(rewards) < 2:
        raise DegenerateGroupError("a group needs at least two rewards")
    mean = math.fsum(rewards) / len(rewards)
    return [r - mean for r in rewards]


def clipped_term(ratio: float, advantage: float, cfg: GrpoConfig = GrpoConfig()) -> float:
    clipped = min(max(ratio, 1 - cfg.eps_low), 1 + cfg.eps_high)
    return min(ratio * advantage, clipped * advantage)


@dataclass
class TrajectoryTokens:
    context: str
    encoded: "EncodedSequence"
    old_logprobs: np.ndarray
    advantage: float
    mask: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.encoded.token_ids)
        if len(self.old_logprobs) != n or len(self.mask) != n:
            raise ShapeMismatchError(
                f"{n} tokens, {len(self.old_logprobs)} old logprobs, {len(self.mask)} mask entries"
            )


@dataclass
class TokenBatch:
    groups: list[list[TrajectoryTokens]] = field(default_factory=list)

    def trajectories(self):
        for group in self.groups:
            for traj in group:
                yield len(group), traj


def loss_mask(encoded: "EncodedSequence", mask_information_tokens: bool) -> np.ndarray:
    if mask_information_tokens:
        return ~encoded.environment
    if (encoded.token_ids < 0).any():
        raise UnknownTokenError("environment tokens outside the vocabulary cannot be scored unmasked")
    return np.ones(len(encoded.token_ids), dtype=bool)


def encode_groups(
    policy: "ToySoftmaxPolicy", groups: Sequence["RolloutGroup"], cfg: GrpoConfig = GrpoConfig()
) -> TokenBatch:
    """Token batch from rollout groups; old log-probs come from ``policy`` as it is now."""
    batch = TokenBatch()
    for group in groups:
        rows = []
        for rollout, adv in zip(group.rollouts, group.advantages):
            enc = policy.encode(rollout.prompt, rollout.pieces, prompt_chars=len(rollout.prompt))
            old = np.nan_to_num(policy.token_logprobs(enc))
            rows.append(TrajectoryTokens(rollout.prompt, enc, old, float(adv), loss_mask(enc, cfg.mask_information_tokens)))
        batch.groups.append(rows)
    return batch


def _ratios(policy: "ToySoftmaxPolicy", traj: TrajectoryTokens, theta: Optional[np.ndarray]) -> np.ndarray:
    new = np.nan_to_num(policy.token_logprobs(traj.encoded, theta))
    return np.exp(new - traj.old_logprobs)


def token_terms(
    policy: "ToySoftmaxPolicy", batch: TokenBatch, cfg: GrpoConfig, theta: Optional[np.ndarray] = None
) -> np.ndarray:
    """Per-token contributions (already scaled by 1/G and masked), concatenated."""
    out = []
    lo, hi = 1 - cfg.eps_low, 1 + cfg.eps_high
    for G, traj in batch.trajectories():
        r = _ratios(policy, traj, theta)
        a = traj.advantage
        terms = np.minimum(r * a, np.clip(r, lo, hi) * a)
        out.append(np.where(traj.mask, terms, 0.0) / G)
    return np.concatenate(out) if out else np.zeros(0)


def objective(
    policy: "ToySoftmaxPolicy", batch: TokenBatch, cfg: GrpoConfig = GrpoConfig(), theta: Optional[np.ndarray] = None
) -> float:
    return math.fsum(token_terms(policy, batch, cfg, theta))


def objective_gradient(
    policy: "ToySoftmaxPolicy", batch: TokenBatch, cfg: GrpoConfig = GrpoConfig(), theta: Optional[np.ndarray] = None
) -> tuple[np.ndarray, float]:
    """Analytic gradient of :func:`objective` and the fraction of clipped tokens.

    A token contributes ``A * r * dlogp`` unless the clip is the active side
    of the min, in which case its gradient is zero.
    """
    th = policy.theta if theta is None else theta
    grad = np.zeros_like(th)
    lo, hi = 1 - cfg.eps_low, 1 + cfg.eps_high
    clipped = total = 0
    for G, traj in batch.trajectories():
        r = _ratios(policy, traj, theta)
        a = traj.advantage
        if a > 0:
            active = r <= hi
        elif a < 0:
            active = r >= lo
        else:
            active = np.zeros(len(r), dtype=bool)
        active &= traj.mask
        if a != 0:
            clipped += int(np.sum(traj.mask & ~active))
        total += int(np.sum(traj.mask))
        weights = np.where(active, a * r / G, 0.0)
        grad += policy.weighted_logprob_gradient(traj.encoded, weights, th)
    return grad, (clipped / total if total else 0.0)


@dataclass
class StepMetrics:
    objective: float
    clip_fraction: float
    grad_norm: float


def train_step(
    policy: "ToySoftmaxPolicy", batch: TokenBatch, cfg: GrpoConfig = GrpoConfig()
) -> tuple["ToySoftmaxPolicy", float]:
    policy, metrics = train_step_with_metrics(policy, batch, cfg)
    return policy, metrics.objective


def train_step_with_metrics(
    policy: "ToySoftmaxPolicy", batch: TokenBatch, cfg: GrpoConfig = GrpoConfig()
) -> tuple["ToySoftmaxPolicy", StepMetrics]:
    """One plain gradient-ascent step; returns the pre-update objective."""
    with policy.lock:
        value = objective(policy, batch, cfg)
        grad, clip_fraction = objective_gradient(policy, batch, cfg)
        policy.theta += cfg.learning_rate * grad
    return policy, StepMetrics(value, clip_fraction, float(np.linalg.norm(grad)))


GradientFn = Callable[["ToySoftmaxPolicy", TokenBatch, GrpoConfig], np.ndarray]


def _default_gradient(policy: "ToySoftmaxPolicy", batch: TokenBatch, cfg: GrpoConfig) -> np.ndarray:
    return objective_gradient(policy, batch, cfg)[0]


def on_policy(policy: "ToySoftmaxPolicy", batch: TokenBatch) -> TokenBatch:
    return TokenBatch(
        [
            [replace(t, old_logprobs=np.nan_to_num(policy.token_logprobs(t.encoded))) for t in group]
            for group in batch.groups
        ]
    )


def finite_difference_check(
    policy: "ToySoftmaxPolicy",
    batch: TokenBatch,
    cfg: GrpoConfig = GrpoConfig(),
    h: float = 1e-6,
    n_coords: int = 128,
    seed: int = 0,
    gradient_fn: GradientFn = _default_gradient,
    scale_floor: float = 1e-3,
) -> float:
    """Max coordinate-wise relative error between analytic and central-difference gradients.

    Coordinates are drawn from feature rows the batch actually touches. Each
    central difference subtracts per-token terms before summing, so tokens
    unaffected by the perturbation cancel exactly. Double-precision round-off
    leaves differences with an absolute noise floor near 1e-10, so the
    denominator is floored at ``scale_floor`` times the largest sampled
    analytic gradient entry.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError("h must lie in [1e-8, 1e-4]")
    batch = on_policy(policy, batch)
    analytic = gradient_fn(policy, batch, cfg)

    rows = sorted({int(c) for _, t in batch.trajectories() for c in t.encoded.features.indices})
    V = policy.theta.shape[1]
    candidates = [(r, c) for r in rows for c in range(V)]
    if not candidates:
        return 0.0
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=min(n_coords, len(candidates)), replace=False)

    coords = [candidates[int(p)] for p in picks]
    floor = scale_floor * max(abs(float(analytic[r, c])) for r, c in coords)
    worst = 0.0
    theta = policy.theta
    for r, c in coords:
        plus = theta.copy()
        plus[r, c] += h
        minus = theta.copy()
        minus[r, c] -= h
        diff = token_terms(policy, batch, cfg, plus) - token_terms(policy, batch, cfg, minus)
        fd = math.fsum(diff) / (2 * h)
        a = float(analytic[r, c])
        denom = max(abs(a), abs(fd), floor)
        err = 0.0 if denom == 0 else abs(a - fd) / denom
        worst = max(worst, err)
    return worst


def synthetic_batch(
    policy: "ToySoftmaxPolicy",
    rng: np.random.Generator,
    n_groups: int = 3,
    G: int = 4,
    max_tokens: int = 8,
    with_information: bool = True,
    zero_advantages: bool = False,
    cfg: GrpoConfig = GrpoConfig(),
) -> TokenBatch:
    """Random on-policy batch over the policy's vocabulary, for gradient checks."""
    from .protocol import Kind

    words = ["alpha", "beta", "gamma", "delta", "7+5=12", "claim", "fact", "."]
    vocab = [t for t in policy.vocabulary if t not in (Kind.INFORMATION.open_tag, Kind.INFORMATION.close_tag)]
    batch = TokenBatch()
    for _ in range(n_groups):
        context = " ".join(rng.choice(words, size=int(rng.integers(3, 12)))) + "\n"
        rewards = [float(x) for x in rng.choice([0.0, 0.25, 1.0], size=G)]
        advs = [0.0] * G if zero_advantages else group_advantages(rewards)
        rows = []
        for g in range(G):
            pieces = [(" ".join(rng.choice(vocab, size=int(rng.integers(1, max_tokens + 1)))), False)]
            if with_information and rng.random() < 0.5:
                pieces.append((f"<information>{' '.join(rng.choice(words, size=3))}</information>", True))
                pieces.append((" ".join(rng.choice(vocab, size=int(rng.integers(1, max_tokens + 1)))), False))
            enc = policy.encode(context, pieces)
            old = np.nan_to_num(policy.token_logprobs(enc))
            rows.append(TrajectoryTokens(context, enc, old, advs[g], loss_mask(enc, cfg.mask_information_tokens)))
        batch.groups.append(rows)
    return batch


def random_policy(seed: int, feature_dim: int = 64, scale: float = 0.5) -> "ToySoftmaxPolicy":
    from .toypolicy import ToySoftmaxPolicy

    policy = ToySoftmaxPolicy(feature_dim=feature_dim)
    policy.theta = scale * np.random.default_rng(seed).standard_normal(policy.theta.shape)
    return policy


def gradient_check(seed: int, h: float = 1e-6, n_coords: int = 128) -> float:
    policy = random_policy(seed)
    rng = np.random.default_rng(seed + 1)
    batch = synthetic_batch(policy, rng)
    return finite_difference_check(policy, batch, GrpoConfig(), h=h, n_coords=n_coords, seed=seed)
