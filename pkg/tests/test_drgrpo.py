from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import advantages_oracle
from toolverify.drgrpo import (
    GrpoConfig,
    TokenBatch,
    TrajectoryTokens,
    clipped_term,
    finite_difference_check,
    group_advantages,
    loss_mask,
    objective,
    objective_gradient,
    on_policy,
    random_policy,
    synthetic_batch,
    token_terms,
    train_step,
    train_step_with_metrics,
)
from toolverify.errors import DegenerateGroupError, ShapeMismatchError

CFG = GrpoConfig()
rewards_st = st.lists(st.sampled_from([0.0, 0.25, 1.0]), min_size=2, max_size=16)


@pytest.mark.parametrize(
    "rewards,expected",
    [([1, 0, 1, 0], [0.5, -0.5, 0.5, -0.5]), ([1, 1, 1], [0, 0, 0]), ([1, 0.25], [0.375, -0.375])],
)
def test_advantage_examples(rewards, expected):
    assert group_advantages(rewards) == pytest.approx(expected, abs=1e-15)


def test_advantage_degenerate():
    with pytest.raises(DegenerateGroupError):
        group_advantages([1.0])


@settings(max_examples=500)
@given(rewards_st, st.floats(-10, 10))
def test_advantage_properties(rewards, c):
    adv = group_advantages(rewards)
    assert abs(sum(adv)) <= 1e-12
    assert np.allclose(adv, advantages_oracle(rewards), atol=1e-15)
    assert np.allclose(group_advantages([r + c for r in rewards]), adv, atol=1e-12)


@pytest.mark.parametrize("ratio,adv,expected", [(1.0, 0.5, 0.5), (1.5, 1.0, 1.3), (0.5, -1.0, -0.8)])
def test_clipped_term_examples(ratio, adv, expected):
    assert clipped_term(ratio, adv, CFG) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=500)
@given(st.floats(1e-3, 10), st.floats(1e-3, 5), st.booleans())
def test_clipped_term_bounds(ratio, adv, negate):
    adv = -adv if negate else adv
    v = clipped_term(ratio, adv, CFG)
    assert v <= ratio * adv + 1e-12
    if v != ratio * adv:
        eff = v / adv
        assert 1 - CFG.eps_low - 1e-12 <= eff <= 1 + CFG.eps_high + 1e-12


def test_config_validation():
    for bad in ({"eps_low": 0.4, "eps_high": 0.3}, {"learning_rate": 0.0}, {"epochs_per_iteration": 0}):
        with pytest.raises(ValueError):
            GrpoConfig(**bad)


# objective fixtures


def _fixed_ratio_batch(policy, ratios_by_traj, advantages, info=False):
    """Batch whose old log-probs are offset so each token has the requested ratio."""
    group = []
    for ratios, adv in zip(ratios_by_traj, advantages):
        pieces = [("check claim" if len(ratios) == 2 else "check", False)]
        enc = policy.encode("ctx", pieces)
        new = policy.token_logprobs(enc)
        old = new - np.log(np.asarray(ratios, dtype=float))
        group.append(TrajectoryTokens("ctx", enc, old, adv, loss_mask(enc, True)))
    return TokenBatch([group])


def test_hand_computed_two_trajectory_fixture():
    # trajectory A: advantage +0.5, ratios (1.0, 1.5); trajectory B: advantage -0.5, ratios (0.5, 1.0)
    # A: 1.0*0.5 + min(1.5*0.5, 1.3*0.5) = 0.5 + 0.65
    # B: min(0.5*-0.5, 0.8*-0.5) + 1.0*-0.5 = -0.4 - 0.5
    # objective = (1/2) * (1.15 - 0.9) = 0.125
    policy = random_policy(0)
    batch = _fixed_ratio_batch(policy, [(1.0, 1.5), (0.5, 1.0)], [0.5, -0.5])
    assert abs(objective(policy, batch, CFG) - 0.125) <= 1e-12
    assert np.allclose(token_terms(policy, batch, CFG), [0.25, 0.325, -0.2, -0.25], atol=1e-12)


def test_identical_policies_reduce_to_advantage_times_count():
    policy = random_policy(3)
    rng = np.random.default_rng(4)
    batch = synthetic_batch(policy, rng, n_groups=4, G=5)
    want = math.fsum(t.advantage * int(t.mask.sum()) / G for G, t in batch.trajectories())
    assert abs(objective(policy, batch, CFG) - want) <= 1e-12


def test_zero_advantages():
    policy = random_policy(1)
    batch = synthetic_batch(policy, np.random.default_rng(1), zero_advantages=True)
    assert objective(policy, batch, CFG) == 0.0
    before = policy.theta.copy()
    train_step(policy, batch, CFG)
    assert np.array_equal(policy.theta, before)
    grad, _ = objective_gradient(policy, batch, CFG)
    assert not grad.any()


def test_shape_mismatch():
    policy = random_policy(0)
    enc = policy.encode("ctx", [("check claim", False)])
    with pytest.raises(ShapeMismatchError):
        TrajectoryTokens("ctx", enc, np.zeros(1), 1.0, np.ones(2, dtype=bool))


def test_positive_advantage_raises_logprob():
    policy = random_policy(2)
    enc = policy.encode("ctx", [("<think>check</think><answer>1</answer>", False)])
    old = policy.token_logprobs(enc)
    batch = TokenBatch([[TrajectoryTokens("ctx", enc, old, 1.0, loss_mask(enc, True))]])
    train_step(policy, batch, GrpoConfig(learning_rate=1e-3))
    assert policy.token_logprobs(enc).sum() > old.sum()


def test_on_policy_gradient_is_advantage_weighted_score():
    policy = random_policy(5)
    batch = on_policy(policy, synthetic_batch(policy, np.random.default_rng(5)))
    grad, clip = objective_gradient(policy, batch, CFG)
    want = np.zeros_like(policy.theta)
    for G, t in batch.trajectories():
        want += policy.weighted_logprob_gradient(t.encoded, np.where(t.mask, t.advantage / G, 0.0))
    assert clip == 0.0
    assert np.allclose(grad, want, atol=1e-14)


def test_objective_non_decreasing_over_ten_steps():
    ok = 0
    for seed in range(100):
        policy = random_policy(seed)
        batch = synthetic_batch(policy, np.random.default_rng(10_000 + seed))
        values = []
        for _ in range(10):
            policy, value = train_step(policy, batch, GrpoConfig(learning_rate=1e-2))
            values.append(value)
        values.append(objective(policy, batch, CFG))
        ok += all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
    assert ok >= 95


def test_step_metrics():
    policy = random_policy(7)
    batch = synthetic_batch(policy, np.random.default_rng(7))
    _, m = train_step_with_metrics(policy, batch, CFG)
    assert m.grad_norm > 0
    assert 0.0 <= m.clip_fraction <= 1.0


# gradient check


@pytest.mark.parametrize("seed", range(10))
def test_finite_difference_check(seed):
    policy = random_policy(seed)
    batch = synthetic_batch(policy, np.random.default_rng(seed + 1))
    assert finite_difference_check(policy, batch, CFG, h=1e-6, n_coords=128, seed=seed) <= 1e-5


def test_finite_difference_zero_advantages():
    policy = random_policy(0)
    batch = synthetic_batch(policy, np.random.default_rng(0), zero_advantages=True)
    assert finite_difference_check(policy, batch, CFG) == 0.0


def test_corrupted_gradient_fails_check():
    policy = random_policy(0)
    batch = synthetic_batch(policy, np.random.default_rng(1))

    def corrupted(pol, b, cfg):
        g = objective_gradient(pol, b, cfg)[0]
        return g * 1.1 + 1e-3

    assert finite_difference_check(policy, batch, CFG, gradient_fn=corrupted) > 1e-2


def test_h_range_enforced():
    policy = random_policy(0)
    with pytest.raises(ValueError):
        finite_difference_check(policy, synthetic_batch(policy, np.random.default_rng(0)), CFG, h=1e-3)


# masking


def test_masking_changes_only_information_tokens():
    policy = random_policy(8)
    on, off = GrpoConfig(mask_information_tokens=True), GrpoConfig(mask_information_tokens=False)

    def build(cfg, with_info):
        pieces = [("<think>check</think><search>claim</search>", False)]
        if with_info:
            pieces += [("<information>fact ok</information>", True), ("<answer>1</answer>", False)]
        rows = []
        for i, adv in enumerate((0.5, 0.25, -0.75)):
            enc = policy.encode("ctx", pieces)
            # off-policy ratios so clipping is exercised
            old = policy.token_logprobs(enc) + np.linspace(-0.4, 0.4, len(enc.token_ids)) * (i + 1)
            rows.append(TrajectoryTokens("ctx", enc, old, adv, loss_mask(enc, cfg.mask_information_tokens)))
        return TokenBatch([rows])

    assert objective(policy, build(on, False), on) == objective(policy, build(off, False), off)

    b_on, b_off = build(on, True), build(off, True)
    delta = objective(policy, b_off, off) - objective(policy, b_on, on)
    env = np.concatenate([t.encoded.environment for _, t in b_off.trajectories()])
    terms = token_terms(policy, b_off, off)
    assert delta != 0
    assert abs(delta - math.fsum(terms[env])) <= 1e-12
