import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import SMALL_K, SMALL_VOCAB, directional_check, manual_logits, random_params, softmax_row
from zpdrl.grpo import (
    METRIC_COLUMNS,
    GrpoConfig,
    Rollout,
    RolloutGroup,
    compute_advantages,
    grpo_step,
    grpo_train,
    overlong_mask,
    steps_to_reach,
    surrogate_loss,
    windowed_mean,
)
from zpdrl.policy import N_BUCKETS, PolicyParams, ToyTask, sequence_logprob

CONFIG = GrpoConfig()


def make_group(params, rng, G=4, rewards=None, ratio_noise=0.0, truncated=None):
    key = int(rng.integers(SMALL_K))
    rewards = list(rewards if rewards is not None else rng.integers(0, 2, size=G).astype(float))
    truncated = truncated or [False] * G
    rollouts = []
    for i in range(G):
        L = int(rng.integers(1, 6))
        toks = tuple(int(t) for t in rng.integers(0, len(SMALL_VOCAB), size=L))
        lps = []
        prev = SMALL_VOCAB.stop
        for pos, t in enumerate(toks):
            lps.append(float(np.log(softmax_row(manual_logits(params, key, prev, pos))[t])))
            prev = t
        old = tuple(lp + float(rng.uniform(-ratio_noise, ratio_noise)) for lp in lps)
        rollouts.append(Rollout(toks, old, truncated[i]))
    return RolloutGroup(key, tuple(rollouts), tuple(rewards), tuple(compute_advantages(rewards)))


def reinforce_grad(params, groups):
    """Plain token-mean policy gradient of -A * log pi, coded with explicit loops."""
    V = params.V
    grad = np.zeros_like(params.weights)
    count = 0
    for g in groups:
        for resp, a in zip(g.responses, g.advantages):
            if resp.truncated:
                continue
            prev = SMALL_VOCAB.stop
            for pos, tok in enumerate(resp.tokens):
                p = softmax_row(manual_logits(params, g.prompt_key, prev, pos))
                d = -p
                d[tok] += 1.0
                for row in (prev, V + min(pos // 4, N_BUCKETS - 1), V + N_BUCKETS + g.prompt_key):
                    grad[row] -= a * d
                count += 1
                prev = tok
    return grad / count


def test_advantage_examples():
    adv = compute_advantages([1, 0, 0, 0])
    assert adv[0] == pytest.approx(np.sqrt(3), rel=1e-6)
    assert adv[1] == pytest.approx(-1 / np.sqrt(3), rel=1e-6)
    assert compute_advantages([1, 1, 1, 1]) == [0.0] * 4
    assert compute_advantages([0, 0]) == [0.0, 0.0]
    with pytest.raises(ValueError):
        compute_advantages([1])


@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=2, max_size=16))
def test_advantages_are_centered(rewards):
    adv = np.array(compute_advantages(rewards))
    assert abs(adv.sum()) < 1e-9
    if len(set(rewards)) > 1:
        assert abs(adv.std() - 1.0) < 1e-6


def test_surrogate_gradient():
    rng = np.random.default_rng(0)
    errs = []
    for _ in range(120):
        params = random_params(rng)
        groups = [make_group(params, rng, ratio_noise=0.5) for _ in range(2)]
        _, grad = surrogate_loss(groups, params, CONFIG)
        errs.append(directional_check(lambda p: surrogate_loss(groups, p, CONFIG)[0], params, grad, rng))
    assert max(errs) < 1e-5


def test_ratio_one_equals_reinforce():
    rng = np.random.default_rng(1)
    for _ in range(20):
        params = random_params(rng)
        groups = [make_group(params, rng, rewards=[1, 0, 1, 0]), make_group(params, rng)]
        loss, grad = surrogate_loss(groups, params, CONFIG)
        assert np.max(np.abs(grad - reinforce_grad(params, groups))) < 1e-10


def test_clip_high_token_has_zero_gradient():
    rng = np.random.default_rng(2)
    params = random_params(rng)
    key = 0
    tok = (1,)
    lp = sequence_logprob(params, key, tok)[0]
    fresh = Rollout(tok, (lp - np.log(1.5),), False)
    dropped = Rollout((2, 3), (0.0, 0.0), True)
    group = RolloutGroup(key, (fresh, dropped), (1.0, 0.0), tuple(compute_advantages([1.0, 0.0])))
    loss, grad = surrogate_loss(group, params, GrpoConfig(eps_high=0.28))
    assert not np.any(grad)
    assert loss == pytest.approx(-1.28 * group.advantages[0])
    # the same token below the bound does move the policy
    inside = Rollout(tok, (lp - np.log(1.2),), False)
    group2 = RolloutGroup(key, (inside, dropped), group.rewards, group.advantages)
    assert np.any(surrogate_loss(group2, params, GrpoConfig(eps_high=0.28))[1])


def test_clip_low_negative_advantage():
    rng = np.random.default_rng(3)
    params = random_params(rng)
    lp = sequence_logprob(params, 0, (1,))[0]
    low = Rollout((1,), (lp - np.log(0.5),), False)
    dropped = Rollout((2,), (0.0,), True)
    group = RolloutGroup(0, (low, dropped), (0.0, 1.0), tuple(compute_advantages([0.0, 1.0])))
    assert not np.any(surrogate_loss(group, params, CONFIG)[1])


def test_degenerate_group_leaves_params_unchanged():
    rng = np.random.default_rng(4)
    params = random_params(rng)
    for rewards in ([1, 1, 1, 1], [0, 0, 0, 0]):
        group = make_group(params, rng, rewards=rewards)
        assert group.degenerate
        loss, grad = surrogate_loss(group, params, CONFIG)
        assert loss == 0.0 and not np.any(grad)


def test_degenerate_batch_step_is_identity():
    # a zero-initialized toy policy never boxes an answer, so every group is all-zero
    params = PolicyParams.zeros()
    problems = ToyTask().splits()["train"][:4]
    new, metrics = grpo_step(params, problems, GrpoConfig(prompts_per_batch=4), np.random.default_rng(0))
    assert np.array_equal(new.weights, params.weights)
    assert metrics.frac_degenerate == 1.0 and metrics.mean_reward == 0.0


def test_overlong_responses_are_excluded():
    rng = np.random.default_rng(5)
    params = random_params(rng)
    group = make_group(params, rng, rewards=[1, 0, 1, 0], truncated=[False, True, False, True])
    assert overlong_mask(group) == [True, False, True, False]
    # the oracle skips truncated responses when counting tokens
    assert np.allclose(surrogate_loss(group, params, CONFIG)[1], reinforce_grad(params, [group]))
    # truncated responses still count in the group statistics
    assert group.advantages == tuple(compute_advantages([1, 0, 1, 0]))


def test_all_truncated_gives_zero():
    rng = np.random.default_rng(6)
    params = random_params(rng)
    group = make_group(params, rng, rewards=[1, 0], G=2, truncated=[True, True])
    loss, grad = surrogate_loss(group, params, CONFIG)
    assert loss == 0.0 and not np.any(grad)


def test_config_validation():
    for bad in (dict(group_size=1), dict(eps_low=0.3, eps_high=0.2), dict(max_gen_len=0), dict(prompts_per_batch=0)):
        with pytest.raises(ValueError):
            GrpoConfig(**bad)


def test_train_writes_metrics_and_is_deterministic(tmp_path):
    train = ToyTask().splits()["train"]
    config = GrpoConfig(steps=5, prompts_per_batch=3, seed=1, checkpoint_every=2)
    rng = np.random.default_rng(7)
    init = PolicyParams(rng.normal(0, 0.5, size=PolicyParams.zeros().weights.shape))
    a = grpo_train(init, train, config, metrics_path=tmp_path / "m.csv", checkpoint_prefix=tmp_path / "ck")
    b = grpo_train(init, train, config)
    assert np.array_equal(a.params.weights, b.params.weights)
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 5
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4, 5]
    assert (tmp_path / "ck.step2").exists() and (tmp_path / "ck.step4").exists()


def test_windowed_mean_and_steps_to_reach():
    vals = [0, 0, 1, 1, 1, 1]
    assert list(windowed_mean(vals, 2)) == [0, 0.5, 1, 1, 1]
    assert steps_to_reach(vals, 0.5, 2) == 3
    assert steps_to_reach(vals, 2.0, 2) is None
    assert steps_to_reach([1], 0.5, 2) is None
