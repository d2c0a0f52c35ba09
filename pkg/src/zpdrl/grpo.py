"""Group-relative policy optimization with verifiable rewards.

One update per freshly sampled rollout batch, no KL term, asymmetric
("clip-higher") ratio clipping, and truncated responses filtered out of the
loss. Rewards come straight from :func:`zpdrl.verifier.reward`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import verifier
from .policy import PolicyParams, accumulate_grad, sample_batch, save_checkpoint, state_logprobs, token_states

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "mean_reward", "loss", "frac_truncated", "frac_degenerate")


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 4
    prompts_per_batch: int = 14
    steps: int = 300
    learning_rate: float = 80.0
    eps_low: float = 0.2
    eps_high: float = 0.28
    max_gen_len: int = 64
    advantage_epsilon: float = 1e-8
    seed: int = 0
    temperature: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.prompts_per_batch < 1:
            raise ValueError("prompts_per_batch must be >= 1")
        if not self.eps_high >= self.eps_low > 0:
            raise ValueError("need eps_high >= eps_low > 0")
        if self.max_gen_len < 1:
            raise ValueError("max_gen_len must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Rollout:
    tokens: tuple[int, ...]
    old_logprobs: tuple[float, ...]
    truncated: bool


@dataclass(frozen=True)
class RolloutGroup:
    prompt_key: int
    responses: tuple[Rollout, ...]
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]

    def __post_init__(self):
        G = len(self.responses)
        if G < 2 or len(self.rewards) != G or len(self.advantages) != G:
            raise ValueError("a group needs G >= 2 aligned responses, rewards and advantages")

    @property
    def degenerate(self) -> bool:
        return len(set(self.rewards)) == 1


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_reward: float
    loss: float
    frac_truncated: float
    frac_degenerate: float

    def row(self) -> dict:
        return asdict(self)


@dataclass
class GrpoResult:
    params: PolicyParams
    metrics: list[StepMetrics] = field(default_factory=list)


def compute_advantages(rewards: Sequence[float], advantage_epsilon: float = 1e-8) -> list[float]:
    """Normalize rewards against their own group: ``(r - mean) / (std + eps)``.

    Population standard deviation. A group with all-equal rewards gets
    exactly zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards per group")
    std = r.std()
    if std == 0:
        return [0.0] * r.size
    return list((r - r.mean()) / (std + advantage_epsilon))


def overlong_mask(group: RolloutGroup) -> list[bool]:
    return [not resp.truncated for resp in group.responses]


def surrogate_loss(
    groups: RolloutGroup | Sequence[RolloutGroup], params: PolicyParams, config: GrpoConfig
) -> tuple[float, np.ndarray]:
    """Clipped surrogate over a rollout batch, token-mean normalized.

    For each included token: ``min(rho * A, clip(rho, 1 - eps_low, 1 + eps_high) * A)``
    with ``rho = exp(new_logprob - old_logprob)``; the loss is minus the sum
    of those terms divided by the number of included tokens in the batch.
    Truncated responses are excluded.
    """
    if isinstance(groups, RolloutGroup):
        groups = [groups]
    keys, seqs, old, adv = [], [], [], []
    for g in groups:
        for resp, a, keep in zip(g.responses, g.advantages, overlong_mask(g)):
            if not keep or not resp.tokens:
                continue
            keys.append(g.prompt_key)
            seqs.append(resp.tokens)
            old.extend(resp.old_logprobs)
            adv.extend([a] * len(resp.tokens))
    if not seqs:
        return 0.0, np.zeros_like(params.weights)
    states = token_states(params, keys, seqs)
    new_lp, probs = state_logprobs(params, states)
    old = np.asarray(old)
    A = np.asarray(adv)
    rho = np.exp(new_lp - old)
    clipped_rho = np.clip(rho, 1.0 - config.eps_low, 1.0 + config.eps_high)
    terms = np.minimum(rho * A, clipped_rho * A)
    # the clipped branch is constant in the parameters
    flat = ((A > 0) & (rho > 1.0 + config.eps_high)) | ((A < 0) & (rho < 1.0 - config.eps_low))
    T = len(states)
    coeffs = np.where(flat, 0.0, -A * rho / T)
    grad = accumulate_grad(params, states, probs, coeffs)
    return float(-terms.sum() / T), grad


def collect_groups(
    params: PolicyParams,
    problems: Sequence[dict],
    config: GrpoConfig,
    rng: np.random.Generator,
    reward_fn: Callable[[str, str], float] | None = None,
) -> list[RolloutGroup]:
    """Sample ``G`` responses per problem from ``params`` and score them."""
    if reward_fn is None:
        reward_fn = lambda text, gold: verifier.reward(text, gold).reward  # noqa: E731
    G = config.group_size
    keys = [params.key_for(p["prompt"]) for p in problems for _ in range(G)]
    samples = sample_batch(params, keys, config.max_gen_len, config.temperature, rng)
    groups = []
    for i, p in enumerate(problems):
        chunk = samples[i * G:(i + 1) * G]
        rewards = [reward_fn(params.vocab.decode(s.tokens), p["gold"]) for s in chunk]
        rollouts = tuple(Rollout(s.tokens, s.logprobs, s.truncated) for s in chunk)
        groups.append(
            RolloutGroup(
                keys[i * G],
                rollouts,
                tuple(rewards),
                tuple(compute_advantages(rewards, config.advantage_epsilon)),
            )
        )
    return groups


def grpo_step(
    params: PolicyParams,
    problems: Sequence[dict],
    config: GrpoConfig,
    rng: np.random.Generator,
    step: int = 0,
) -> tuple[PolicyParams, StepMetrics]:
    """Sample, score, and apply exactly one gradient update (old = current params)."""
    if not problems:
        raise ValueError("problems must be nonempty")
    groups = collect_groups(params, problems, config, rng)
    loss, grad = surrogate_loss(groups, params, config)
    if np.any(grad):
        params = params.with_weights(params.weights - config.learning_rate * grad)
    n_resp = sum(len(g.responses) for g in groups)
    metrics = StepMetrics(
        step=step,
        mean_reward=float(np.mean([r for g in groups for r in g.rewards])),
        loss=loss,
        frac_truncated=sum(r.truncated for g in groups for r in g.responses) / n_resp,
        frac_degenerate=sum(g.degenerate for g in groups) / len(groups),
    )
    return params, metrics


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    cursor = 0
    while True:
        idx = []
        while len(idx) < size:
            if cursor == n:
                order = rng.permutation(n)
                cursor = 0
            take = min(size - len(idx), n - cursor)
            idx.extend(int(i) for i in order[cursor:cursor + take])
            cursor += take
        yield idx


def grpo_train(
    params: PolicyParams,
    problems: Sequence[dict],
    config: GrpoConfig,
    metrics_path=None,
    checkpoint_prefix=None,
    on_step: Optional[Callable[[StepMetrics], None]] = None,
) -> GrpoResult:
    """Run ``config.steps`` GRPO steps over shuffled prompt batches.

    ``problems`` are plain problem dicts (``prompt``, ``gold``); use
    :func:`zpdrl.curator.load_curated` to obtain them from a curated file,
    which is where difficulty labels are enforced.
    """
    if not problems:
        raise ValueError("problems must be nonempty")
    rng = np.random.default_rng(config.seed)
    batches = _batches(len(problems), config.prompts_per_batch, rng)
    result = GrpoResult(params)
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
    try:
        for step in range(1, config.steps + 1):
            batch = [problems[i] for i in next(batches)]
            result.params, m = grpo_step(result.params, batch, config, rng, step=step)
            result.metrics.append(m)
            if writer is not None:
                writer.writerow({k: _fmt(v) for k, v in m.row().items()})
            if on_step is not None:
                on_step(m)
            if checkpoint_prefix and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(result.params, Path(f"{checkpoint_prefix}.step{step}"))
    finally:
        if fh is not None:
            fh.close()
    return result


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def windowed_mean(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing means over complete windows; entry ``i`` covers ``values[i:i + window]``."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.zeros(0)
    c = np.concatenate([[0.0], np.cumsum(v)])
    return (c[window:] - c[:-window]) / window


def steps_to_reach(values: Sequence[float], threshold: float, window: int) -> Optional[int]:
    """First step (1-based) at which the trailing ``window`` mean reaches ``threshold``."""
    w = windowed_mean(values, window)
    hits = np.nonzero(w >= threshold)[0]
    return None if len(hits) == 0 else int(hits[0]) + window
