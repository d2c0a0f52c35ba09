"""Supervised fine-tuning on reasoning traces (token-level NLL, plain SGD)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import Iterable, Sequence

import numpy as np

from .policy import PolicyParams, accumulate_grad, state_logprobs, token_states

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SftExample:
    prompt_key: int
    prompt_tokens: tuple[int, ...]
    response_tokens: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.prompt_tokens) + len(self.response_tokens)


@dataclass(frozen=True)
class SftConfig:
    batch_size: int = 16
    steps: int = 800
    learning_rate: float = 4.0
    seed: int = 0
    max_seq_len: int = 128
    mask_prompt: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SftResult:
    params: PolicyParams
    losses: list[float]
    n_dropped: int = 0


def make_example(params: PolicyParams, prompt: str, response: str) -> SftExample:
    """Tokenize one (prompt, trace) pair; the response gains a trailing STOP.

    Prompt characters outside the vocabulary are skipped (prompt tokens only
    matter when prompt masking is off); the response must tokenize exactly.
    """
    vocab = params.vocab
    response_tokens = tuple(vocab.encode(response)) + (vocab.stop,)
    prompt_tokens = tuple(vocab.encode(prompt, errors="ignore"))
    return SftExample(params.key_for(prompt), prompt_tokens, response_tokens)


def build_examples(
    params: PolicyParams, records: Iterable[dict], max_seq_len: int
) -> tuple[list[SftExample], int]:
    """Turn ``{"prompt", "response"}`` records into examples.

    Over-length examples are dropped, not truncated, since a cut trace loses
    its boxed answer. Returns the kept examples and the number dropped.
    """
    kept, dropped = [], 0
    for rec in records:
        ex = make_example(params, rec["prompt"], rec["response"])
        if len(ex) > max_seq_len:
            dropped += 1
            continue
        kept.append(ex)
    if dropped:
        logger.warning("dropped %d over-length SFT examples (max_seq_len=%d)", dropped, max_seq_len)
    return kept, dropped


def _segments(batch: Sequence[SftExample], mask_prompt: bool):
    keys, seqs = [], []
    for ex in batch:
        if not ex.response_tokens:
            raise ValueError("empty response")
        keys.append(ex.prompt_key)
        seqs.append(ex.response_tokens)
        if not mask_prompt and ex.prompt_tokens:
            # unmasked prompts are scored as their own segment from the start state
            keys.append(ex.prompt_key)
            seqs.append(ex.prompt_tokens)
    return keys, seqs


def sft_loss(params: PolicyParams, batch: Sequence[SftExample], mask_prompt: bool = True) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood per scored token, and its exact gradient."""
    if not batch:
        raise ValueError("batch must be nonempty")
    keys, seqs = _segments(batch, mask_prompt)
    states = token_states(params, keys, seqs)
    token_lp, probs = state_logprobs(params, states)
    T = len(states)
    grad = accumulate_grad(params, states, probs, np.full(T, -1.0 / T))
    return float(-token_lp.sum() / T), grad


def sft_train(params: PolicyParams, dataset: Sequence[SftExample], config: SftConfig) -> SftResult:
    """SGD over shuffled epochs; deterministic given (seed, config, dataset)."""
    if not dataset:
        raise ValueError("dataset must be nonempty")
    rng = np.random.default_rng(config.seed)
    W = np.array(params.weights)
    current = params
    losses: list[float] = []
    order = rng.permutation(len(dataset))
    cursor = 0
    for _ in range(config.steps):
        idx = []
        while len(idx) < config.batch_size:
            if cursor == len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            take = min(config.batch_size - len(idx), len(order) - cursor)
            idx.extend(order[cursor:cursor + take])
            cursor += take
        loss, grad = sft_loss(current, [dataset[i] for i in idx], config.mask_prompt)
        W -= config.learning_rate * grad
        current = params.with_weights(W)
        losses.append(loss)
    return SftResult(current, losses)
