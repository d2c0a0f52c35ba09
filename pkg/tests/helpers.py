"""Shared oracles and fixtures-as-functions for the test suite."""

from __future__ import annotations

import numpy as np

from zpdrl import curator
from zpdrl.backend import GenRequest, GenResponse, ToyPolicyBackend
from zpdrl.grpo import GrpoConfig, grpo_train
from zpdrl.policy import N_BUCKETS, PolicyParams, ToyTask, Vocab
from zpdrl.sft import SftConfig, build_examples, sft_train

SMALL_VOCAB = Vocab(["a", "b", "c", "d", "<stop>"])
SMALL_K = 3
FD_STEP = 1e-6


def random_params(rng, scale=1.0, vocab=SMALL_VOCAB, K=SMALL_K) -> PolicyParams:
    V = len(vocab)
    return PolicyParams(rng.normal(0.0, scale, size=(V + N_BUCKETS + K, V)), vocab, K)


def directional_check(f, params: PolicyParams, grad: np.ndarray, rng, h: float = FD_STEP) -> float:
    """Relative error between a central difference along a random direction and ``grad``."""
    d = rng.normal(size=params.weights.shape)
    d /= np.linalg.norm(d)
    fd = (f(params.with_weights(params.weights + h * d)) - f(params.with_weights(params.weights - h * d))) / (2 * h)
    an = float(np.sum(grad * d))
    return abs(fd - an) / max(abs(fd), abs(an), 1e-3)


def softmax_row(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def manual_logits(params: PolicyParams, key: int, prev: int, pos: int) -> np.ndarray:
    """Loop-free reference for one state, written independently of the library."""
    V = params.V
    bucket = min(pos // 4, N_BUCKETS - 1)
    W = params.weights
    return W[prev] + W[V + bucket] + W[V + N_BUCKETS + key]


class BernoulliBackend:
    """Each attempt is correct independently with probability ``p``."""

    name = "bernoulli"

    def __init__(self, p: float, gold: str = "1", wrong: str = "0"):
        self.p, self.gold, self.wrong = p, gold, wrong

    def generate(self, request: GenRequest) -> GenResponse:
        rng = np.random.default_rng(request.seed)
        hits = rng.random(request.n) < self.p
        texts = tuple(f"\\boxed{{{self.gold if h else self.wrong}}}" for h in hits)
        return GenResponse(texts, ("stop",) * request.n)


class EchoBackend:
    """Answers every prompt with a fixed mapping prompt -> text."""

    name = "echo"

    def __init__(self, answers: dict, default: str = "no idea"):
        self.answers, self.default = answers, default

    def generate(self, request: GenRequest) -> GenResponse:
        text = self.answers.get(request.user_prompt, self.default)
        return GenResponse((text,) * request.n, ("stop",) * request.n)


def toy_pipeline(seed: int, split_seed: int = 0, sft_steps: int = 800, grpo_steps: int = 300):
    """SFT on the train split, curate it with the SFT policy, then GRPO from SFT and from zero."""
    train = ToyTask(split_seed=split_seed).splits()["train"]
    zero = PolicyParams.zeros()
    examples, _ = build_examples(zero, train, 128)
    sft = sft_train(zero, examples, SftConfig(steps=sft_steps, seed=seed)).params
    problems = [curator.Problem.from_dict(p) for p in train]
    gen = curator.GenParams(seed=seed)
    backend = ToyPolicyBackend(sft)
    records = [curator.score_problem(p, backend, 16, gen) for p in problems]
    kept = {r.problem_id for r in curator.zone_filter(records)}
    curated = [p for p in problems if p.id in kept]
    config = GrpoConfig(group_size=4, steps=grpo_steps, seed=seed)
    from_sft = grpo_train(sft, curated, config)
    from_zero = grpo_train(zero, curated, config)
    return {"sft": sft, "curated": curated, "from_sft": from_sft, "from_zero": from_zero}


ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
