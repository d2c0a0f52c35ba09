"""scikit-learn style wrappers around curation and the two training stages.

Inputs ``X`` are sequences of problems (``Problem`` objects or dicts with
``id``/``prompt``/``gold`` and, for SFT, ``response``).
"""

from __future__ import annotations

from typing import Optional

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import curator
from .backend import Backend, ToyPolicyBackend
from .evaluation import evaluate
from .grpo import GrpoConfig, grpo_train
from .policy import DEFAULT_K, PolicyParams, sample_batch
from .sft import SftConfig, build_examples, sft_train


def check_problems(X, require=("id", "prompt", "gold")) -> list[curator.Problem]:
    """Coerce ``X`` to a nonempty list of Problems with the ``require`` fields."""
    if X is None or isinstance(X, (str, bytes)):
        raise TypeError("X must be a sequence of problems")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, curator.Problem):
            p = item
        elif isinstance(item, dict):
            if "id" not in item:
                item = {**item, "id": str(i)}
            p = curator.Problem.from_dict(item)
        else:
            raise TypeError(f"X[{i}] is {type(item).__name__}, expected Problem or dict")
        for key in require:
            if key not in ("id", "prompt", "gold") and key not in p.extra:
                raise ValueError(f"X[{i}] lacks {key!r}")
        out.append(p)
    if not out:
        raise ValueError("X is empty")
    return out


def _init_params(init: Optional[PolicyParams], K: int) -> PolicyParams:
    if init is None:
        return PolicyParams.zeros(K=K)
    if not isinstance(init, PolicyParams):
        raise TypeError("init must be PolicyParams or None")
    return init


class ZPDCurator(BaseEstimator, TransformerMixin):
    """Scores problems by repeated sampling; ``transform`` keeps the learning zone.

    After ``fit``: ``records_`` (id -> AttemptRecord) and ``labels_``
    (id -> DifficultyLabel, survivors only).
    """

    def __init__(self, backend: Backend = None, n_attempts=16, temperature=1.0, max_tokens=64, seed=0):
        self.backend = backend
        self.n_attempts = n_attempts
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.seed = seed

    def fit(self, X, y=None):
        if self.backend is None:
            raise ValueError("ZPDCurator needs a backend")
        problems = check_problems(X)
        gen = curator.GenParams(max_tokens=self.max_tokens, temperature=self.temperature, seed=self.seed)
        records = [curator.score_problem(p, self.backend, self.n_attempts, gen) for p in problems]
        self.records_ = {r.problem_id: r for r in records}
        self.labels_ = curator.stratify(curator.zone_filter(records)).labels
        return self

    def transform(self, X):
        check_is_fitted(self, "labels_")
        problems = check_problems(X)
        unknown = [p.id for p in problems if p.id not in self.records_]
        if unknown:
            raise ValueError(f"problems not seen during fit: {unknown[:5]}")
        return [p for p in problems if p.id in self.labels_]


class _PolicyMixin:
    def predict(self, X, max_gen_len: int = 64):
        """Greedy completions, one string per problem."""
        check_is_fitted(self, "params_")
        problems = check_problems(X)
        keys = [self.params_.key_for(p.prompt) for p in problems]
        samples = sample_batch(self.params_, keys, max_gen_len, 0.0, None)
        return [self.params_.vocab.decode(s.tokens) for s in samples]

    def score(self, X, y=None, max_gen_len: int = 64):
        """Greedy verified accuracy."""
        check_is_fitted(self, "params_")
        return evaluate(self.params_, check_problems(X), max_gen_len=max_gen_len).accuracy

    def as_backend(self, name: str = "toy-policy") -> ToyPolicyBackend:
        check_is_fitted(self, "params_")
        return ToyPolicyBackend(self.params_, name)


class SFTPolicy(_PolicyMixin, BaseEstimator):
    def __init__(self, init=None, K=DEFAULT_K, batch_size=16, steps=800, learning_rate=4.0, seed=0,
                 max_seq_len=128, mask_prompt=True):
        self.init = init
        self.K = K
        self.batch_size = batch_size
        self.steps = steps
        self.learning_rate = learning_rate
        self.seed = seed
        self.max_seq_len = max_seq_len
        self.mask_prompt = mask_prompt

    def fit(self, X, y=None):
        problems = check_problems(X, require=("prompt", "response"))
        params = _init_params(self.init, self.K)
        config = SftConfig(self.batch_size, self.steps, self.learning_rate, self.seed, self.max_seq_len,
                           self.mask_prompt)
        examples, dropped = build_examples(params, [p.to_dict() for p in problems], self.max_seq_len)
        result = sft_train(params, examples, config)
        self.params_ = result.params
        self.loss_curve_ = result.losses
        self.n_dropped_ = dropped
        return self


class GRPOPolicy(_PolicyMixin, BaseEstimator):
    def __init__(self, init=None, K=DEFAULT_K, group_size=4, prompts_per_batch=14, steps=300,
                 learning_rate=80.0, eps_low=0.2, eps_high=0.28, max_gen_len=64, seed=0):
        self.init = init
        self.K = K
        self.group_size = group_size
        self.prompts_per_batch = prompts_per_batch
        self.steps = steps
        self.learning_rate = learning_rate
        self.eps_low = eps_low
        self.eps_high = eps_high
        self.max_gen_len = max_gen_len
        self.seed = seed

    def fit(self, X, y=None):
        problems = check_problems(X)
        config = GrpoConfig(
            group_size=self.group_size,
            prompts_per_batch=self.prompts_per_batch,
            steps=self.steps,
            learning_rate=self.learning_rate,
            eps_low=self.eps_low,
            eps_high=self.eps_high,
            max_gen_len=self.max_gen_len,
            seed=self.seed,
        )
        result = grpo_train(_init_params(self.init, self.K), problems, config)
        self.params_ = result.params
        self.metrics_ = result.metrics
        return self
