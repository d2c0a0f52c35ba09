"""Toy autoregressive policy with exact log-probabilities and gradients.

The policy is a linear softmax over three one-hot feature groups:

* the previous token (``V`` rows; the STOP token doubles as the start symbol),
* the position bucket (5 rows: positions 0-3, 4-7, 8-11, 12-15, 16+),
* the prompt key, a stable hash of the prompt text mod ``K``.

The logits at a state are the sum of the three active weight rows, so the
gradient of a log-probability touches exactly three rows per position. The
prompt-key rows let the policy memorize per-prompt answers; different
prompts whose keys collide share those rows.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BUCKET_WIDTH = 4
N_BUCKETS = 5
DEFAULT_K = 512
STOP = "<stop>"
CHECKPOINT_MAGIC = b"ZPDRLCK1"
CHECKPOINT_VERSION = 1


class Vocab:
    """Ordered token list with a single STOP token and greedy longest-match encoding."""

    def __init__(self, tokens: Sequence[str], stop: str = STOP):
        tokens = tuple(tokens)
        if tokens.count(stop) != 1:
            raise ValueError(f"vocabulary must contain {stop!r} exactly once")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        if any(t == "" for t in tokens):
            raise ValueError("empty token")
        self.tokens = tokens
        self.stop_token = stop
        self.index = {t: i for i, t in enumerate(tokens)}
        self.stop = self.index[stop]
        self._by_length = sorted((t for t in tokens if t != stop), key=len, reverse=True)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens and self.stop == other.stop

    def __repr__(self) -> str:
        return f"Vocab(size={len(self)})"

    def encode(self, text: str, errors: str = "strict") -> list[int]:
        """Greedy longest-match tokenization. ``errors='ignore'`` skips unknown characters."""
        ids = []
        i = 0
        while i < len(text):
            for tok in self._by_length:
                if text.startswith(tok, i):
                    ids.append(self.index[tok])
                    i += len(tok)
                    break
            else:
                if errors == "ignore":
                    i += 1
                    continue
                raise ValueError(f"cannot tokenize {text[i:i + 10]!r}")
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i != self.stop)


TOY_TOKENS = (
    tuple("0123456789")
    + ("+", "-", "×", "=")
    + tuple("cdemoprstu")
    + (" ", "\\boxed{", "}", STOP)
)
TOY_VOCAB = Vocab(TOY_TOKENS)


def position_bucket(position: int) -> int:
    return min(position // BUCKET_WIDTH, N_BUCKETS - 1)


def prompt_key(text: str, K: int = DEFAULT_K) -> int:
    """Stable hash of the prompt text into ``[0, K)``."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % K


@dataclass(frozen=True)
class PolicyParams:
    """Immutable weight table of shape ``(V + 5 + K, V)``."""

    weights: np.ndarray
    vocab: Vocab = field(default=TOY_VOCAB)
    K: int = DEFAULT_K

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        V = len(self.vocab)
        if w.shape != (V + N_BUCKETS + self.K, V):
            raise ValueError(f"weights shape {w.shape} != {(V + N_BUCKETS + self.K, V)}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights contain NaN or Inf")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, vocab: Vocab = TOY_VOCAB, K: int = DEFAULT_K) -> "PolicyParams":
        V = len(vocab)
        return cls(np.zeros((V + N_BUCKETS + K, V)), vocab, K)

    @property
    def V(self) -> int:
        return len(self.vocab)

    @property
    def n_features(self) -> int:
        return self.V + N_BUCKETS + self.K

    def with_weights(self, weights: np.ndarray) -> "PolicyParams":
        return PolicyParams(weights, self.vocab, self.K)

    def key_for(self, prompt: str) -> int:
        return prompt_key(prompt, self.K)


def _check_state(params: PolicyParams, key: int, prev: int, position: int) -> None:
    if not 0 <= key < params.K:
        raise IndexError(f"prompt key {key} out of range [0, {params.K})")
    if not 0 <= prev < params.V:
        raise IndexError(f"token {prev} out of range [0, {params.V})")
    if position < 0:
        raise IndexError(f"negative position {position}")


def logits(params: PolicyParams, prompt_key: int, prev_token: int, position: int) -> np.ndarray:
    _check_state(params, prompt_key, prev_token, position)
    W = params.weights
    V = params.V
    return W[prev_token] + W[V + position_bucket(position)] + W[V + N_BUCKETS + prompt_key]


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# vectorized scoring over teacher-forced token sequences
# --------------------------------------------------------------------------


@dataclass
class TokenStates:
    """Flattened feature rows and targets for a set of teacher-forced sequences."""

    prev_rows: np.ndarray
    bucket_rows: np.ndarray
    key_rows: np.ndarray
    targets: np.ndarray
    seq_index: np.ndarray  # which input sequence each token came from

    def __len__(self) -> int:
        return len(self.targets)


def token_states(params: PolicyParams, keys: Sequence[int], sequences: Sequence[Sequence[int]]) -> TokenStates:
    V = params.V
    prev, bucket, key_rows, targets, seq_index = [], [], [], [], []
    for s, (key, seq) in enumerate(zip(keys, sequences)):
        L = len(seq)
        if L == 0:
            continue
        if not 0 <= key < params.K:
            raise IndexError(f"prompt key {key} out of range [0, {params.K})")
        seq = np.asarray(seq, dtype=np.int64)
        if seq.min() < 0 or seq.max() >= V:
            raise IndexError("token id out of range")
        p = np.empty(L, dtype=np.int64)
        p[0] = params.vocab.stop
        p[1:] = seq[:-1]
        prev.append(p)
        bucket.append(V + np.minimum(np.arange(L) // BUCKET_WIDTH, N_BUCKETS - 1))
        key_rows.append(np.full(L, V + N_BUCKETS + key, dtype=np.int64))
        targets.append(seq)
        seq_index.append(np.full(L, s, dtype=np.int64))
    if not targets:
        empty = np.zeros(0, dtype=np.int64)
        return TokenStates(empty, empty, empty, empty, empty)
    return TokenStates(*(np.concatenate(x) for x in (prev, bucket, key_rows, targets, seq_index)))


def state_logprobs(params: PolicyParams, states: TokenStates) -> tuple[np.ndarray, np.ndarray]:
    """Per-token log-probabilities of the targets and the full softmax rows."""
    W = params.weights
    z = W[states.prev_rows] + W[states.bucket_rows] + W[states.key_rows]
    logp = log_softmax(z)
    token_lp = logp[np.arange(len(states)), states.targets]
    return token_lp, np.exp(logp)


def accumulate_grad(params: PolicyParams, states: TokenStates, probs: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_t coeffs[t] * log pi(target_t | state_t)`` w.r.t. the weights."""
    grad = np.zeros_like(params.weights)
    if len(states) == 0:
        return grad
    g = -probs * coeffs[:, None]
    g[np.arange(len(states)), states.targets] += coeffs
    # fixed index order keeps the summation deterministic
    np.add.at(grad, states.prev_rows, g)
    np.add.at(grad, states.bucket_rows, g)
    np.add.at(grad, states.key_rows, g)
    return grad


def sequence_logprob(params: PolicyParams, prompt_key: int, tokens: Sequence[int]) -> tuple[float, np.ndarray]:
    """Log-probability of a response and its exact gradient w.r.t. every weight."""
    states = token_states(params, [prompt_key], [tokens])
    token_lp, probs = state_logprobs(params, states)
    grad = accumulate_grad(params, states, probs, np.ones(len(states)))
    return float(token_lp.sum()), grad


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    truncated: bool


def sample_batch(
    params: PolicyParams,
    prompt_keys: Sequence[int],
    max_len: int,
    temperature: float,
    rng: np.random.Generator,
) -> list[Sample]:
    """Sample one response per entry of ``prompt_keys`` in lockstep.

    Temperature 0 is greedy decoding (ties go to the lowest token index).
    The returned log-probabilities are always under the untempered policy.
    One uniform draw per sequence is consumed at every step while any
    sequence is still running, so results depend only on the inputs and
    the generator state.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    W = params.weights
    V = params.V
    keys = np.asarray(prompt_keys, dtype=np.int64)
    B = len(keys)
    if B == 0:
        return []
    if keys.min() < 0 or keys.max() >= params.K:
        raise IndexError("prompt key out of range")
    key_part = W[V + N_BUCKETS + keys]
    prev = np.full(B, params.vocab.stop, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    tokens = np.zeros((B, max_len), dtype=np.int64)
    lps = np.zeros((B, max_len))
    lengths = np.full(B, max_len, dtype=np.int64)
    for t in range(max_len):
        z = W[prev] + W[V + position_bucket(t)] + key_part
        logp = log_softmax(z)
        if temperature == 0:
            tok = np.argmax(z, axis=1)
        else:
            cdf = np.cumsum(np.exp(log_softmax(z / temperature)), axis=1)
            u = rng.random(B) * cdf[:, -1]
            tok = np.minimum((cdf <= u[:, None]).sum(axis=1), V - 1)
        tokens[:, t] = tok
        lps[:, t] = logp[np.arange(B), tok]
        stopped = alive & (tok == params.vocab.stop)
        lengths[stopped] = t + 1
        alive &= ~stopped
        prev = tok
        if not alive.any():
            break
    out = []
    for b in range(B):
        L = int(lengths[b])
        out.append(Sample(tuple(int(x) for x in tokens[b, :L]), tuple(float(x) for x in lps[b, :L]), bool(alive[b])))
    return out


def sample(
    params: PolicyParams, prompt_key: int, max_len: int, temperature: float, rng: np.random.Generator
) -> Sample:
    return sample_batch(params, [prompt_key], max_len, temperature, rng)[0]


# --------------------------------------------------------------------------
# checkpoints: magic, u32 header length, JSON header, little-endian float64 weights
# --------------------------------------------------------------------------


def checkpoint_bytes(params: PolicyParams) -> bytes:
    header = {
        "format": "zpdrl-linear-softmax",
        "version": CHECKPOINT_VERSION,
        "V": params.V,
        "K": params.K,
        "n_position_buckets": N_BUCKETS,
        "bucket_width": BUCKET_WIDTH,
        "feature_layout": ["prev_token", "position_bucket", "prompt_key"],
        "vocab": list(params.vocab.tokens),
        "stop": params.vocab.stop_token,
        "dtype": "<f8",
        "shape": list(params.weights.shape),
    }
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    body = params.weights.astype("<f8").tobytes(order="C")
    return CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + body


def save_checkpoint(params: PolicyParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> PolicyParams:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if header["n_position_buckets"] != N_BUCKETS or header["bucket_width"] != BUCKET_WIDTH:
        raise ValueError(f"{path}: incompatible feature layout")
    vocab = Vocab(header["vocab"], stop=header["stop"])
    shape = tuple(header["shape"])
    body = data[12 + n:]
    if len(body) != 8 * shape[0] * shape[1]:
        raise ValueError(f"{path}: truncated weight table")
    weights = np.frombuffer(body, dtype="<f8").reshape(shape)
    return PolicyParams(weights, vocab, header["K"])


# --------------------------------------------------------------------------
# synthetic arithmetic task
# --------------------------------------------------------------------------

OPS = {"+": ("sum", lambda a, b: a + b), "×": ("prod", lambda a, b: a * b)}


def toy_trace(a: int, op: str, b: int) -> str:
    """Templated reasoning trace: the operation word, then the boxed answer."""
    word, fn = OPS[op]
    return f"{word}\\boxed{{{fn(a, b)}}}"


@dataclass(frozen=True)
class ToyTask:
    """Generator for ``compute a∘b`` problems over single digits.

    Problems are split by prompt key: the distinct keys are shuffled with
    ``split_seed`` and dealt to the named splits in proportion to
    ``fractions``, so no key (and hence no colliding prompt) is shared
    between splits.
    """

    split_seed: int = 0
    fractions: tuple[tuple[str, float], ...] = (("train", 0.8), ("eval", 0.2))
    K: int = DEFAULT_K

    def all_problems(self) -> list[dict]:
        problems = []
        for op in OPS:
            for a in range(10):
                for b in range(10):
                    prompt = f"compute {a}{op}{b}"
                    word, fn = OPS[op]
                    problems.append(
                        {
                            "id": f"toy-{word}-{a}-{b}",
                            "prompt": prompt,
                            "gold": str(fn(a, b)),
                            "image_ref": None,
                            "source": "toy-arithmetic",
                            "response": toy_trace(a, op, b),
                        }
                    )
        return problems

    def split_of_key(self) -> dict[int, str]:
        keys = sorted({prompt_key(p["prompt"], self.K) for p in self.all_problems()})
        rng = np.random.default_rng(self.split_seed)
        order = rng.permutation(len(keys))
        total = sum(f for _, f in self.fractions)
        assignment = {}
        start = 0
        for i, (name, frac) in enumerate(self.fractions):
            stop = len(keys) if i == len(self.fractions) - 1 else start + int(round(len(keys) * frac / total))
            for j in order[start:stop]:
                assignment[keys[j]] = name
            start = stop
        return assignment

    def splits(self) -> dict[str, list[dict]]:
        assignment = self.split_of_key()
        out: dict[str, list[dict]] = {name: [] for name, _ in self.fractions}
        for p in self.all_problems():
            out[assignment[prompt_key(p["prompt"], self.K)]].append(p)
        return out
