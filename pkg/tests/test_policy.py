import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import SMALL_K, SMALL_VOCAB, directional_check, manual_logits, random_params, softmax_row
from zpdrl.policy import (
    TOY_VOCAB,
    PolicyParams,
    ToyTask,
    Vocab,
    checkpoint_bytes,
    load_checkpoint,
    logits,
    position_bucket,
    prompt_key,
    sample_batch,
    save_checkpoint,
    sequence_logprob,
    toy_trace,
)

STOP = SMALL_VOCAB.stop
MAX_LEN = 3


def outcomes(max_len=MAX_LEN):
    """Every possible sample: sequences ending in STOP, or max_len tokens without one."""
    words = [i for i in range(len(SMALL_VOCAB)) if i != STOP]
    out = []
    for L in range(1, max_len + 1):
        for body in itertools.product(words, repeat=L - 1):
            out.append(tuple(body) + (STOP,))
    out.extend(itertools.product(words, repeat=max_len))
    return out


def manual_logprob(params, key, tokens):
    lp, prev = 0.0, STOP
    for pos, tok in enumerate(tokens):
        p = softmax_row(manual_logits(params, key, prev, pos))
        lp += np.log(p[tok])
        prev = tok
    return lp


def test_enumeration_sums_to_one():
    rng = np.random.default_rng(0)
    for _ in range(5):
        params = random_params(rng)
        key = int(rng.integers(SMALL_K))
        total = sum(np.exp(sequence_logprob(params, key, seq)[0]) for seq in outcomes())
        assert abs(total - 1.0) < 1e-12


def test_logprob_matches_manual_product():
    rng = np.random.default_rng(1)
    params = random_params(rng)
    for seq in outcomes():
        assert abs(sequence_logprob(params, 2, seq)[0] - manual_logprob(params, 2, seq)) < 1e-12


def test_sampling_matches_enumeration():
    rng = np.random.default_rng(2)
    params = random_params(rng, scale=0.7)
    key = 1
    N = 20000
    samples = sample_batch(params, [key] * N, MAX_LEN, 1.0, np.random.default_rng(3))
    counts = {}
    for s in samples:
        counts[s.tokens] = counts.get(s.tokens, 0) + 1
    for seq in outcomes():
        p = np.exp(sequence_logprob(params, key, seq)[0])
        sigma = np.sqrt(N * p * (1 - p))
        assert abs(counts.get(seq, 0) - N * p) <= 3 * sigma + 1
    for s in samples[:100]:
        assert s.truncated == (STOP not in s.tokens)
        assert abs(sum(s.logprobs) - sequence_logprob(params, key, s.tokens)[0]) < 1e-10


def test_greedy_and_determinism():
    rng = np.random.default_rng(4)
    params = random_params(rng)
    a = sample_batch(params, [0, 1, 2], 5, 0.0, None)
    b = sample_batch(params, [0, 1, 2], 5, 0.0, None)
    assert a == b
    first = a[0].tokens[0]
    assert first == int(np.argmax(manual_logits(params, 0, STOP, 0)))
    x = sample_batch(params, [0] * 8, 5, 1.0, np.random.default_rng(9))
    y = sample_batch(params, [0] * 8, 5, 1.0, np.random.default_rng(9))
    assert x == y


def test_sequence_logprob_gradient():
    rng = np.random.default_rng(5)
    errs = []
    for _ in range(120):
        params = random_params(rng)
        key = int(rng.integers(SMALL_K))
        L = int(rng.integers(1, 10))
        seq = [int(t) for t in rng.integers(0, len(SMALL_VOCAB), size=L)]
        _, grad = sequence_logprob(params, key, seq)
        errs.append(directional_check(lambda p: sequence_logprob(p, key, seq)[0], params, grad, rng))
    assert max(errs) < 1e-5


def test_logits_bounds_and_bucket():
    params = PolicyParams.zeros()
    assert logits(params, 0, 0, 100).shape == (len(TOY_VOCAB),)
    with pytest.raises(IndexError):
        logits(params, params.K, 0, 0)
    with pytest.raises(IndexError):
        logits(params, 0, len(TOY_VOCAB), 0)
    assert [position_bucket(p) for p in (0, 3, 4, 15, 16, 99)] == [0, 0, 1, 3, 4, 4]


def test_params_are_immutable_and_validated():
    params = PolicyParams.zeros()
    with pytest.raises(ValueError):
        params.weights[0, 0] = 1.0
    bad = np.zeros(params.weights.shape)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        params.with_weights(bad)
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((3, 3)))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    params = random_params(rng)
    path = tmp_path / "c.ckpt"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert np.array_equal(back.weights, params.weights)
    assert back.vocab == params.vocab and back.K == params.K
    assert checkpoint_bytes(back) == path.read_bytes()
    path.write_bytes(b"garbage")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_vocab_encoding():
    ids = TOY_VOCAB.encode("sum\\boxed{12}")
    assert TOY_VOCAB.decode(ids) == "sum\\boxed{12}"
    assert len(ids) == 3 + 1 + 2 + 1
    with pytest.raises(ValueError):
        TOY_VOCAB.encode("compute 1?2")
    assert TOY_VOCAB.encode("?1", errors="ignore") == TOY_VOCAB.encode("1")
    with pytest.raises(ValueError):
        Vocab(["a", "b"])


@settings(max_examples=50)
@given(st.text(alphabet="0123456789+-×=cdemoprstu ", max_size=20))
def test_vocab_round_trip(text):
    assert TOY_VOCAB.decode(TOY_VOCAB.encode(text)) == text


def test_toy_task_splits():
    task = ToyTask()
    everything = task.all_problems()
    assert len(everything) == 200 and len({p["id"] for p in everything}) == 200
    splits = task.splits()
    assert sum(len(v) for v in splits.values()) == 200
    train_keys = {prompt_key(p["prompt"]) for p in splits["train"]}
    eval_keys = {prompt_key(p["prompt"]) for p in splits["eval"]}
    assert not train_keys & eval_keys
    assert toy_trace(3, "×", 4) == "prod\\boxed{12}"
    assert ToyTask(split_seed=1).splits()["eval"] != splits["eval"]
