import numpy as np
import pytest
from sklearn.base import clone

from helpers import BernoulliBackend
from zpdrl.config import TrainConfig
from zpdrl.estimators import GRPOPolicy, SFTPolicy, ZPDCurator, check_problems
from zpdrl.policy import ToyTask


def test_large_presets():
    small = TrainConfig.preset("scale_3b")
    assert (small.group_size, small.prompts_per_batch, small.rl_steps) == (4, 14, 300)
    large = TrainConfig.preset("scale_7b")
    assert (large.group_size, large.prompts_per_batch, large.rl_steps) == (14, 48, 40)
    for cfg in (small, large):
        assert (cfg.max_gen_len, cfg.max_seq_len, cfg.sft_batch_size, cfg.n_attempts) == (8192, 32768, 128, 16)
    with pytest.raises(ValueError):
        TrainConfig.preset("nope")


def test_config_round_trip_and_views():
    cfg = TrainConfig.preset("toy", seed=7)
    assert TrainConfig.from_json(cfg.to_json()) == cfg
    assert cfg.grpo_config().seed == 7 and cfg.grpo_config().group_size == 4
    assert cfg.sft_config().learning_rate == cfg.sft_learning_rate
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"unknown": 1})


def test_check_problems():
    with pytest.raises(TypeError):
        check_problems("abc")
    with pytest.raises(ValueError):
        check_problems([])
    with pytest.raises(ValueError):
        check_problems([{"prompt": "q", "gold": "1"}], require=("prompt", "response"))
    (p,) = check_problems([{"prompt": "q", "gold": "1"}])
    assert p.id == "0"


def test_curator_estimator():
    X = [{"id": f"p{i}", "prompt": f"q{i}", "gold": "1"} for i in range(50)]
    est = ZPDCurator(backend=BernoulliBackend(0.5), seed=2)
    kept = est.fit_transform(X)
    assert len(kept) == len(est.labels_) and 0 < len(kept) <= 50
    assert est.get_params()["n_attempts"] == 16
    with pytest.raises(ValueError):
        est.transform([{"id": "new", "prompt": "x", "gold": "1"}])
    with pytest.raises(ValueError):
        ZPDCurator().fit(X)


def test_policy_estimators_fit_predict_score():
    train = ToyTask().splits()["train"]
    sft = SFTPolicy(steps=800).fit(train)
    assert len(sft.loss_curve_) == 800
    preds = sft.predict(train[:3])
    assert all(p.endswith("}") for p in preds)
    base = sft.score(train)
    rl = GRPOPolicy(init=sft.params_, steps=60, seed=0).fit(train)
    assert len(rl.metrics_) == 60
    assert 0.0 <= base <= 1.0 and 0.0 <= rl.score(train) <= 1.0
    clone(rl)
    assert rl.get_params()["learning_rate"] == 80.0
    again = GRPOPolicy(init=sft.params_, steps=60, seed=0).fit(train)
    assert np.array_equal(again.params_.weights, rl.params_.weights)
