"""One serializable record holding every numeric training knob."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

from .grpo import GrpoConfig
from .sft import SftConfig


@dataclass(frozen=True)
class TrainConfig:
    n_attempts: int = 16
    group_size: int = 4
    prompts_per_batch: int = 14
    rl_steps: int = 300
    rl_learning_rate: float = 80.0
    eps_low: float = 0.2
    eps_high: float = 0.28
    max_gen_len: int = 64
    sft_batch_size: int = 16
    sft_steps: int = 800
    sft_learning_rate: float = 4.0
    max_seq_len: int = 128
    seed: int = 0

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        """``toy`` (desk defaults), ``scale_3b`` or ``scale_7b``.

        The large presets carry large-model group sizes, batch sizes,
        step counts and length caps; learning rates stay at the toy values
        because no large-model rate is pinned.
        """
        try:
            base = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return replace(base, **overrides)

    def sft_config(self, **overrides) -> SftConfig:
        return SftConfig(
            batch_size=self.sft_batch_size,
            steps=self.sft_steps,
            learning_rate=self.sft_learning_rate,
            seed=self.seed,
            max_seq_len=self.max_seq_len,
            **overrides,
        )

    def grpo_config(self, **overrides) -> GrpoConfig:
        return GrpoConfig(
            group_size=self.group_size,
            prompts_per_batch=self.prompts_per_batch,
            steps=self.rl_steps,
            learning_rate=self.rl_learning_rate,
            eps_low=self.eps_low,
            eps_high=self.eps_high,
            max_gen_len=self.max_gen_len,
            seed=self.seed,
            **overrides,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


PRESETS = {
    "toy": TrainConfig(),
    "scale_3b": TrainConfig(
        group_size=4, prompts_per_batch=14, rl_steps=300, max_gen_len=8192, sft_batch_size=128, max_seq_len=32768
    ),
    "scale_7b": TrainConfig(
        group_size=14, prompts_per_batch=48, rl_steps=40, max_gen_len=8192, sft_batch_size=128, max_seq_len=32768
    ),
}
