"""Greedy single-sample evaluation with per-tier and per-bin accuracy."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from . import verifier
from .backend import Backend, BackendUnavailable, GenRequest, ToyPolicyBackend
from .curator import BIN_TIERS, Bin, DifficultyLabel, Problem
from .policy import PolicyParams
from .prompts import build_prompt

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    n_problems: int
    n_correct: int
    per_tier: dict[int, tuple[int, int]] = field(default_factory=dict)
    per_bin: dict[str, tuple[int, int]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    incomplete: bool = False

    def __post_init__(self):
        if not 0 <= self.n_correct <= self.n_problems:
            raise ValueError("need 0 <= n_correct <= n_problems")

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_problems if self.n_problems else 0.0

    def to_dict(self) -> dict:
        return {
            "n_problems": self.n_problems,
            "n_correct": self.n_correct,
            "accuracy": self.accuracy,
            "per_tier": {str(t): {"n": n, "correct": c} for t, (n, c) in sorted(self.per_tier.items())},
            "per_bin": {b: {"n": n, "correct": c} for b, (n, c) in self.per_bin.items()},
            "config": self.config,
            "incomplete": self.incomplete,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        lines = ["| Bin | Size | Accuracy |", "|---|---|---|"]
        for b in Bin:
            if b.value in self.per_bin:
                n, c = self.per_bin[b.value]
                lo, hi = BIN_TIERS[b][0], BIN_TIERS[b][-1]
                lines.append(f"| {b.value} ({lo}-{hi}) | {n} | {_pct(c, n)} |")
        lines.append(f"| All | {self.n_problems} | {_pct(self.n_correct, self.n_problems)} |")
        if self.incomplete:
            lines.append("")
            lines.append("Incomplete: the backend failed before every problem was scored.")
        return "\n".join(lines) + "\n"


def _pct(c: int, n: int) -> str:
    return f"{100.0 * c / n:.1f}" if n else "n/a"


def evaluate(
    model: PolicyParams | Backend,
    problems: Sequence[Problem],
    labels: Optional[Mapping[str, DifficultyLabel]] = None,
    max_gen_len: int = 64,
    seed: int = 0,
    checkpoint_id: Optional[str] = None,
) -> EvalReport:
    """Decode each problem greedily, verify it, and aggregate in id order.

    ``model`` is either toy parameters or any backend. If the backend fails,
    the problems scored so far are reported with ``incomplete=True``.
    """
    backend = ToyPolicyBackend(model) if isinstance(model, PolicyParams) else model
    labels = dict(labels or {})
    per_tier: dict[int, list[int]] = {}
    per_bin: dict[str, list[int]] = {}
    n = correct = 0
    incomplete = False
    for p in sorted(problems, key=lambda q: q.id):
        system, user = build_prompt(p)
        try:
            out = backend.generate(GenRequest(system, user, n=1, max_tokens=max_gen_len, temperature=0.0, seed=seed))
        except BackendUnavailable as exc:
            logger.error("evaluation stopped after %d problems: %s", n, exc)
            incomplete = True
            break
        r = int(verifier.reward(out.texts[0], p.gold).reward)
        n += 1
        correct += r
        label = labels.get(p.id)
        if label is not None:
            cell = per_tier.setdefault(label.tier, [0, 0])
            cell[0] += 1
            cell[1] += r
            cell = per_bin.setdefault(label.bin.value, [0, 0])
            cell[0] += 1
            cell[1] += r
    config = {"checkpoint_id": checkpoint_id, "max_gen_len": max_gen_len, "seed": seed, "scorer": backend.name}
    return EvalReport(
        n,
        correct,
        {t: tuple(v) for t, v in sorted(per_tier.items())},
        {b.value: tuple(per_bin[b.value]) for b in Bin if b.value in per_bin},
        config,
        incomplete,
    )
