"""Difficulty curation by repeated sampling.

Each problem is attempted ``n`` times (16 by default) by a scoring backend.
Problems solved every time or never are excluded; the rest keep their
success count as a difficulty tier (1-15), grouped into three bins:
Hard (1-5), Medium (6-11) and Easy (12-15).
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import verifier
from .backend import Backend, GenRequest
from .prompts import SYSTEM_PROMPT

logger = logging.getLogger(__name__)

DEFAULT_ATTEMPTS = 16
MAX_TIER = 15


class DatasetError(ValueError):
    """A dataset file violates its schema or invariants."""


class ZoneViolation(ValueError):
    """A record outside the learning zone reached stratification."""


class EmptyBinError(ValueError):
    pass


class Bin(str, Enum):
    HARD = "Hard"
    MEDIUM = "Medium"
    EASY = "Easy"


BIN_TIERS = {
    Bin.HARD: range(1, 6),
    Bin.MEDIUM: range(6, 12),
    Bin.EASY: range(12, 16),
}


def bin_of_tier(tier: int) -> Bin:
    for b, tiers in BIN_TIERS.items():
        if tier in tiers:
            return b
    raise ValueError(f"tier {tier} outside 1..{MAX_TIER}")


_PROBLEM_FIELDS = ("id", "prompt", "gold", "image_ref", "source")


@dataclass(frozen=True)
class Problem:
    id: str
    prompt: str
    gold: str
    image_ref: Optional[str] = None
    source: str = "unknown"
    extra: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_dict(cls, d: dict) -> "Problem":
        missing = [k for k in ("id", "prompt", "gold") if k not in d]
        if missing:
            raise DatasetError(f"problem record missing {missing}")
        if not isinstance(d["prompt"], str) or not isinstance(d["gold"], str):
            raise DatasetError("prompt and gold must be strings")
        extra = {k: v for k, v in d.items() if k not in _PROBLEM_FIELDS}
        return cls(str(d["id"]), d["prompt"], d["gold"], d.get("image_ref"), d.get("source", "unknown"), extra)

    def to_dict(self) -> dict:
        d = {"id": self.id, "prompt": self.prompt, "gold": self.gold, "image_ref": self.image_ref, "source": self.source}
        d.update(self.extra)
        return d

    def __getitem__(self, key):
        # lets trainers treat problems and plain dicts alike
        return self.to_dict()[key]


@dataclass(frozen=True)
class AttemptRecord:
    problem_id: str
    n_attempts: int
    correctness: tuple[int, ...]
    success_count: int
    responses: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.n_attempts < 1 or len(self.correctness) != self.n_attempts:
            raise DatasetError(f"{self.problem_id}: correctness must have n_attempts={self.n_attempts} bits")
        if any(b not in (0, 1) for b in self.correctness):
            raise DatasetError(f"{self.problem_id}: correctness bits must be 0 or 1")
        if self.success_count != sum(self.correctness):
            raise DatasetError(
                f"{self.problem_id}: success_count {self.success_count} != {sum(self.correctness)} set bits"
            )
        if self.responses is not None and len(self.responses) != self.n_attempts:
            raise DatasetError(f"{self.problem_id}: responses must align with attempts")

    @classmethod
    def from_correctness(cls, problem_id: str, bits: Sequence[int], responses=None) -> "AttemptRecord":
        bits = tuple(int(b) for b in bits)
        return cls(problem_id, len(bits), bits, sum(bits), None if responses is None else tuple(responses))

    def to_dict(self) -> dict:
        d = {
            "problem_id": self.problem_id,
            "n_attempts": self.n_attempts,
            "correctness": list(self.correctness),
            "success_count": self.success_count,
        }
        if self.responses is not None:
            d["responses"] = list(self.responses)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttemptRecord":
        try:
            responses = d.get("responses")
            return cls(
                str(d["problem_id"]),
                int(d["n_attempts"]),
                tuple(d["correctness"]),
                int(d["success_count"]),
                None if responses is None else tuple(responses),
            )
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"malformed attempt record: {exc}") from exc


@dataclass(frozen=True)
class DifficultyLabel:
    tier: int
    bin: Bin

    def __post_init__(self):
        if self.bin is not bin_of_tier(self.tier):
            raise DatasetError(f"tier {self.tier} belongs to {bin_of_tier(self.tier).value}, not {self.bin.value}")

    @classmethod
    def from_tier(cls, tier: int) -> "DifficultyLabel":
        return cls(tier, bin_of_tier(tier))

    def to_dict(self) -> dict:
        return {"tier": self.tier, "bin": self.bin.value}

    @classmethod
    def from_dict(cls, d: dict) -> "DifficultyLabel":
        try:
            return cls(int(d["tier"]), Bin(d["bin"]))
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"malformed difficulty label {d!r}: {exc}") from exc


@dataclass(frozen=True)
class GenParams:
    max_tokens: int = 64
    temperature: float = 1.0
    seed: int = 0
    system_prompt: str = SYSTEM_PROMPT


def derive_seed(seed: int, problem_id: str) -> int:
    """Per-problem seed, independent of scheduling order."""
    h = hashlib.sha256(f"{seed}:{problem_id}".encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") >> 1


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def score_problem(
    problem: Problem,
    backend: Backend,
    n: int = DEFAULT_ATTEMPTS,
    gen_params: GenParams = GenParams(),
    keep_responses: bool = False,
) -> AttemptRecord:
    """Sample ``n`` completions and count the verified-correct ones."""
    if n < 1:
        raise ValueError("n must be >= 1")
    request = GenRequest(
        system_prompt=gen_params.system_prompt,
        user_prompt=problem.prompt,
        n=n,
        max_tokens=gen_params.max_tokens,
        temperature=gen_params.temperature,
        seed=derive_seed(gen_params.seed, problem.id),
    )
    response = backend.generate(request)
    if len(response.texts) != n:
        raise RuntimeError(f"backend returned {len(response.texts)} completions, expected {n}")
    bits = [int(verifier.reward(text, problem.gold).reward) for text in response.texts]
    return AttemptRecord.from_correctness(problem.id, bits, response.texts if keep_responses else None)


def in_learning_zone(record: AttemptRecord) -> bool:
    return 1 <= record.success_count <= record.n_attempts - 1


def zone_filter(records: Iterable[AttemptRecord]) -> list[AttemptRecord]:
    """Drop records solved never (frustration) or always (comfort); order kept."""
    return [r for r in records if in_learning_zone(r)]


@dataclass
class Stratified:
    tiers: dict[int, list[str]]
    labels: dict[str, DifficultyLabel]

    def bin_ids(self, b: Bin) -> list[str]:
        return [pid for t in BIN_TIERS[Bin(b)] for pid in self.tiers[t]]


def stratify(records: Iterable[AttemptRecord]) -> Stratified:
    """Map each zone-filtered record to its tier (= success count) and bin."""
    tiers: dict[int, list[str]] = {t: [] for t in range(1, MAX_TIER + 1)}
    labels: dict[str, DifficultyLabel] = {}
    for r in records:
        if not in_learning_zone(r):
            raise ZoneViolation(
                f"{r.problem_id}: success_count {r.success_count} of {r.n_attempts} is outside the "
                "learning zone; run zone_filter first"
            )
        if r.success_count > MAX_TIER:
            raise ZoneViolation(f"{r.problem_id}: tier {r.success_count} exceeds {MAX_TIER} (more than 16 attempts?)")
        tiers[r.success_count].append(r.problem_id)
        labels[r.problem_id] = DifficultyLabel.from_tier(r.success_count)
    return Stratified(tiers, labels)


def sample_bin(stratified: Stratified, bin: Bin | str, k: int, seed: int = 0) -> list[str]:
    """Draw ``k`` ids uniformly without replacement from one bin.

    If the bin holds fewer than ``k`` ids, all of them are returned with a
    warning.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = stratified.bin_ids(Bin(bin))
    if not ids:
        raise EmptyBinError(f"bin {Bin(bin).value} is empty")
    if len(ids) <= k:
        if len(ids) < k:
            warnings.warn(f"bin {Bin(bin).value} has only {len(ids)} problems; returning all of them", stacklevel=2)
        return list(ids)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(ids), size=k, replace=False)
    return [ids[i] for i in pick]


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def _read_jsonl(path) -> list[tuple[int, dict]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    return rows


def load_problems(path) -> list[Problem]:
    """Read one Problem per line; ids must be unique and golds must parse.

    Curated files are accepted too (their problems are extracted).
    """
    problems, seen = [], set()
    for lineno, row in _read_jsonl(path):
        if "header" in row:
            continue
        p = Problem.from_dict(row["problem"] if "problem" in row else row)
        if p.id in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate id {p.id!r}")
        try:
            verifier.parse_answer(p.gold)
        except verifier.UnparseableAnswer as exc:
            raise DatasetError(f"{path}:{lineno}: gold answer {p.gold!r} does not parse: {exc}") from exc
        seen.add(p.id)
        problems.append(p)
    return problems


def write_problems(problems: Iterable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            d = p.to_dict() if isinstance(p, Problem) else p
            fh.write(json.dumps(d, ensure_ascii=False, sort_keys=True) + "\n")


@dataclass(frozen=True)
class CuratedEntry:
    problem: Problem
    record: AttemptRecord
    label: Optional[DifficultyLabel]

    def to_json(self) -> str:
        return json.dumps(
            {
                "problem": self.problem.to_dict(),
                "attempt_record": self.record.to_dict(),
                "difficulty_label": None if self.label is None else self.label.to_dict(),
            },
            ensure_ascii=False,
            sort_keys=True,
        )


@dataclass
class CuratedDataset:
    header: dict
    entries: list[CuratedEntry]

    @property
    def problems(self) -> list[Problem]:
        return [e.problem for e in self.entries]

    def stratified(self) -> Stratified:
        return stratify(e.record for e in self.entries)

    def subset(self, ids: Sequence[str]) -> "CuratedDataset":
        by_id = {e.problem.id: e for e in self.entries}
        return CuratedDataset(dict(self.header), [by_id[i] for i in ids])

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"header": self.header}, sort_keys=True) + "\n")
            for e in self.entries:
                fh.write(e.to_json() + "\n")


def _parse_entry(path, lineno: int, row: dict) -> CuratedEntry:
    if "attempt_record" not in row or "problem" not in row:
        raise DatasetError(f"{path}:{lineno}: not a curated record; run `curate` first")
    problem = Problem.from_dict(row["problem"])
    record = AttemptRecord.from_dict(row["attempt_record"])
    if record.problem_id != problem.id:
        raise DatasetError(f"{path}:{lineno}: attempt record is for {record.problem_id!r}, not {problem.id!r}")
    raw_label = row.get("difficulty_label")
    label = None if raw_label is None else DifficultyLabel.from_dict(raw_label)
    if label is not None and label.tier != record.success_count:
        raise DatasetError(f"{path}:{lineno}: tier {label.tier} != success_count {record.success_count}")
    return CuratedEntry(problem, record, label)


def load_curated(path, require_labels: bool = True) -> CuratedDataset:
    """Load a curated file, re-validating counts and labels.

    With ``require_labels`` every record must carry a difficulty label with
    a tier in 1..15; anything else (including a plain problem file) is
    rejected with a hint to run ``curate`` first.
    """
    header: dict = {}
    entries = []
    seen = set()
    for lineno, row in _read_jsonl(path):
        if "header" in row:
            header = row["header"]
            continue
        entry = _parse_entry(path, lineno, row)
        if entry.problem.id in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate id {entry.problem.id!r}")
        seen.add(entry.problem.id)
        if require_labels:
            if entry.label is None or not in_learning_zone(entry.record):
                raise DatasetError(
                    f"{path}:{lineno}: {entry.problem.id!r} has success_count {entry.record.success_count} "
                    f"of {entry.record.n_attempts} and no difficulty tier in 1..{MAX_TIER}; "
                    "only zone-filtered output of `curate` is accepted"
                )
        try:
            verifier.parse_answer(entry.problem.gold)
        except verifier.UnparseableAnswer as exc:
            raise DatasetError(f"{path}:{lineno}: gold answer does not parse: {exc}") from exc
        entries.append(entry)
    return CuratedDataset(header, entries)


def excluded_path(out_path) -> Path:
    p = Path(out_path)
    return p.with_name(p.name + ".excluded.jsonl")


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        t = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        t = _dt.datetime.now(tz=_dt.timezone.utc).replace(microsecond=0)
    return t.isoformat()


@dataclass
class CurationSummary:
    scored: int = 0
    skipped: int = 0
    kept: int = 0
    excluded: int = 0
    tier_counts: dict = field(default_factory=dict)


def _scored_ids(path: Path) -> set[str]:
    if not path.exists():
        return set()
    ids = set()
    for lineno, row in _read_jsonl(path):
        if "header" in row:
            continue
        ids.add(_parse_entry(path, lineno, row).problem.id)
    return ids


def curate(
    problems: Sequence[Problem],
    backend: Backend,
    out_path,
    n: int = DEFAULT_ATTEMPTS,
    gen_params: GenParams = GenParams(),
    keep_responses: bool = False,
    resume: bool = False,
    max_workers: int = 8,
) -> CurationSummary:
    """Score, filter and label ``problems``, streaming results to disk.

    Survivors go to ``out_path``; excluded records go to the sidecar
    ``<out_path>.excluded.jsonl`` so a resumed run can skip them too.
    Records are written in input order as they complete. If the backend
    becomes unavailable, every record already finished is flushed before
    the error propagates.
    """
    out_path = Path(out_path)
    side = excluded_path(out_path)
    summary = CurationSummary()
    header = {
        "scorer": backend.name,
        "n_attempts": n,
        "temperature": gen_params.temperature,
        "max_tokens": gen_params.max_tokens,
        "seed": gen_params.seed,
        "timestamp": _timestamp(),
    }
    done: set[str] = set()
    if resume and out_path.exists():
        existing = load_curated(out_path, require_labels=True).header
        for k in ("n_attempts", "temperature"):
            if k in existing and existing[k] != header[k]:
                raise DatasetError(f"cannot resume: {k}={existing[k]} in {out_path}, requested {header[k]}")
        done = _scored_ids(out_path) | _scored_ids(side)
        mode = "a"
    else:
        mode = "w"
    todo = [p for p in problems if p.id not in done]
    summary.skipped = len(problems) - len(todo)

    with open(out_path, mode, encoding="utf-8") as out, open(side, mode, encoding="utf-8") as rej:
        if mode == "w":
            out.write(json.dumps({"header": header}, sort_keys=True) + "\n")
            rej.write(json.dumps({"header": header}, sort_keys=True) + "\n")
            out.flush()
            rej.flush()

        def emit(problem: Problem, record: AttemptRecord) -> None:
            summary.scored += 1
            if in_learning_zone(record) and record.success_count <= MAX_TIER:
                label = DifficultyLabel.from_tier(record.success_count)
                out.write(CuratedEntry(problem, record, label).to_json() + "\n")
                out.flush()
                summary.kept += 1
                summary.tier_counts[label.tier] = summary.tier_counts.get(label.tier, 0) + 1
            else:
                rej.write(CuratedEntry(problem, record, None).to_json() + "\n")
                rej.flush()
                summary.excluded += 1

        def work(p: Problem) -> AttemptRecord:
            return score_problem(p, backend, n, gen_params, keep_responses)

        if max_workers <= 1:
            for p in todo:
                emit(p, work(p))
            return summary
        error: BaseException | None = None
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(work, p) for p in todo]
            for p, fut in zip(todo, futures):
                if error is not None:
                    fut.cancel()
                    if fut.cancelled() or not fut.done() or fut.exception() is not None:
                        continue
                try:
                    emit(p, fut.result())
                except Exception as exc:
                    if error is None:
                        error = exc
                        for f in futures:
                            f.cancel()
        if error is not None:
            logger.error("curation aborted after %d records: %s", summary.scored, error)
            raise error
    return summary
