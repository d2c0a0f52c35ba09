"""Command-line entry point: ``zpdrl <command> ...``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

from . import curator, verifier
from .backend import BackendUnavailable, ChatCompletionBackend, ToyPolicyBackend
from .evaluation import evaluate
from .grpo import GrpoConfig, grpo_train
from .policy import PolicyParams, ToyTask, checkpoint_bytes, load_checkpoint, save_checkpoint
from .sft import SftConfig, build_examples, sft_train

logger = logging.getLogger("zpdrl")


def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_params(path) -> PolicyParams:
    return PolicyParams.zeros() if path is None else load_checkpoint(path)


def _open_in(path):
    return sys.stdin if path in (None, "-") else open(path, encoding="utf-8")


def _open_out(path):
    return sys.stdout if path in (None, "-") else open(path, "w", encoding="utf-8")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_verify(args) -> int:
    fin, fout = _open_in(args.input), _open_out(args.out)
    try:
        for lineno, line in enumerate(fin, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                outcome = verifier.reward(rec["response"], rec["gold"])
                row = outcome.to_json()
            except verifier.UnparseableAnswer as exc:
                logger.warning("line %d: gold does not parse (%s); scored 0", lineno, exc)
                row = {"reward": 0, "extracted": verifier.extract_boxed(rec["response"]), "failure_reason": "unparseable"}
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                logger.warning("line %d: malformed record (%s); scored 0", lineno, exc)
                row = {"reward": 0, "extracted": None, "failure_reason": "unparseable"}
            fout.write(json.dumps(row, ensure_ascii=False) + "\n")
    finally:
        if fin is not sys.stdin:
            fin.close()
        if fout is not sys.stdout:
            fout.close()
    return 0


def cmd_toy(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, problems in ToyTask(split_seed=args.split_seed).splits().items():
        curator.write_problems(problems, out / f"{name}.jsonl")
        print(f"{name}: {len(problems)} problems -> {out / f'{name}.jsonl'}")
    return 0


def _make_backend(args):
    if args.ckpt:
        return ToyPolicyBackend(load_checkpoint(args.ckpt), name=f"toy-policy:{checkpoint_id(args.ckpt)[:16]}")
    if args.base_url and args.model:
        return ChatCompletionBackend(
            base_url=args.base_url,
            model=args.model,
            path=args.path,
            api_key_env=args.api_key_env,
            timeout_secs=args.timeout,
            max_retries=args.max_retries,
            max_in_flight=args.workers,
        )
    raise SystemExit("curate needs --ckpt or both --base-url and --model")


def cmd_curate(args) -> int:
    problems = curator.load_problems(args.input)
    backend = _make_backend(args)
    gen = curator.GenParams(max_tokens=args.max_tokens, temperature=args.temperature, seed=args.seed)
    try:
        s = curator.curate(problems, backend, args.out, n=args.n, gen_params=gen,
                           keep_responses=args.keep_responses, resume=args.resume, max_workers=args.workers)
    except BackendUnavailable as exc:
        print(f"backend unavailable, partial results kept in {args.out}: {exc}", file=sys.stderr)
        return 3
    tiers = ", ".join(f"{t}:{c}" for t, c in sorted(s.tier_counts.items()))
    print(f"scored {s.scored} (skipped {s.skipped}); kept {s.kept}, excluded {s.excluded}; tiers {tiers}")
    return 0


def cmd_sample_bin(args) -> int:
    data = curator.load_curated(args.data)
    ids = curator.sample_bin(data.stratified(), args.bin, args.k, seed=args.seed)
    data.subset(ids).write(args.out)
    print(f"{len(ids)} problems from {args.bin} -> {args.out}")
    return 0


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_sft(args) -> int:
    params = _load_params(args.init)
    records = [p.to_dict() for p in curator.load_problems(args.data)]
    missing = [r["id"] for r in records if "response" not in r]
    if missing:
        raise SystemExit(f"{args.data}: records without a 'response' trace, e.g. {missing[:3]}")
    config = SftConfig(batch_size=args.batch, steps=args.steps, learning_rate=args.lr, seed=args.seed,
                       max_seq_len=args.max_seq_len, mask_prompt=not args.no_mask_prompt)
    examples, dropped = build_examples(params, records, config.max_seq_len)
    result = sft_train(params, examples, config)
    save_checkpoint(result.params, args.out)
    loss_csv = args.loss_csv or f"{args.out}.loss.csv"
    _write_csv(loss_csv, ["step", "loss"], [(i, repr(v)) for i, v in enumerate(result.losses, 1)])
    final = result.losses[-1] if result.losses else float("nan")
    print(f"sft: {len(examples)} examples ({dropped} dropped), final loss {final:.4f} -> {args.out}")
    return 0


def cmd_grpo(args) -> int:
    data = curator.load_curated(args.data)
    params = _load_params(args.init)
    config = GrpoConfig(group_size=args.g, prompts_per_batch=args.prompts_per_batch, steps=args.steps,
                        learning_rate=args.lr, eps_low=args.eps_low, eps_high=args.eps_high,
                        max_gen_len=args.max_gen_len, seed=args.seed, checkpoint_every=args.checkpoint_every)
    metrics_csv = args.metrics or f"{args.out}.metrics.csv"
    result = grpo_train(params, data.problems, config, metrics_path=metrics_csv, checkpoint_prefix=args.out)
    save_checkpoint(result.params, args.out)
    tail = result.metrics[-50:]
    print(f"grpo: {len(data.problems)} problems, {config.steps} steps, "
          f"last-50 mean reward {sum(m.mean_reward for m in tail) / max(len(tail), 1):.3f} -> {args.out}")
    return 0


def _load_eval_data(path):
    with open(path, encoding="utf-8") as fh:
        curated = any("attempt_record" in json.loads(line) for line in fh if line.strip())
    if curated:
        data = curator.load_curated(path, require_labels=False)
        return data.problems, {e.problem.id: e.label for e in data.entries if e.label is not None}
    return curator.load_problems(path), {}


def cmd_eval(args) -> int:
    problems, labels = _load_eval_data(args.data)
    params = load_checkpoint(args.ckpt)
    report = evaluate(params, problems, labels, max_gen_len=args.max_gen_len, seed=args.seed,
                      checkpoint_id=checkpoint_id(args.ckpt))
    out = Path(args.out)
    out.write_text(report.to_json(), encoding="utf-8")
    out.with_suffix(".md").write_text(report.to_markdown(), encoding="utf-8")
    print(f"accuracy {report.accuracy:.3f} ({report.n_correct}/{report.n_problems}) -> {out}")
    return 0 if not report.incomplete else 3


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zpdrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="score {response, gold} JSONL records")
    p.add_argument("--in", dest="input", default="-")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("toy", help="write the toy arithmetic splits")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("curate", help="score, zone-filter and stratify problems")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=curator.DEFAULT_ATTEMPTS)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keep-responses", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--ckpt", help="toy policy checkpoint used as the scorer")
    p.add_argument("--base-url")
    p.add_argument("--model")
    p.add_argument("--path", default="/v1/chat/completions")
    p.add_argument("--api-key-env", default="OPENAI_API_KEY")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--max-retries", type=int, default=5)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("sample-bin", help="draw k problems from one difficulty bin")
    p.add_argument("--data", required=True)
    p.add_argument("--bin", required=True, choices=[b.value for b in curator.Bin])
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_bin)

    d = SftConfig()
    p = sub.add_parser("sft", help="supervised fine-tuning on traces")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init")
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--max-seq-len", type=int, default=d.max_seq_len)
    p.add_argument("--no-mask-prompt", action="store_true")
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_sft)

    g = GrpoConfig()
    p = sub.add_parser("grpo", help="GRPO on a curated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init")
    p.add_argument("--g", type=int, default=g.group_size)
    p.add_argument("--prompts-per-batch", type=int, default=g.prompts_per_batch)
    p.add_argument("--steps", type=int, default=g.steps)
    p.add_argument("--lr", type=float, default=g.learning_rate)
    p.add_argument("--eps-low", type=float, default=g.eps_low)
    p.add_argument("--eps-high", type=float, default=g.eps_high)
    p.add_argument("--max-gen-len", type=int, default=g.max_gen_len)
    p.add_argument("--seed", type=int, default=g.seed)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_grpo)

    p = sub.add_parser("eval", help="greedy evaluation with a JSON and Markdown report")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-gen-len", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except (curator.DatasetError, curator.EmptyBinError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
