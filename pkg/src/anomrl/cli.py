"""Batch command-line entry points wiring the modules into workflows.

Subcommands: validate-data, gen-synth, score, train-sft, train-rl, eval,
report. Exit codes: 0 success, 1 validation failure, 2 oracle unavailable,
3 internal error. All randomness flows from --seed (default 0); identical
invocations produce byte-identical outputs (manifest timestamps aside).
"""

from __future__ import annotations

import argparse
import datetime
import json
import random
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .data import (
    DatasetError,
    QuestionRecord,
    Taxonomy,
    TemplateLibrary,
    load_records,
    save_records,
    split_counts,
)
from .grammar import parse_response
from .grpo import GrpoConfig, compute_advantages, train_sft
from .metrics import (
    EvalRecord,
    category_correct,
    depth_alignment,
    joint_outcomes,
    mcq_accuracy,
    risk_correct,
    stage_report,
)
from .oracle import (
    EndpointConfig,
    HttpJudge,
    HttpPolicyOracle,
    OracleMalformed,
    OracleUnavailable,
    ReplayOracle,
    RuleJudge,
)
from .rewards import RewardConfig, score_response, token_f1
from .serialize import (
    breakdown_to_dict,
    dumps,
    outcome_to_dict,
    policy_from_dict,
    policy_to_dict,
    videos_from_dict,
    videos_to_dict,
)
from .simenv import (
    CorpusSpec,
    NORMAL_SYMBOLS,
    SyntheticVideo,
    ToyPolicy,
    ToyPolicySpec,
    generate_corpus,
    sft_batches,
    timeline,
)
from .train import read_trace, train_rl, write_trace

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_ORACLE = 2
EXIT_INTERNAL = 3


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise DatasetError("config file must contain a JSON object")
    return doc


def _reward_config(doc: dict) -> RewardConfig:
    body = dict(doc.get("reward", {}))
    if "risk_schedule" in body:
        body["risk_schedule"] = {int(k): float(v) for k, v in body["risk_schedule"].items()}
    if "weights" in body:
        base = {c: 1.0 for c in ("format", "accuracy", "depth", "risk", "verification")}
        base.update({k: float(v) for k, v in body["weights"].items()})
        body["weights"] = base
    return RewardConfig(**body)


def _grpo_config(doc: dict, group_size: Optional[int], steps: Optional[int]) -> GrpoConfig:
    body = dict(doc.get("grpo", {}))
    if group_size is not None:
        body["group_size"] = group_size
    if steps is not None:
        body["steps"] = steps
    return GrpoConfig(**body)


def _videos_path(records_path: str) -> Path:
    return Path(records_path).with_suffix(".videos.json")


def _load_videos(records_path: str) -> Dict[str, SyntheticVideo]:
    path = _videos_path(records_path)
    if not path.exists():
        raise DatasetError(f"missing sibling video file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return videos_from_dict(json.load(fh))


def _read_lines(path: str) -> List[str]:
    if path == "-":
        return [line.rstrip("\n") for line in sys.stdin]
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def _write_lines(path: str, lines: Sequence[str]) -> None:
    if path == "-":
        for line in lines:
            sys.stdout.write(line + "\n")
        return
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def _write_json(path: str, doc) -> None:
    if path == "-":
        sys.stdout.write(dumps(doc) + "\n")
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(doc) + "\n")


def _write_manifest(out: Optional[str], args: argparse.Namespace) -> None:
    if not out or out == "-":
        return
    doc = {
        "command": args.command,
        "options": {
            k: v for k, v in sorted(vars(args).items())
            if k not in ("command", "fn")
        },
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    path = Path(out).with_suffix(Path(out).suffix + ".manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_validate_data(args: argparse.Namespace) -> int:
    taxonomy = Taxonomy.load()
    records = load_records(args.data, taxonomy)
    counts = split_counts(records)
    print(f"{len(records)} records valid; splits: {counts}")
    return EXIT_OK


def _cmd_gen_synth(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    taxonomy = Taxonomy.load()
    lib = TemplateLibrary.load()
    corpus_body = dict(cfg.get("corpus", {}))
    if "counts" not in corpus_body:
        corpus_body["counts"] = _default_counts(taxonomy, args.videos)
    if "frames_range" in corpus_body:
        corpus_body["frames_range"] = tuple(corpus_body["frames_range"])
    if "anomaly_buckets" in corpus_body:
        corpus_body["anomaly_buckets"] = tuple(corpus_body["anomaly_buckets"])
    if "split_fractions" in corpus_body:
        corpus_body["split_fractions"] = tuple(corpus_body["split_fractions"])
    spec = CorpusSpec(**corpus_body)
    videos, records = generate_corpus(spec, taxonomy, lib, args.seed)
    save_records(records, args.out)
    with open(_videos_path(args.out), "w", encoding="utf-8") as fh:
        fh.write(dumps(videos_to_dict(videos)) + "\n")
    _write_manifest(args.out, args)
    print(f"wrote {len(records)} records over {len(videos)} videos to {args.out}")
    return EXIT_OK


def _default_counts(taxonomy: Taxonomy, n_videos: int) -> Dict[str, int]:
    """Roughly 40% normal, remainder round-robin over the taxonomy leaves."""
    counts: Dict[str, int] = {"normal": max(1, round(0.4 * n_videos))}
    leaves = taxonomy.leaves()
    remaining = n_videos - counts["normal"]
    for i in range(remaining):
        leaf = leaves[i % len(leaves)]
        counts[leaf] = counts.get(leaf, 0) + 1
    return counts


def _build_oracle(args: argparse.Namespace):
    if getattr(args, "replay", None):
        with open(args.replay, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        script = {}
        for key, value in doc.items():
            parts = key.split("\x1f", 1)
            script[tuple(parts) if len(parts) == 2 else key] = value
        return ReplayOracle(script)
    if getattr(args, "oracle_url", None):
        return HttpPolicyOracle(EndpointConfig(base_url=args.oracle_url))
    return None


def _cmd_score(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    taxonomy = Taxonomy.load()
    lexicon = taxonomy.lexicon()
    records = load_records(args.data, taxonomy)
    responses = _read_lines(args.responses)
    if len(responses) != len(records):
        raise DatasetError(
            f"{len(records)} records but {len(responses)} response lines"
        )
    lines: List[str] = []
    if args.parse_only:
        for raw in responses:
            lines.append(dumps(outcome_to_dict(parse_response(raw, lexicon))))
        _write_lines(args.out, lines)
        _write_manifest(args.out, args)
        return EXIT_OK

    rcfg = _reward_config(cfg)
    oracle = _build_oracle(args)
    videos: Dict[str, SyntheticVideo] = {}
    if oracle is not None:
        videos = _load_videos(args.data)
    rng = random.Random(args.seed)
    breakdowns = []
    for record, raw in zip(records, responses):
        video_tl = timeline(videos[record.video_id]) if oracle is not None else None
        breakdowns.append(
            score_response(
                raw, record, lexicon, rcfg,
                video=video_tl, oracle=oracle, rng=rng,
            )
        )
    advantages: List[Optional[float]] = [None] * len(breakdowns)
    if args.group_size is not None:
        g = args.group_size
        if g < 2 or len(breakdowns) % g != 0:
            raise DatasetError(
                f"record count {len(breakdowns)} is not a multiple of group size {g}"
            )
        for base in range(0, len(breakdowns), g):
            adv = compute_advantages([b.total for b in breakdowns[base:base + g]])
            for j, a in enumerate(adv):
                advantages[base + j] = float(a)
    for breakdown, adv in zip(breakdowns, advantages):
        lines.append(dumps(breakdown_to_dict(breakdown, adv)))
    _write_lines(args.out, lines)
    _write_manifest(args.out, args)
    return EXIT_OK


def _fresh_policy(taxonomy: Taxonomy) -> ToyPolicy:
    return ToyPolicy(ToyPolicySpec.from_taxonomy(taxonomy))


def _cmd_train_sft(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    taxonomy = Taxonomy.load()
    records = load_records(args.data, taxonomy)
    videos = _load_videos(args.data)
    gcfg = _grpo_config(cfg, None, args.steps)
    policy = _fresh_policy(taxonomy)
    batches = sft_batches(records, videos, policy.spec, cfg.get("budget", 16))
    if not batches:
        raise DatasetError("no records in the sft split")
    rng = random.Random(args.seed)
    trained, trace = train_sft(policy, batches, gcfg, rng)
    _write_json(args.out, policy_to_dict(trained))
    write_trace(str(Path(args.out).with_suffix(".trace.jsonl")), trace)
    _write_manifest(args.out, args)
    print(f"sft: {gcfg.steps} steps, final loss {trace[-1]['loss']:.4f}")
    return EXIT_OK


def _cmd_train_rl(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    taxonomy = Taxonomy.load()
    records = load_records(args.data, taxonomy)
    videos = _load_videos(args.data)
    gcfg = _grpo_config(cfg, args.group_size, args.steps)
    rcfg = _reward_config(cfg)
    if args.init:
        with open(args.init, "r", encoding="utf-8") as fh:
            policy = policy_from_dict(json.load(fh))
    else:
        policy = _fresh_policy(taxonomy)
    rng = random.Random(args.seed)
    oracle = _build_oracle(args)
    trained, trace = train_rl(
        policy, records, videos, taxonomy.lexicon(), rcfg, gcfg, rng,
        oracle=oracle, budget=cfg.get("budget", 16),
    )
    _write_json(args.out, policy_to_dict(trained))
    write_trace(str(Path(args.out).with_suffix(".trace.jsonl")), trace)
    _write_manifest(args.out, args)
    print(
        f"rl: {gcfg.steps} steps, final mean reward "
        f"{trace[-1]['mean_total_reward']:.4f}"
    )
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    taxonomy = Taxonomy.load()
    lexicon = taxonomy.lexicon()
    records = load_records(args.data, taxonomy)
    responses = _read_lines(args.responses)
    if len(responses) != len(records):
        raise DatasetError(
            f"{len(records)} records but {len(responses)} response lines"
        )
    evals = [
        EvalRecord(question=q, outcome=parse_response(raw, lexicon))
        for q, raw in zip(records, responses)
    ]
    if args.judge_url:
        judge = HttpJudge(EndpointConfig(base_url=args.judge_url))
    else:
        judge = RuleJudge(lexicon)
    flags = []
    for rec in evals:
        q = rec.question
        reasoning_ok = bool(judge.assess(
            rec.response.raw if rec.response else "", q, "reasoning_correct"
        ))
        if q.kind.is_mcq:
            answer_ok = (
                rec.response is not None
                and _answer_letter(rec.response.answer) == q.gold_letter
            )
        else:
            answer_ok = (
                rec.response is not None
                and token_f1(rec.response.answer, q.reference_answer) >= 0.5
            )
        flags.append((reasoning_ok, answer_ok, category_correct(rec)))
    mcq = [rec for rec in evals if rec.question.kind.is_mcq]
    action = [rec for rec in evals if rec.question.gold_risk is not None]
    report = {
        "n": len(evals),
        "mcq_accuracy": mcq_accuracy(mcq) if mcq else None,
        "depth_alignment": depth_alignment(evals),
        "risk_accuracy": (
            sum(risk_correct(r) for r in action) / len(action) if action else None
        ),
        "joint": joint_outcomes(flags).as_dict(),
        "stages": stage_report(evals, judge).as_dict(),
    }
    _write_json(args.out, report)
    _write_manifest(args.out, args)
    return EXIT_OK


def _answer_letter(answer: str) -> Optional[str]:
    from .rewards import extract_option_letter

    return extract_option_letter(answer)


def _cmd_report(args: argparse.Namespace) -> int:
    trace = read_trace(args.data)
    rewards = [row["mean_total_reward"] for row in trace
               if row.get("mean_total_reward") is not None]
    losses = [row["loss"] for row in trace if row.get("loss") is not None]
    window = min(50, max(1, len(rewards) // 2)) if rewards else 0
    doc = {
        "steps": len(trace),
        "reward_curve": rewards,
        "loss_curve": losses,
        "first_window_mean": float(np.mean(rewards[:window])) if rewards else None,
        "last_window_mean": float(np.mean(rewards[-window:])) if rewards else None,
        "window": window,
    }
    if rewards and doc["first_window_mean"]:
        doc["improvement"] = (
            doc["last_window_mean"] - doc["first_window_mean"]
        ) / abs(doc["first_window_mean"])
    _write_json(args.out, doc)
    _write_manifest(args.out, args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomrl",
        description="Staged video-anomaly reasoning engine: data, rewards, training, eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True):
        if data:
            p.add_argument("--data", required=True, help="records JSONL path")
        if out:
            p.add_argument("--out", required=True, help="output path ('-' for stdout)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON config overriding defaults")

    p = sub.add_parser("validate-data", help="validate a records file")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_validate_data)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    common(p, data=False)
    p.add_argument("--videos", type=int, default=200)
    p.set_defaults(fn=_cmd_gen_synth)

    p = sub.add_parser("score", help="score responses against records")
    common(p)
    p.add_argument("--responses", required=True, help="raw texts, one per line ('-' for stdin)")
    p.add_argument("--parse-only", action="store_true",
                   help="emit parse outcomes instead of rewards")
    p.add_argument("--group-size", type=int, default=None,
                   help="emit per-group normalized advantages")
    p.add_argument("--oracle-url", default=None)
    p.add_argument("--replay", default=None, help="JSON file of scripted oracle replies")
    p.set_defaults(fn=_cmd_score)

    p = sub.add_parser("train-sft", help="supervised warm start on the sft split")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=_cmd_train_sft)

    p = sub.add_parser("train-rl", help="group-relative RL on the rl split")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--init", default=None, help="warm-start policy JSON")
    p.add_argument("--oracle-url", default=None)
    p.add_argument("--replay", default=None)
    p.set_defaults(fn=_cmd_train_rl)

    p = sub.add_parser("eval", help="evaluate responses against records")
    common(p)
    p.add_argument("--responses", required=True)
    p.add_argument("--judge-url", default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("report", help="summarize a training trace")
    common(p)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OracleUnavailable, OracleMalformed) as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
