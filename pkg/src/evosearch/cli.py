"""Command-line entry point: gen-data, init, grpo, opsd, pipeline, eval, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
import yaml

from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .codec import EncodingError, TrajectoryParseError, serialize_trajectory
from .config import ConfigError, PipelineConfig, load_config
from .environment import DataError, GenerationError, generate_world, load_world, save_world
from .grpo import NumericFailure, grpo_round
from .model import NonFiniteError, Policy
from .opsd import mine_pairs, opsd_round
from .pipeline import (
    MetricsLog, dump_trajectories, evaluate, read_jsonl, run_pipeline, stage_seed, write_jsonl, write_pairs,
)
from .rollout import collect_pool, read_pool, write_pool
from .warmstart import warm_start

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config with model.*, rollout.*, grpo.*, opsd.*, pipeline.* keys")
    p.add_argument("--seed", type=int, help="overrides pipeline.seed")
    p.add_argument("--out", help="output directory (overrides pipeline.out_dir)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="extra config override, e.g. --set grpo.steps_per_round=20")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evosearch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus and question splits")
    _common(p)

    p = sub.add_parser("init", help="warm-start a policy by behavior cloning")
    _common(p)
    p.add_argument("--data", help="world directory (default: <out>/world)")

    for name, help_text in (("grpo", "run one GRPO round from a checkpoint"),
                            ("opsd", "collect a pool, mine pairs and run one OPSD round")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data")
        if name == "grpo":
            p.add_argument("--dump-trajectories", action="store_true")
        else:
            p.add_argument("--pool", help="reuse an existing pool file instead of sampling one")

    p = sub.add_parser("pipeline", help="run the full alternating loop")
    _common(p)
    p.add_argument("--dump-trajectories", action="store_true")
    p.add_argument("--stop-after", help="halt after a stage, e.g. cycle1/grpo")

    p = sub.add_parser("eval", help="greedy EM of a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="validation", choices=("train", "validation", "test"))
    p.add_argument("--data")
    p.add_argument("--dump-trajectories", action="store_true")

    p = sub.add_parser("inspect", help="pretty-print pools, pairs, metrics or checkpoints")
    _common(p)
    p.add_argument("--pool")
    p.add_argument("--question-id")
    p.add_argument("--pairs")
    p.add_argument("--metrics")
    p.add_argument("--checkpoint")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like KEY=VALUE")
        out[key] = yaml.safe_load(value)
    if args.seed is not None:
        out["pipeline.seed"] = args.seed
    if args.out is not None:
        out["pipeline.out_dir"] = args.out
    if getattr(args, "data", None):
        out["pipeline.data_dir"] = args.data
    return out


def _cmd_gen_data(cfg: PipelineConfig, args) -> int:
    w = cfg.world
    seed = args.seed if args.seed is not None else w.seed
    world = generate_world(seed, w.n_entities, w.n_relations, w.n_questions_1hop, w.n_questions_2hop,
                           k=cfg.rollout.retriever_k)
    target = Path(args.out) if args.out else cfg.data_dir
    save_world(world, target)
    sizes = {k: len(v) for k, v in world.splits.items()}
    print(f"wrote {len(world.corpus)} passages and splits {sizes} to {target}")
    return 0


def _world(cfg: PipelineConfig):
    return load_world(cfg.data_dir)


def _cmd_init(cfg: PipelineConfig, args) -> int:
    world = _world(cfg)
    seed = stage_seed(cfg.pipeline.seed, 0, 0)
    policy = Policy.initialize(cfg.model, seed=seed)
    history = warm_start(policy, world.train, world.corpus, cfg.warmstart, seed, cfg.templates)
    path = cfg.out_dir / "init.ckpt"
    save_checkpoint(path, policy, meta={"stage": "init"})
    write_jsonl(cfg.out_dir / "init_metrics.jsonl", history)
    print(f"wrote {path}")
    return 0


def _cmd_grpo(cfg: PipelineConfig, args) -> int:
    world = _world(cfg)
    policy, _ = load_checkpoint(args.checkpoint)
    metrics = MetricsLog(cfg.out_dir / "grpo_metrics.jsonl")
    result = grpo_round(policy, world.train, world.corpus, cfg.grpo, cfg.rollout, stage_seed(cfg.pipeline.seed, 1, 1),
                        cfg.templates, on_step=metrics.add, dump_dir=cfg.out_dir / "failures")
    report = evaluate(result.policy, world.validation, world.corpus, cfg.rollout, "validation", cfg.templates,
                      cfg.out_dir / "grpo_validation_trajectories.txt" if args.dump_trajectories else None)
    metrics.add({"stage": "eval", "after": "grpo", **report.to_dict()})
    metrics.write()
    save_checkpoint(cfg.out_dir / "grpo.ckpt", result.policy, meta={"stage": "grpo", "validation_em": report.em})
    print(f"validation EM {report.em:.4f}; wrote {cfg.out_dir / 'grpo.ckpt'}")
    return 0


def _cmd_opsd(cfg: PipelineConfig, args) -> int:
    world = _world(cfg)
    policy, _ = load_checkpoint(args.checkpoint)
    if args.pool:
        pool = read_pool(args.pool)
    else:
        pool = collect_pool(world.train, policy, world.corpus, cfg.rollout, cfg.opsd.pool_size,
                            stage_seed(cfg.pipeline.seed, 1, 2), cfg.templates)
        write_pool(cfg.out_dir / "pool.jsonl", pool)
    pairs = mine_pairs(pool, cfg.opsd.distance_mode)
    write_pairs(cfg.out_dir / "pairs.jsonl", pairs)
    metrics = MetricsLog(cfg.out_dir / "opsd_metrics.jsonl")
    result = opsd_round(policy, pairs, {q.id: q for q in world.train}, world.validation, world.corpus, cfg.opsd,
                        cfg.rollout, stage_seed(cfg.pipeline.seed, 1, 3), cfg.templates, on_validation=metrics.add)
    metrics.write()
    save_checkpoint(cfg.out_dir / "opsd.ckpt", result.policy,
                    meta={"stage": "opsd", "validation_em": result.best_em, "selected_step": result.selected_step})
    print(f"{len(pairs)} pairs; best validation EM {result.best_em:.4f} at step {result.selected_step}")
    return 0


def _cmd_pipeline(cfg: PipelineConfig, args) -> int:
    out = run_pipeline(cfg, dump_trajectories=args.dump_trajectories, stop_after=args.stop_after)
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_eval(cfg: PipelineConfig, args) -> int:
    world = _world(cfg)
    policy, _ = load_checkpoint(args.checkpoint)
    dump = cfg.out_dir / f"eval_{args.split}_trajectories.txt" if args.dump_trajectories else None
    report = evaluate(policy, world.splits[args.split], world.corpus, cfg.rollout, args.split, cfg.templates, dump)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / f"eval_{args.split}.json"
    path.write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    print(f"EM {report.em:.4f} on {report.n} {args.split} questions "
          f"(mean searches {report.mean_n_srch:.2f}); wrote {path}")
    return 0


def _match_question(qid: str, wanted: str) -> bool:
    if qid == wanted:
        return True
    return wanted.isdigit() and qid.lstrip("q").lstrip("0") == wanted.lstrip("0")


def _cmd_inspect(cfg: PipelineConfig, args) -> int:
    shown = False
    if args.pool:
        pool = read_pool(args.pool)
        for qid, recs in pool.items():
            if args.question_id and not _match_question(qid, args.question_id):
                continue
            print(f"== {qid}: {len(recs)} trajectories")
            for i, r in enumerate(recs):
                print(f"[{i}] reward={r.reward} n_srch={r.n_srch} length={r.length}")
                print("    " + serialize_trajectory(r.trajectory).replace("\n", "\n    "))
            shown = True
        if args.question_id and not shown:
            raise DataError(f"question {args.question_id} not in pool {args.pool}")
    if args.pairs:
        for row in read_jsonl(Path(args.pairs)):
            if args.question_id and not _match_question(row["question_id"], args.question_id):
                continue
            print(f"== {row['question_id']} distance={row['char_distance']} ref_n_srch={row['ref_n_srch']} "
                  f"stu_reward={row['stu_reward']}")
            print("  ref: " + row["ref_text"].replace("\n", " | "))
            print("  stu: " + row["stu_text"].replace("\n", " | "))
        shown = True
    if args.metrics:
        for row in read_jsonl(Path(args.metrics)):
            print("  ".join(f"{k}={v}" for k, v in sorted(row.items())))
        shown = True
    if args.checkpoint:
        header, tensors = read_checkpoint(args.checkpoint)
        print(json.dumps({k: v for k, v in header.items() if k != "tensors"}, indent=2, sort_keys=True))
        print(f"{len(tensors)} tensors, {sum(t.numel() for t in tensors.values())} values")
        shown = True
    if not shown:
        raise ConfigError("inspect needs --pool, --pairs, --metrics or --checkpoint")
    return 0


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "init": _cmd_init,
    "grpo": _cmd_grpo,
    "opsd": _cmd_opsd,
    "pipeline": _cmd_pipeline,
    "eval": _cmd_eval,
    "inspect": _cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GenerationError, CheckpointError, EncodingError, TrajectoryParseError,
            FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
