#!/usr/bin/env python3
"""Command-line entry point for DMC experiments.

Subcommands:
  pretrain            train the vanilla byte-level model
  retrofit            adapt, ramp and solidify a base checkpoint (or a GQA / fixed-pool baseline)
  generate            decode text from a checkpoint with a chosen cache policy
  eval                validation perplexity under one attention/cache mode
  analyze             compression report (CR matrix, CR vs length, alpha vs position, segments)
  bench               decode benchmark with KV memory accounting
  inspect-checkpoint  print a checkpoint's manifest

Every subcommand reads the experiment TOML given by --config; --set section.key=value and
the named shortcuts override it. Exit codes: 0 ok, 2 config error, 3 data error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import numpy as np  # noqa: E402

from app import di  # noqa: E402
from app.config_loader import corpus_path, load_experiment_config  # noqa: E402
from app.errors import AppError, ConfigError  # noqa: E402
from app.settings import get_settings  # noqa: E402
from core.dtos import ExperimentConfig  # noqa: E402
from core.enums import EvalMode  # noqa: E402
from core.model.checkpoint import Checkpoint  # noqa: E402
from core.services.analysis_service import analyze  # noqa: E402
from core.services.corpus_service import Corpus, detokenize, ingest_corpus, tokenize  # noqa: E402
from core.services.eval_service import eval_perplexity  # noqa: E402
from core.services.generation_service import generate, make_mixer  # noqa: E402
from core.training.batching import eval_windows  # noqa: E402
from infra.storage.metrics_writer import MetricsWriter, write_decision_trace  # noqa: E402
from infra.storage.report_writer import render_analysis, render_bench  # noqa: E402

logger = logging.getLogger("dmc")


def _configure_logging(level: str | None) -> None:
    settings = get_settings()
    logging.basicConfig(
        level=(level or ("DEBUG" if settings.debug else settings.log_level)).upper(),
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
    )


# -----------------------------
# Shared helpers
# -----------------------------


def _overrides(args: argparse.Namespace, steps_key: str | None = None) -> list[str]:
    items = list(args.set or [])
    if args.seed is not None:
        items.append(f"run.seed={args.seed}")
    if getattr(args, "target_cr", None) is not None:
        items.append(f"dmc.schedule.target_cr={args.target_cr}")
    if getattr(args, "steps", None) is not None and steps_key is not None:
        items.append(f"{steps_key}={args.steps}")
    return items


def _config(args: argparse.Namespace, steps_key: str | None = None) -> ExperimentConfig:
    return load_experiment_config(args.config, _overrides(args, steps_key))


def _corpus(config: ExperimentConfig) -> Corpus:
    return ingest_corpus(corpus_path(config), config.data.train_fraction)


def _load(name_or_path: str) -> Checkpoint:
    return di.get_checkpoint_repo().load(name_or_path)


def _seq_len(config: ExperimentConfig, checkpoint: Checkpoint) -> int:
    return min(config.data.seq_len, checkpoint.config.max_seq)


def _window_cap(config: ExperimentConfig) -> int | None:
    return config.dmc.window if config.dmc.inference_window_cap else None


# -----------------------------
# Subcommands
# -----------------------------


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = _config(args, "run.pretrain_steps")
    corpus = _corpus(config)
    path = di.metrics_path(config.run.name, "pretrain", out_dir=config.run.out_dir)
    with MetricsWriter(path) as metrics:
        checkpoint = di.get_pretrain_service(metrics).pretrain(config, corpus)
    print(f"✅ base checkpoint: validation loss {checkpoint.manifest.val_loss:.4f}")
    return 0


def cmd_retrofit(args: argparse.Namespace) -> int:
    config = _config(args, "dmc.schedule.ramp_steps")
    corpus = _corpus(config)
    base = _load(args.base)
    path = di.metrics_path(config.run.name, "retrofit", out_dir=config.run.out_dir)
    with MetricsWriter(path) as metrics:
        emitted = di.get_retrofit_service(metrics).retrofit(base, config, corpus)
        warnings = sum(1 for r in metrics.records if r.kind == "warning")
    for ckpt in emitted:
        m = ckpt.manifest
        print(
            f"{m.phase.value:<9} step {m.step:>6}  target CR {m.target_cr:5.2f}  "
            f"achieved {m.achieved_cr or 0.0:6.3f}  val loss {m.val_loss or 0.0:.4f}"
        )
    if warnings:
        print(f"⚠️  {warnings} perplexity spike warning(s); see the metrics stream")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    checkpoint = _load(args.checkpoint)
    model = checkpoint.model()
    prompt = tokenize(args.prompt)
    mode = EvalMode.from_any(args.method)
    mixer = make_mixer(
        model,
        mode,
        total_len=len(prompt) + args.n,
        prompt_len=len(prompt),
        cr=args.cr,
        pool_width=checkpoint.manifest.pool_width,
    )
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    out = generate(model, prompt, args.n, mixer, temperature=args.temperature, rng=rng)
    print(args.prompt + detokenize(out))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config(args)
    checkpoint = _load(args.checkpoint)
    corpus = _corpus(config)
    result = eval_perplexity(
        checkpoint,
        corpus.split(args.split),
        args.mode,
        seq_len=_seq_len(config, checkpoint),
        batch_size=config.data.batch_size,
        max_windows=args.max_windows or config.data.batch_size * config.data.eval_batches,
        cr=args.cr if args.cr is not None else config.baseline.eviction_cr,
        window_cap=_window_cap(config),
    )
    line = f"{result.mode.value}: loss {result.loss:.4f}  perplexity {result.perplexity:.3f}"
    if result.achieved_cr is not None:
        line += f"  CR {result.achieved_cr:.3f}"
    print(line)
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    config = _config(args)
    checkpoint = _load(args.checkpoint)
    corpus = _corpus(config)
    run = analyze(
        checkpoint,
        corpus.validation,
        seq_len=_seq_len(config, checkpoint),
        max_windows=args.max_windows,
        window_cap=_window_cap(config),
    )
    writer = di.get_report_writer(args.out or config.run.out_dir, run_name=config.run.name)
    writer.write_analysis(run.report)
    write_decision_trace(writer.out_dir / "decision_trace.jsonl", run.traces)
    print(render_analysis(run.report), end="")
    print(f"reports → {writer.out_dir}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = _config(args)
    checkpoint = _load(args.checkpoint)
    corpus = _corpus(config)
    windows = eval_windows(corpus.validation, args.prompt_len, args.batch)
    if len(windows) < args.batch:
        raise ConfigError(
            f"validation split holds {len(windows)} prompts of {args.prompt_len} tokens, "
            f"bench asked for {args.batch}"
        )
    methods = [m.strip() for m in args.methods.split(",")] if args.methods else None
    record = di.get_bench_service().bench_decode(
        checkpoint,
        windows[:, : args.prompt_len],
        args.gen_len,
        methods=methods,
        cr=args.cr if args.cr is not None else config.baseline.eviction_cr,
        window_cap=_window_cap(config),
    )
    writer = di.get_report_writer(args.out or config.run.out_dir, run_name=config.run.name)
    writer.write_bench(record)
    print(render_bench(record), end="")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    checkpoint = _load(args.checkpoint)
    print(json.dumps(checkpoint.manifest.model_dump(mode="json", exclude={"rng_state"}), indent=2))
    total = sum(int(a.size) for a in checkpoint.arrays.values())
    print(f"{len(checkpoint.arrays)} arrays, {total:,} parameters")
    return 0


# -----------------------------
# Parser
# -----------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmc", description="Dynamic Memory Compression experiments"
    )
    parser.add_argument("--log-level", default=None, help="Override DMC_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="Experiment TOML file")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="Override a config key, e.g. --set dmc.schedule.target_cr=3",
        )
        p.add_argument("--seed", type=int, default=None, help="Shortcut for run.seed")

    p = sub.add_parser("pretrain", help="Train the vanilla base model")
    common(p)
    p.add_argument("--steps", type=int, default=None, help="Shortcut for run.pretrain_steps")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("retrofit", help="Retrofit a base checkpoint")
    common(p)
    p.add_argument("--base", required=True, help="Base checkpoint name or path")
    p.add_argument(
        "--target-cr", type=float, default=None, help="Shortcut for dmc.schedule.target_cr"
    )
    p.add_argument("--steps", type=int, default=None, help="Shortcut for dmc.schedule.ramp_steps")
    p.set_defaults(func=cmd_retrofit)

    p = sub.add_parser("generate", help="Generate text from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n", type=int, default=64, help="Tokens to generate")
    p.add_argument("--method", default="vanilla", help="vanilla | dmc | fixed-pool | h2o | tova")
    p.add_argument("--temperature", type=float, default=0.0, help="0 means greedy")
    p.add_argument("--cr", type=float, default=2.0, help="Eviction target for h2o/tova")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="Validation perplexity")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="validation", help="train | validation")
    p.add_argument(
        "--mode",
        default="vanilla",
        help="vanilla | dmc-train-path | dmc-infer-path | fixed-pool | h2o | tova",
    )
    p.add_argument("--cr", type=float, default=None, help="Eviction target (baseline.eviction_cr)")
    p.add_argument("--max-windows", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="Compression analysis report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--max-windows", type=int, default=8)
    p.add_argument("--out", type=Path, default=None, help="Report directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="Decode benchmark with memory accounting")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--prompt-len", type=int, default=64)
    p.add_argument("--gen-len", type=int, default=64)
    p.add_argument("--methods", default=None, help="Comma-separated; default: all that apply")
    p.add_argument("--cr", type=float, default=None, help="Eviction target (baseline.eviction_cr)")
    p.add_argument("--out", type=Path, default=None, help="Report directory")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect-checkpoint", help="Print a checkpoint manifest")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level)
    try:
        return args.func(args)
    except AppError as e:
        logger.error(json.dumps(e.to_dict(), default=str))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
