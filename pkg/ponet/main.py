# ponet/main.py: command-line entry point


# CLI main module
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path as FsPath
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from .config import Settings, dtype_for, get_settings
from .errors import EXIT_OK, EXIT_USAGE, InputError, PonetError, SuiteFailure
from .models.api import (
    ALL_SUITES,
    BenchConfig,
    CheckConfig,
    CheckReport,
    NormsConfig,
    RunConfig,
    StreamConfig,
    TrainRunConfig,
)
from .models.domain import VARIANTS, EncoderConfig, MixerConfig, TaskSpec, TrainConfig
from .services.bench import run_bench, write_rows_csv
from .services.causal_stream import EncoderStream, run_stream
from .services.encoder import encode, init_encoder, pooling_norms
from .services.mix_block import init_projections
from .services.segmentation import segment_even
from .services.suites import run_check
from .services.tensor_core import make_rng
from .services.trainer import train, write_curve_csv
from .storage.checkpoints import load_checkpoint, save_checkpoint

logger = logging.getLogger("ponet")

ConfigT = TypeVar("ConfigT", bound=BaseModel)

BOUNDARY_LINE = "---"


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file (unknown fields are rejected)")
    common.add_argument("--seed", type=int, help="seed for every random draw")
    common.add_argument("--precision", choices=["f32", "f64"], help="float precision")
    common.add_argument("--out", metavar="PATH", help="output file")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="ponet",
        description="Multi-granularity pooling encoder: verification, benchmarking, streaming and training.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    check = sub.add_parser("check", parents=[common], help="run the verification suites, write a JSON report")
    check.add_argument("--suites", nargs="+", choices=ALL_SUITES, help="subset of suites to run")
    check.add_argument("--fault-injection", choices=["corrupt_projection"], help="debug hook: corrupt the fused path")
    check.add_argument("--schema", action="store_true", help="print the report JSON schema and exit")

    bench = sub.add_parser("bench", parents=[common], help="forward-pass timing and memory scaling, write CSV")
    bench.add_argument("--lengths", nargs="+", type=int, help="sequence lengths, ascending")
    bench.add_argument("--d", type=int, help="hidden size")
    bench.add_argument("--heads", type=int, help="attention heads")
    bench.add_argument("--layers", type=int, help="stacked blocks per forward")
    bench.add_argument("--batch", type=int, help="sequences per timed forward")
    bench.add_argument("--segments", type=int, help="segments per sequence")
    bench.add_argument("--warmup-iters", type=int, help="discarded iterations")
    bench.add_argument("--measured-iters", type=int, help="timed iterations (>= 3)")
    bench.add_argument("--mixers", nargs="+", choices=["ponet_naive", "ponet_fused", "self_attention"], help="mixers to time")
    bench.add_argument("--parallel", action="store_true", default=None, help="also time batch items on a thread pool")

    tr = sub.add_parser("train", parents=[common], help="train on a synthetic task, write the learning curve CSV")
    tr.add_argument("--task", choices=["segment_max_id", "duplicate_detect", "parity"], help="task kind")
    tr.add_argument("--steps", type=int, help="optimizer steps")
    tr.add_argument("--lr", type=float, help="learning rate")
    tr.add_argument("--variant", choices=VARIANTS, help="pooling variant")
    tr.add_argument("--save-checkpoint", action="store_true", default=None, help="write a checkpoint next to --out")

    st = sub.add_parser("stream", parents=[common], help="causal token-by-token encoding, write CSV")
    st.add_argument("--input", metavar="PATH", help="rows or token ids, one per line; '---' marks a segment boundary")
    st.add_argument("--mode", choices=["rows", "tokens"], help="input kind")
    st.add_argument("--checkpoint", metavar="PATH", help="encoder checkpoint to stream with")

    nm = sub.add_parser("norms", parents=[common], help="per-layer pooling branch norms, write CSV")
    nm.add_argument("--runs", type=int, help="random sequences to average over")
    nm.add_argument("--checkpoint", metavar="PATH", help="encoder checkpoint to inspect")
    return parser


def _load_config(model: Type[ConfigT], args: argparse.Namespace, overrides: Dict[str, Any]) -> ConfigT:
    data: Dict[str, Any] = {}
    if args.config:
        data = json.loads(FsPath(args.config).read_text())
        if not isinstance(data, dict):
            raise InputError(f"{args.config}: config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return model.model_validate(data)


def _out_path(run: RunConfig, settings: Settings, default_name: str) -> FsPath:
    path = FsPath(run.out) if run.out else FsPath(settings.results_dir) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_check(args: argparse.Namespace, run: RunConfig, settings: Settings) -> int:
    if args.schema:
        print(json.dumps(CheckReport.model_json_schema(), indent=2))
        return EXIT_OK
    cfg = _load_config(
        CheckConfig, args, {"seed": args.seed, "suites": args.suites, "fault_injection": args.fault_injection}
    )
    report = run_check(cfg, run.precision)
    out = _out_path(run, settings, "check.json")
    out.write_text(report.model_dump_json(indent=2))
    print(f"check report: {out}")
    if not report.passed:
        raise SuiteFailure(f"failing suites: {', '.join(report.failing())}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, run: RunConfig, settings: Settings) -> int:
    overrides = {
        name: getattr(args, name)
        for name in ("lengths", "d", "heads", "layers", "batch", "segments", "warmup_iters", "measured_iters", "mixers", "parallel")
    }
    overrides.update(seed=args.seed, precision=args.precision)
    spec = _load_config(BenchConfig, args, overrides)
    report = run_bench(spec, settings)
    out = _out_path(run, settings, "bench.csv")
    write_rows_csv(report.rows, out)
    print(f"bench rows: {out}")
    if spec.parallel:
        parallel_out = write_rows_csv(report.parallel_rows, out.with_suffix(".parallel.csv"))
        print(f"parallel bench rows: {parallel_out}")
    for cell in report.refused:
        print(f"refused {cell.mixer} N={cell.length}: ~{cell.est_bytes} bytes over budget {cell.budget_bytes}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, run: RunConfig, settings: Settings) -> int:
    cfg = _load_config(TrainRunConfig, args, {"variant": args.variant, "save_checkpoint": args.save_checkpoint})
    task_update: Dict[str, Any] = {}
    train_update: Dict[str, Any] = {}
    if args.task:
        task_update["kind"] = args.task
    if args.seed is not None:
        task_update["seed"] = args.seed
        train_update["seed"] = args.seed
    if args.steps is not None:
        train_update["steps"] = args.steps
    if args.lr is not None:
        train_update["lr"] = args.lr
    task = TaskSpec.model_validate({**cfg.task.model_dump(), **task_update})
    train_cfg = TrainConfig.model_validate({**cfg.train.model_dump(), **train_update})

    enc = EncoderConfig(
        vocab_size=task.vocab,
        max_len=task.length,
        d=cfg.d,
        layers=cfg.layers,
        dropout_rate=cfg.dropout_rate,
        mixer=MixerConfig(d=cfg.d, heads=cfg.heads, variant=cfg.variant),
        head=cfg.head,
        num_classes=task.num_classes,
    )
    if run.precision != "f64":
        logger.warning("training runs at f64 (analytic gradients); requested %s ignored", run.precision)
    params = init_encoder(enc, make_rng(train_cfg.seed))
    result = train(params, enc, task, train_cfg, path=cfg.path)
    out = _out_path(run, settings, "train.csv")
    write_curve_csv(result.curve, out)
    print(f"learning curve: {out} (final accuracy {result.final_accuracy:.4f})")
    if cfg.save_checkpoint:
        ckpt = save_checkpoint(out.with_suffix(".checkpoint.json"), params, enc)
        print(f"checkpoint: {ckpt}")
    return EXIT_OK


def read_stream_input(path: FsPath, mode: str) -> Tuple[List[Any], List[bool]]:
    """
    Parses one item per line; a '---' line flags a segment boundary on the
    next item. Blank lines are skipped.
    """
    items: List[Any] = []
    flags: List[bool] = []
    pending = False
    for lineno, raw in enumerate(FsPath(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == BOUNDARY_LINE:
            pending = True
            continue
        try:
            if mode == "tokens":
                items.append(int(line))
            else:
                items.append([float(v) for v in re.split(r"[,\s]+", line) if v])
        except ValueError as e:
            raise InputError(f"{path}:{lineno}: {e}") from e
        flags.append(pending)
        pending = False
    if not items:
        raise InputError(f"{path}: no input rows")
    return items, flags


def cmd_stream(args: argparse.Namespace, run: RunConfig, settings: Settings) -> int:
    cfg = _load_config(
        StreamConfig, args, {"input": args.input, "mode": args.mode, "checkpoint": args.checkpoint, "seed": args.seed}
    )
    items, flags = read_stream_input(FsPath(cfg.input), cfg.mode)
    dtype = dtype_for(run.precision)
    rng = make_rng(cfg.seed)

    if cfg.mode == "tokens":
        if cfg.checkpoint:
            params, enc = load_checkpoint(FsPath(cfg.checkpoint))
        else:
            enc = EncoderConfig(
                vocab_size=cfg.vocab,
                max_len=cfg.max_len,
                d=cfg.d,
                layers=cfg.layers,
                mixer=MixerConfig(d=cfg.d, variant="no_ss_ga", lmp_window=cfg.lmp_window),
            )
            params = init_encoder(enc, rng, dtype)
        stream = EncoderStream(params, enc)
        out_rows = np.stack([stream.step(tok, flag) for tok, flag in zip(items, flags)])
    else:
        if cfg.checkpoint:
            params_all, enc = load_checkpoint(FsPath(cfg.checkpoint))
            proj = params_all.layers[0].mix
            mixer = enc.mixer_for_layer(0)
        else:
            mixer = MixerConfig(d=cfg.d, variant="no_ss_ga", lmp_window=cfg.lmp_window)
            proj = init_projections(cfg.d, rng, share_kv=mixer.share_kv, dtype=dtype)
        rows = np.asarray(items, dtype=dtype) if len({len(r) for r in items}) == 1 else None
        if rows is None or rows.shape[1] != mixer.d:
            raise InputError(f"{cfg.input}: every row must have d={mixer.d} values")
        out_rows = run_stream(rows, flags, proj, mixer)

    out = _out_path(run, settings, "stream.csv")
    pd.DataFrame(out_rows).to_csv(out, index=False, header=False)
    print(f"streamed {len(out_rows)} rows: {out}")
    return EXIT_OK


def cmd_norms(args: argparse.Namespace, run: RunConfig, settings: Settings) -> int:
    cfg = _load_config(NormsConfig, args, {"runs": args.runs, "checkpoint": args.checkpoint, "seed": args.seed})
    rng = make_rng(cfg.seed)
    if cfg.checkpoint:
        params, enc = load_checkpoint(FsPath(cfg.checkpoint))
    else:
        enc = EncoderConfig(
            vocab_size=cfg.vocab,
            max_len=cfg.length,
            d=cfg.d,
            layers=cfg.layers,
            mixer=MixerConfig(d=cfg.d, heads=cfg.heads, variant=cfg.variant),
        )
        params = init_encoder(enc, rng, dtype_for(run.precision))
    length = min(cfg.length, enc.max_len)
    seg = segment_even(length, min(cfg.segments, length))
    runs = []
    for _ in range(cfg.runs):
        tokens = [int(t) for t in rng.integers(0, enc.vocab_size, size=length)]
        runs.append(encode(tokens, seg, params, enc, diagnostics=True).diagnostics)
    rows = pooling_norms(runs)
    out = _out_path(run, settings, "norms.csv")
    pd.DataFrame([r.model_dump() for r in rows], columns=["layer", "branch", "norm"]).to_csv(out, index=False)
    print(f"pooling norms ({len(rows)} rows): {out}")
    return EXIT_OK


COMMANDS = {
    "check": cmd_check,
    "bench": cmd_bench,
    "train": cmd_train,
    "stream": cmd_stream,
    "norms": cmd_norms,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(
        level=settings.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run = RunConfig(
            subcommand=args.subcommand,
            config_path=args.config,
            seed=args.seed if args.seed is not None else 0,
            precision=args.precision or settings.default_precision,
            out=args.out,
        )
        return COMMANDS[run.subcommand](args, run, settings)
    except PonetError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except (ValidationError, json.JSONDecodeError, OSError) as e:
        logger.error("usage error: %s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
