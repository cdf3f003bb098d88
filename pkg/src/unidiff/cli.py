"""Command-line entry point: ``unidiff <subcommand> [flags]``.

Exit status is 0 on success, 2 for usage errors and the error's ``code``
attribute for library failures (see :mod:`unidiff.errors`).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .config import RunConfig, load_run_config, load_world_config, save_run_config
from .errors import ConfigError, UnidiffError
from .kernel import posterior, q_xt_given_x0, transition_column
from .layout import new_layout
from .sampler import KnownMask, SamplerConfig, generate
from .schedule import make_schedule
from .trainer import load_params, train
from .world import caption_words, generate_dataset, load_dataset, records_to_array, render, save_dataset

OUTPUT_ENV = "UNIDIFF_OUTPUT_DIR"
log = logging.getLogger("unidiff")


def _load_config(path) -> RunConfig:
    return RunConfig() if path is None else load_run_config(path)


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ENV) or "runs")


def cmd_gen_data(args) -> int:
    run = _load_config(args.config)
    if args.world_config:
        run = replace(run, world=load_world_config(args.world_config))
    records = generate_dataset(args.n, args.seed, run.world)
    save_dataset(records, args.out, run.world)
    if args.render:
        _render_many(records_to_array(records[: args.render_count], run.layout()), run, Path(args.render), "record")
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = _load_config(args.config)
    overrides = {k: v for k, v in (("steps", args.steps), ("seed", args.seed), ("batch_size", args.batch_size),
                                   ("lr", args.lr)) if v is not None}
    run = replace(run, train=replace(run.train, **overrides))
    records, world = load_dataset(args.data)
    if world != run.world:
        raise ConfigError(f"dataset {args.data} was generated for a different world than the config describes")
    out = _out_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(run, out / "run.json")
    denoiser = run.build_denoiser()
    schedule = run.make_schedule()
    state = train(run.train, records_to_array(records, run.layout()), denoiser, schedule, out_dir=out,
                  resume=args.resume)
    print(f"trained to step {state.step}; checkpoint {out / 'last.bin'}")
    return 0


def _model_from(args):
    cfg_path = args.config
    if cfg_path is None and (Path(args.checkpoint).parent / "run.json").exists():
        cfg_path = Path(args.checkpoint).parent / "run.json"
    run = _load_config(cfg_path)
    denoiser = run.build_denoiser()
    schedule = run.make_schedule()
    load_params(args.checkpoint, denoiser, schedule)
    return run, denoiser, schedule


def _sampler_config(args, run: RunConfig, task: str) -> SamplerConfig:
    base = run.sampler
    return SamplerConfig(task=task, stride=args.stride or base.stride,
                         truncation_rate=args.truncation if args.truncation is not None else
                         (base.truncation_rate if base.task == task else None),
                         truncation_mode=args.truncation_mode or base.truncation_mode,
                         clamp=base.clamp, seed=base.seed if args.seed is None else args.seed)


def _record(seq_row: np.ndarray, run: RunConfig, seed: int, task: str, index: int) -> dict:
    n_grid = run.world.rows * run.world.cols
    return {"seed": seed, "task": task, "index": index,
            "segments": [seq_row[:n_grid].tolist(), seq_row[n_grid:].tolist()]}


def _write_records(rows, run, path, seed, task):
    lines = [json.dumps(_record(r, run, seed, task, i), sort_keys=True) for i, r in enumerate(rows)]
    Path(path).write_text("\n".join(lines) + "\n")


def _render_many(rows, run: RunConfig, directory: Path, stem: str):
    directory.mkdir(parents=True, exist_ok=True)
    n_grid = run.world.rows * run.world.cols
    for i, row in enumerate(rows):
        text, ppm = render(row[:n_grid], run.layout(), run.world)
        text += "\n" + caption_words(row[n_grid:], run.layout(), run.world) + "\n"
        (directory / f"{stem}-{i:04d}.txt").write_text(text)
        (directory / f"{stem}-{i:04d}.ppm").write_text(ppm)


def cmd_sample(args) -> int:
    run, denoiser, schedule = _model_from(args)
    cfg = _sampler_config(args, run, args.task)
    pm = denoiser.position_modality
    if cfg.task == "pair":
        known = None
    elif cfg.task in ("t2i", "i2t"):
        if args.data is None:
            raise ConfigError(f"--task {cfg.task} needs --data (and --index) to condition on")
        records, _ = load_dataset(args.data)
        if not 0 <= args.index < len(records):
            raise ConfigError(f"--index {args.index} outside dataset of {len(records)} records")
        known = KnownMask.for_task(cfg.task, pm, records[args.index].fused(run.layout()))
    else:
        raise ConfigError("use the 'complete' subcommand for infilling")
    out = generate(cfg, denoiser, schedule, run.layout(), known=known, count=args.count)
    _write_records(out.indices, run, args.out, cfg.seed, cfg.task)
    if args.render:
        _render_many(out.indices, run, Path(args.render), "sample")
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def read_mask_region(path, world) -> np.ndarray:
    """Grid of ``.`` (keep) / ``#`` (regenerate) glyphs -> boolean region, row-major."""
    rows = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(rows) != world.rows or any(len(r) != world.cols for r in rows):
        raise ConfigError(f"{path}: mask region must be {world.rows} lines of {world.cols} glyphs")
    bad = {ch for r in rows for ch in r} - {".", "#"}
    if bad:
        raise ConfigError(f"{path}: unexpected glyph(s) {sorted(bad)}; use '.' to keep and '#' to mask")
    return np.array([ch == "#" for r in rows for ch in r])


def parse_caption_edit(edit: str, world) -> tuple[np.ndarray, np.ndarray]:
    """``"a ~red~ blue square here"`` -> (local tokens, regenerate flags) for every caption slot.

    ``~word~`` marks a struck original word and is dropped; ``?`` leaves the
    slot for the model to fill; slots past the last given word become pads.
    """
    words = world.words
    kept = [w for w in edit.split() if not (len(w) > 2 and w.startswith("~") and w.endswith("~"))]
    if len(kept) > world.caption_len:
        raise ConfigError(f"caption edit has {len(kept)} slots, caption holds {world.caption_len}")
    tokens = np.zeros(world.caption_len, dtype=np.int64)
    regen = np.zeros(world.caption_len, dtype=bool)
    for i, w in enumerate(kept):
        if w == "?":
            regen[i] = True
        elif w in words:
            tokens[i] = words.index(w)
        else:
            raise ConfigError(f"caption word {w!r} is not in the vocabulary {words}")
    return tokens, regen


def cmd_complete(args) -> int:
    run, denoiser, schedule = _model_from(args)
    world, layout = run.world, run.layout()
    records, _ = load_dataset(args.data)
    if not 0 <= args.index < len(records):
        raise ConfigError(f"--index {args.index} outside dataset of {len(records)} records")
    source = records[args.index].fused(layout).copy()
    region = np.zeros(source.size, dtype=bool)
    n_grid = world.rows * world.cols
    if args.mask_file:
        region[:n_grid] = read_mask_region(args.mask_file, world)
    if args.caption is not None:
        tokens, regen = parse_caption_edit(args.caption, world)
        source[n_grid:] = tokens + layout.offsets[1]
        region[n_grid:] = regen
    cfg = _sampler_config(args, run, "infill")
    known = KnownMask.for_task("infill", denoiser.position_modality, source, region=region)
    out = generate(cfg, denoiser, schedule, layout, known=known, count=args.count)
    _write_records(out.indices, run, args.out, cfg.seed, "infill")
    if args.render:
        _render_many(out.indices, run, Path(args.render), "complete")
    print(f"wrote {args.count} completions to {args.out}")
    return 0


def _inspect_rows(args):
    layout = new_layout(args.sizes)
    schedule = make_schedule(args.plan, args.T, args.alpha_floor)
    if args.what == "layout":
        header = ["modality", "offset", "size"]
        rows = [[m, o, k] for m, (o, k) in enumerate(zip(layout.offsets, layout.sizes))]
        rows.append(["mask", layout.mask_index, 1])
    elif args.what == "schedule":
        header = ["t", "alpha_bar", "gamma_bar", "alpha", "gamma"]
        rows = [[t, schedule.alpha_bar[t], schedule.gamma_bar[t], schedule.alpha[t] if t else "",
                 schedule.gamma[t] if t else ""] for t in range(schedule.T + 1)]
    elif args.what == "column":
        col = transition_column(args.t, args.x0, schedule, layout).dense(args.x0, layout)
        header, rows = ["x_t", "q"], [[i, v] for i, v in enumerate(col)]
    elif args.what == "marginal":
        q = q_xt_given_x0(args.t, args.x0, schedule, layout)
        header, rows = ["x_t", "q"], [[i, v] for i, v in enumerate(q)]
    else:
        if args.xt is None:
            raise ConfigError("--what posterior needs --xt")
        p = posterior(args.t, args.xt, args.x0, schedule, layout)
        header, rows = ["x_prev", "q"], [[i, v] for i, v in enumerate(p)]
    return header, rows


def _fmt(v):
    return f"{v:.12g}" if isinstance(v, (float, np.floating)) else str(v)


def cmd_inspect(args) -> int:
    if args.config is not None:
        run = load_run_config(args.config)
        args.sizes = list(run.layout().sizes)
        args.T, args.plan, args.alpha_floor = run.schedule.T, run.schedule.plan, run.schedule.alpha_floor
    header, rows = _inspect_rows(args)
    if args.format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[_fmt(v) for v in r] for r in rows])
        sys.stdout.write(buf.getvalue())
    else:
        cells = [header] + [[_fmt(v) for v in r] for r in rows]
        widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
        for c in cells:
            print("  ".join(s.rjust(w) for s, w in zip(c, widths)))
    return 0


def cmd_verify(args) -> int:
    results = verify_mod.run_all(seed=args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} oracle checks passed")
    return 0 if failed == 0 else 1


def _sizes(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_sampling_flags(p):
    p.add_argument("--config", help="run config (JSON); defaults to run.json beside the checkpoint")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--stride", type=int, help="levels skipped per reverse step (default from config, 1)")
    p.add_argument("--truncation", type=float, help="keep rate in (0, 1] (default per task)")
    p.add_argument("--truncation-mode", choices=("mass", "count"), help="nucleus mass or token-count fraction")
    p.add_argument("--seed", type=int, help="sampler seed (default from config)")
    p.add_argument("--count", type=int, default=1, help="number of chains (default 1)")
    p.add_argument("--out", required=True, help="output JSON-lines file")
    p.add_argument("--render", help="directory for rendered text/pixmap files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unidiff", description="Fused-vocabulary discrete diffusion toolkit.")
    parser.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--config", help="run config (JSON); built-in defaults otherwise")
    p.add_argument("--world-config", help="world description (JSON); overrides the config's world")
    p.add_argument("--n", "--count", dest="n", type=int, default=1000, help="number of records (default 1000)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--render", help="directory for rendered previews")
    p.add_argument("--render-count", type=int, default=8, help="records to preview (default 8)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser")
    p.add_argument("--config", help="run config (JSON); built-in defaults otherwise")
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--out-dir", help=f"checkpoint/metrics directory (default ${OUTPUT_ENV} or ./runs)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="total optimizer steps")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--batch-size", type=int, help="sequences per step")
    p.add_argument("--lr", type=float, help="learning rate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate pairs, or one modality given the other")
    _add_sampling_flags(p)
    p.add_argument("--task", choices=("pair", "t2i", "i2t"), default="pair", help="generation task (default pair)")
    p.add_argument("--data", help="dataset holding the conditioning record (t2i / i2t)")
    p.add_argument("--index", type=int, default=0, help="record index in --data (default 0)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("complete", help="regenerate masked grid cells and edited caption slots")
    _add_sampling_flags(p)
    p.add_argument("--data", required=True, help="dataset holding the source record")
    p.add_argument("--index", type=int, default=0, help="record index in --data (default 0)")
    p.add_argument("--mask-file", help="grid of '.' (keep) and '#' (regenerate) glyphs")
    p.add_argument("--caption", help="edited caption; ~word~ strikes a word, ? leaves a slot open")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("inspect", help="print layout, schedule or kernel tables")
    p.add_argument("--config", help="take layout and schedule from a run config")
    p.add_argument("--sizes", type=_sizes, default=[3, 2], help="modality sizes, e.g. 3,2,4 (default 3,2)")
    p.add_argument("--T", type=int, default=16, help="number of levels (default 16)")
    p.add_argument("--plan", default="linear", help="schedule plan (default linear)")
    p.add_argument("--alpha-floor", type=float, default=1e-9, help="retention floor (default 1e-9)")
    p.add_argument("--what", choices=("layout", "schedule", "column", "marginal", "posterior"), default="schedule",
                   help="table to print (default schedule)")
    p.add_argument("--t", type=int, default=1, help="level for column/marginal/posterior (default 1)")
    p.add_argument("--x0", type=int, default=0, help="source token (default 0)")
    p.add_argument("--xt", type=int, help="observed token for --what posterior")
    p.add_argument("--format", choices=("text", "csv"), default="text", help="output format (default text)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("verify", help="run the reference-oracle checks")
    p.add_argument("--seed", type=int, default=0, help="seed for randomized checks (default 0)")
    p.set_defaults(func=cmd_verify)
    return parser


def _cap_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl unavailable; --threads only affects child processes")
        return
    threadpool_limits(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        _cap_threads(args.threads)
    try:
        return args.func(args)
    except UnidiffError as exc:
        print(f"error[{exc.code}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error[3] {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
