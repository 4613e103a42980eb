"""Command-line entry point.

Commands: gen-data, train, eval, sweep, ablate, generate, latency,
validate-data. Global flags: --config PATH, --set key=value (repeatable),
--out DIR, --seed N, --force.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    """Global flags work both before and after the subcommand; the
    subcommand copies use SUPPRESS so they never clobber earlier values."""
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=d,
                        help="dotted-key config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        default=argparse.SUPPRESS if suppress else [],
                        help="override one config key (repeatable)")
    parser.add_argument("--out", type=Path, default=d,
                        help="output directory or file")
    parser.add_argument("--seed", type=int, default=d,
                        help="base seed (sets seeds.* and data.seed)")
    parser.add_argument("--force", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="allow overwriting outputs")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="minidrive",
                description="Desk-scale driving world-model VLA toolkit")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        child = sub.add_parser(name, help=help_text)
        _global_flags(child, suppress=True)
        return child

    g = add("gen-data", "generate a dataset file")
    g.add_argument("--n", type=int, help="number of frames (default data.n_frames)")

    t = add("train", "run stage-1 or stage-2 training")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--ckpt", type=Path, help="stage-1 checkpoint (stage 2 only)")

    e = add("eval", "evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)

    add("sweep", "scale sweep: sizes x variants x seeds")
    add("ablate", "sequence-design/length/interval ablations")

    gen = add("generate", "world-model rollout to an image dump")
    gen.add_argument("--ckpt", type=Path, required=True)
    gen.add_argument("--data", type=Path, required=True)
    gen.add_argument("--index", type=int, default=0,
                     help="eval frame index within valid frames")

    lat = add("latency", "decoder latency comparison")
    lat.add_argument("--ckpt", type=Path, required=True)
    lat.add_argument("--data", type=Path, required=True)

    v = add("validate-data", "check a dataset file")
    v.add_argument("path", type=Path)
    return p


def _apply_seed(cfg, seed: int | None) -> None:
    if seed is None:
        return
    cfg.set("seeds.model", seed)
    cfg.set("seeds.data", seed + 1)
    cfg.set("seeds.noise", seed + 2)
    cfg.set("data.seed", seed)


def _require_out(args, kind: str = "directory") -> Path:
    if args.out is None:
        print(f"error: --out {kind} is required for this command", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    return args.out


def _echo_config(cfg, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.echo(), encoding="utf-8")


def _load_run(args, cfg):
    from .dataset import DataError, read_dataset
    from .training import load_stage1

    run_cfg = cfg.run_config()
    if not args.ckpt.exists():
        raise DataError(f"checkpoint not found: {args.ckpt}")
    if not args.data.exists():
        raise DataError(f"dataset not found: {args.data}")
    store, codebook = load_stage1(args.ckpt, run_cfg)
    records = read_dataset(args.data)
    return run_cfg, store, codebook, records


def cmd_gen_data(args, cfg) -> int:
    from .dataset import generate_dataset
    out = _require_out(args, "file")
    if out.exists() and not args.force:
        print(f"error: {out} exists; pass --force to overwrite", file=sys.stderr)
        return EXIT_DATA
    n = args.n if args.n is not None else cfg["data.n_frames"]
    out.parent.mkdir(parents=True, exist_ok=True)
    generate_dataset(n, seed=cfg["data.seed"], mix=cfg.mix(), path=out)
    print(f"wrote {n} frames to {out}")
    return EXIT_OK


def cmd_validate_data(args, cfg) -> int:
    from .dataset import validate_dataset_file
    problems = validate_dataset_file(args.path)
    if problems:
        for msg in problems[:20]:
            print(f"invalid: {msg}", file=sys.stderr)
        return EXIT_DATA
    print(f"{args.path}: ok")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .dataset import DataError, read_dataset
    from .training import train_stage1, train_stage2
    out_dir = _require_out(args)
    if not args.data.exists():
        raise DataError(f"dataset not found: {args.data}")
    _echo_config(cfg, out_dir)
    records = read_dataset(args.data)
    run_cfg = cfg.run_config()
    if run_cfg.stage == 1:
        result = train_stage1(records, run_cfg, out_dir=out_dir)
    else:
        if args.ckpt is None:
            print("error: stage 2 requires --ckpt", file=sys.stderr)
            return EXIT_USAGE
        if not args.ckpt.exists():
            raise DataError(f"checkpoint not found: {args.ckpt}")
        result = train_stage2(records, run_cfg, args.ckpt, out_dir=out_dir)
    print(f"trained {run_cfg.steps} steps; checkpoint at {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .metrics import aggregate, write_report_csv
    from .training import evaluate_model
    out_dir = _require_out(args)
    run_cfg, store, codebook, records = _load_run(args, cfg)
    _echo_config(cfg, out_dir)
    results = evaluate_model(records, store, run_cfg, codebook,
                             n_eval=cfg["eval.n_eval"], seed=cfg["eval.seed"])
    write_report_csv(out_dir / "eval_report.csv", results)
    agg = aggregate(results)
    print(f"ade={agg['ade_m']:.4f} m  collision_rate={agg['collision_rate']:.4f}  "
          f"pdms={agg['pdms']:.4f}  ({len(results)} scenarios)")
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    from .experiments import run_scale_sweep
    out_dir = _require_out(args)
    _echo_config(cfg, out_dir)
    rows = run_scale_sweep(cfg.run_config(), cfg.sweep_spec(), out_dir)
    print(f"wrote {len(rows)} sweep rows to {out_dir / 'sweep.csv'}")
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    from .experiments import run_ablations
    out_dir = _require_out(args)
    _echo_config(cfg, out_dir)
    rows = run_ablations(cfg.run_config(), cfg.ablation_spec(), out_dir,
                         workers=cfg["sweep.workers"])
    print(f"wrote {len(rows)} ablation rows to {out_dir / 'ablate.csv'}")
    return EXIT_OK


def cmd_generate(args, cfg) -> int:
    from .autodiff import mean_rows
    from .backbone import forward, generate_visual_tokens
    from .dataset import records_by_clip
    from .diffusion import sample_future, write_image_dump
    from .tokenizers import ActionTokenizer
    from .training import _valid_samples, build_training_sequence

    out = _require_out(args, "file")
    if out.exists() and not args.force:
        print(f"error: {out} exists; pass --force to overwrite", file=sys.stderr)
        return EXIT_DATA
    run_cfg, store, codebook, records = _load_run(args, cfg)
    clips = records_by_clip(records)
    samples = _valid_samples(clips, run_cfg.seq, need_future=False)
    cid, t = samples[args.index % len(samples)]
    seq = build_training_sequence(clips[cid], t, run_cfg.seq,
                                  ActionTokenizer(gamma=run_cfg.gamma), codebook)
    seed = cfg["seeds.noise"]
    if run_cfg.seq.front_end == "discrete":
        ids = generate_visual_tokens(seq, store, run_cfg.model, seed=seed)
        image = codebook.decode_tokens(ids)
    else:
        out_bb = forward(seq.prefix(seq.input_length), store, run_cfg.model)
        image = sample_future(mean_rows(out_bb.visual_features(-1)),
                              mean_rows(out_bb.action_features(-1)),
                              store, run_cfg.schedule, seed=seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image_dump(out, image)
    print(f"wrote {image.shape} image dump to {out}")
    return EXIT_OK


def cmd_latency(args, cfg) -> int:
    from .action_expert import init_expert_params
    from .experiments import write_rows_csv
    from .latency import latency_bench
    run_cfg, store, codebook, records = _load_run(args, cfg)
    if "expert.tok_emb" not in store:
        init_expert_params(store, run_cfg.model, run_cfg.expert,
                           np.random.default_rng([run_cfg.seed_model, 1]))
    report = latency_bench(records, store, codebook, run_cfg,
                           repeats=cfg["latency.repeats"],
                           warmup=cfg["latency.warmup"])
    for row in report.rows():
        ratio = f"  ratio={row['ratio_to_backbone']}" if row["ratio_to_backbone"] else ""
        print(f"{row['path']:>18}: {float(row['median_s'])*1e3:9.2f} ms{ratio}")
    print(f"expert_ar affine fit: slope={report.ar_fit_slope*1e3:.2f} ms/token, "
          f"R^2={report.ar_fit_r2:.5f}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_rows_csv(args.out / "latency.csv",
                       ["path", "median_s", "ratio_to_backbone"], report.rows())
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "validate-data": cmd_validate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "generate": cmd_generate,
    "latency": cmd_latency,
}


def main(argv: list[str] | None = None) -> int:
    from .config import ConfigError, load_config
    from .dataset import DataError
    from .training import NumericFailure

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, args.set)
        _apply_seed(cfg, args.seed)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, cfg)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
