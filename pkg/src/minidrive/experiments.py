"""Scale sweep and ablation runners.

The sweep trains stage-1 models across dataset sizes x {action-only, +world
model} x front ends x seeds and reports open-loop metrics per cell. The
ablation runner covers three families: vision-only vs vision-action
pretraining, history length, and the world-model time interval. Cells are
independent and deterministic, so they may run in parallel processes.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import metrics as mt
from . import training as tr
from .dataset import generate_dataset, read_dataset

SWEEP_COLUMNS = ["size", "frontend", "variant", "decoder", "seed",
                 "ade_m", "collision_rate", "pdms_analog", "wallclock_s"]
ABLATE_COLUMNS = ["family", "variant", "seed",
                  "ade_m", "collision_rate", "pdms_analog", "wallclock_s"]


@dataclass
class SweepSpec:
    sizes: list[int] = field(default_factory=lambda: [1000, 10000, 50000])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    front_ends: list[str] = field(default_factory=lambda: ["discrete", "continuous"])
    steps: int = 300
    batch_size: int = 4
    history: int = 2
    n_eval: int = 100
    eval_frames: int = 480
    data_seed_base: int = 1000
    eval_seed: int = 999
    workers: int = 1


def _dataset_path(out_dir: Path, tag: str, n: int, seed: int) -> Path:
    return out_dir / f"data_{tag}_{n}_{seed}.bin"


def ensure_dataset(out_dir: Path, tag: str, n: int, seed: int) -> Path:
    path = _dataset_path(out_dir, tag, n, seed)
    if not path.exists():
        generate_dataset(n, seed=seed, path=path)
    return path


def _cell_config(base: tr.RunConfig, spec: SweepSpec, frontend: str,
                 wm_on: bool, seed: int) -> tr.RunConfig:
    return replace(
        base, stage=1, steps=spec.steps, batch_size=spec.batch_size,
        wm_enabled=wm_on,
        seq=replace(base.seq, history=spec.history, front_end=frontend),
        seed_model=seed, seed_data=seed + 101, seed_noise=seed + 202)


def run_sweep_cell(args) -> dict:
    """Train + evaluate one (size, frontend, variant, seed) cell."""
    (size, frontend, wm_on, seed, train_path, eval_path, base_cfg, spec) = args
    variant = "+wm" if wm_on else "action_only"
    row = {"size": size, "frontend": frontend, "variant": variant,
           "decoder": "-", "seed": seed}
    t0 = time.perf_counter()
    try:
        cfg = _cell_config(base_cfg, spec, frontend, wm_on, seed)
        train_records = read_dataset(train_path)
        result = tr.train_stage1(train_records, cfg)
        eval_records = read_dataset(eval_path)
        results = tr.evaluate_model(eval_records, result.store, cfg,
                                    result.codebook, n_eval=spec.n_eval,
                                    seed=spec.eval_seed)
        agg = mt.aggregate(results)
        row.update(ade_m=f"{agg['ade_m']:.6f}",
                   collision_rate=f"{agg['collision_rate']:.6f}",
                   pdms_analog=f"{agg['pdms']:.6f}")
    except Exception as exc:  # record the failure, keep sweeping
        row.update(ade_m="nan", collision_rate="nan", pdms_analog="nan")
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["wallclock_s"] = f"{time.perf_counter() - t0:.2f}"
    return row


def run_scale_sweep(base_cfg: tr.RunConfig, spec: SweepSpec,
                    out_dir: str | Path) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    eval_path = ensure_dataset(out_dir, "eval", spec.eval_frames, spec.eval_seed)
    cells = []
    for i, size in enumerate(spec.sizes):
        train_path = ensure_dataset(out_dir, "train", size, spec.data_seed_base + i)
        for frontend in spec.front_ends:
            for wm_on in (False, True):
                for seed in spec.seeds:
                    cells.append((size, frontend, wm_on, seed, train_path,
                                  eval_path, base_cfg, spec))
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            rows = list(pool.map(run_sweep_cell, cells))
    else:
        rows = [run_sweep_cell(c) for c in cells]
    write_rows_csv(out_dir / "sweep.csv", SWEEP_COLUMNS, rows)
    return rows


def median_ade(rows: list[dict], size: int, frontend: str, variant: str) -> float:
    vals = [float(r["ade_m"]) for r in rows
            if r["size"] == size and r["frontend"] == frontend
            and r["variant"] == variant]
    return float(np.median(vals))


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationSpec:
    families: list[str] = field(default_factory=lambda: ["seq_design", "seq_length",
                                                         "interval"])
    seeds: list[int] = field(default_factory=lambda: [0])
    pretrain_steps: int = 300
    finetune_steps: int = 150
    batch_size: int = 4
    pretrain_frames: int = 2000
    finetune_frames: int = 800
    eval_frames: int = 480
    n_eval: int = 100
    pretrain_seed: int = 2000
    finetune_seed: int = 3000
    eval_seed: int = 999


def _seq(history: int, interval: float = 1.0, vision_only: bool = False) -> bb.SequenceConfig:
    return bb.SequenceConfig(history=history, interval_s=interval,
                             front_end="discrete", vision_only=vision_only)


def _ablation_variants(spec: AblationSpec) -> list[tuple[str, str, bb.SequenceConfig | None, bb.SequenceConfig]]:
    """(family, variant, pretrain seq or None, finetune seq) tuples."""
    out = []
    if "seq_design" in spec.families:
        out += [("seq_design", "scratch_2va", None, _seq(2)),
                ("seq_design", "6v_then_2va", _seq(6, vision_only=True), _seq(2)),
                ("seq_design", "6va_then_2va", _seq(6), _seq(2))]
    if "seq_length" in spec.families:
        out += [("seq_length", "va", _seq(1), _seq(2)),
                ("seq_length", "2va", _seq(2), _seq(2)),
                ("seq_length", "6va", _seq(6), _seq(2))]
    if "interval" in spec.families:
        out += [("interval", "va_no_history", _seq(6), _seq(1)),
                ("interval", "2va_1s", _seq(6), _seq(2, interval=1.0)),
                ("interval", "2va_4s", _seq(6), _seq(2, interval=4.0))]
    return out


def run_ablation_cell(args) -> dict:
    (family, variant, pre_seq, fine_seq, seed, paths, base_cfg, spec) = args
    pre_path, fine_path, eval_path, out_dir = paths
    row = {"family": family, "variant": variant, "seed": seed}
    t0 = time.perf_counter()
    try:
        ckpt = None
        if pre_seq is not None:
            pre_cfg = replace(base_cfg, stage=1, steps=spec.pretrain_steps,
                              batch_size=spec.batch_size, seq=pre_seq,
                              seed_model=seed, seed_data=seed + 11,
                              seed_noise=seed + 22)
            pre_dir = Path(out_dir) / f"{family}_{variant}_s{seed}_pre"
            tr.train_stage1(read_dataset(pre_path), pre_cfg, out_dir=pre_dir)
            ckpt = pre_dir / "checkpoint.ckpt"
        fine_cfg = replace(base_cfg, stage=1, steps=spec.finetune_steps,
                           batch_size=spec.batch_size, seq=fine_seq,
                           seed_model=seed, seed_data=seed + 33,
                           seed_noise=seed + 44)
        result = tr.train_stage1(read_dataset(fine_path), fine_cfg, init_from=ckpt)
        results = tr.evaluate_model(read_dataset(eval_path), result.store, fine_cfg,
                                    result.codebook, n_eval=spec.n_eval,
                                    seed=spec.eval_seed)
        agg = mt.aggregate(results)
        row.update(ade_m=f"{agg['ade_m']:.6f}",
                   collision_rate=f"{agg['collision_rate']:.6f}",
                   pdms_analog=f"{agg['pdms']:.6f}")
    except Exception as exc:
        row.update(ade_m="nan", collision_rate="nan", pdms_analog="nan")
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["wallclock_s"] = f"{time.perf_counter() - t0:.2f}"
    return row


def run_ablations(base_cfg: tr.RunConfig, spec: AblationSpec,
                  out_dir: str | Path, workers: int = 1) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pre_path = ensure_dataset(out_dir, "pretrain", spec.pretrain_frames,
                              spec.pretrain_seed)
    fine_path = ensure_dataset(out_dir, "finetune", spec.finetune_frames,
                               spec.finetune_seed)
    eval_path = ensure_dataset(out_dir, "eval", spec.eval_frames, spec.eval_seed)
    paths = (pre_path, fine_path, eval_path, out_dir)
    cells = [(family, variant, pre, fine, seed, paths, base_cfg, spec)
             for family, variant, pre, fine in _ablation_variants(spec)
             for seed in spec.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_ablation_cell, cells))
    else:
        rows = [run_ablation_cell(c) for c in cells]
    write_rows_csv(out_dir / "ablate.csv", ABLATE_COLUMNS, rows)
    return rows


def write_rows_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    extra = sorted({k for r in rows for k in r} - set(columns))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns + extra)
        w.writeheader()
        w.writerows(rows)
