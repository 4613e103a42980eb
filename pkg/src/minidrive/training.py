"""Two-stage training orchestration and model evaluation.

Stage 1 pretrains the backbone on interleaved sequences with the joint
action + world-model objective (AR cross entropy on the discrete front
end, latent diffusion on the continuous one). Stage 2 attaches the action
expert on 2VA sequences and optimizes only the chosen decoder's loss; the
backbone stays trainable unless explicitly frozen.

Every run is fully determined by (config, seeds): model init, data order
and noise each use their own seed stream. Loss logs are CSV rows of
(step, lr, loss_total, loss_action, loss_wm, grad_norm).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import action_expert as ax
from . import backbone as bb
from . import diffusion as df
from . import metrics as mt
from . import tokenizers as tk
from .autodiff import Tape, add, constant, l1, mean_rows, scale
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import SceneRecord, records_by_clip
from .optim import AdamWConfig, OptimizerState, adamw_step, cosine_lr
from .params import ParamStore

CODEBOOK_KEY = "codebook.centroids"


class NumericFailure(RuntimeError):
    """Training diverged; the last good checkpoint was written."""


@dataclass
class RunConfig:
    stage: int = 1
    model: bb.ModelConfig = field(default_factory=bb.ModelConfig)
    seq: bb.SequenceConfig = field(default_factory=bb.SequenceConfig)
    expert: ax.ExpertConfig = field(default_factory=ax.ExpertConfig)
    steps: int = 500
    batch_size: int = 4
    peak_lr: float = 2e-4
    warmup_steps: int = 100
    lr_floor_frac: float = 0.1
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    alpha: float = 1.0            # AR world-model weight (discrete front end)
    beta: float = 1.0             # diffusion world-model weight (continuous)
    wm_enabled: bool = True
    gamma: float = tk.DEFAULT_GAMMA
    freeze_backbone: bool = False
    seed_model: int = 0
    seed_data: int = 1
    seed_noise: int = 2
    codebook_seed: int = 7
    schedule: df.NoiseSchedule = field(default_factory=df.NoiseSchedule)

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.seq.front_end not in ("discrete", "continuous"):
            raise ValueError(f"unknown front end {self.seq.front_end!r}")


@dataclass
class TrainResult:
    store: ParamStore
    codebook: tk.VisualCodebook | None
    log_rows: list[dict]
    checkpoint_path: Path | None
    skipped_diffusion_records: int = 0


def _valid_samples(clips: dict[int, list[SceneRecord]], seq_cfg: bb.SequenceConfig,
                   need_future: bool) -> list[tuple[int, int]]:
    t_min = seq_cfg.min_frame_index()
    out = []
    for cid, recs in clips.items():
        t_max = len(recs) - 1 - (1 if need_future else 0)
        out.extend((cid, t) for t in range(t_min, t_max + 1))
    if not out:
        raise ValueError("no frames support the requested history/interval")
    return out


def _chunk_records(clip: list[SceneRecord], t: int,
                   seq_cfg: bb.SequenceConfig) -> tuple[list[SceneRecord], list[SceneRecord]]:
    fpi = seq_cfg.frames_per_interval()
    idx = [t - (seq_cfg.history - 1 - i) * fpi for i in range(seq_cfg.history)]
    return [clip[i] for i in idx], [clip[i - 1] for i in idx]


def build_training_sequence(clip: list[SceneRecord], t: int, seq_cfg: bb.SequenceConfig,
                            tokenizer: tk.ActionTokenizer,
                            codebook: tk.VisualCodebook | None) -> bb.TokenSequence:
    recs, prevs = _chunk_records(clip, t, seq_cfg)
    return bb.build_sequence(recs, prevs, seq_cfg, tokenizer, codebook)


def fit_run_codebook(records: list[SceneRecord], cfg: RunConfig) -> tk.VisualCodebook | None:
    if cfg.seq.front_end != "discrete":
        return None
    return tk.fit_codebook([r.image for r in records], seed=cfg.codebook_seed)


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "loss_total", "loss_action",
                                           "loss_wm", "grad_norm"])
        w.writeheader()
        w.writerows(rows)


def _save(store: ParamStore, codebook: tk.VisualCodebook | None, path: Path) -> None:
    tensors = dict(store.state_arrays())
    if codebook is not None:
        tensors[CODEBOOK_KEY] = codebook.centroids.astype(np.float32)
    save_checkpoint(path, tensors)


def train_stage1(records: list[SceneRecord], cfg: RunConfig,
                 out_dir: str | Path | None = None,
                 init_from: str | Path | None = None) -> TrainResult:
    """Joint action + world-model pretraining; seed-deterministic.

    `init_from` warm-starts from an earlier stage-1 checkpoint (the
    pretrain-then-finetune ablations); the checkpoint's codebook, when
    present, replaces a fresh fit so token meanings carry over.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    tokenizer = tk.ActionTokenizer(gamma=cfg.gamma)
    init_arrays = load_checkpoint(init_from) if init_from is not None else None
    if init_arrays is not None and CODEBOOK_KEY in init_arrays:
        codebook = tk.VisualCodebook(
            centroids=init_arrays.pop(CODEBOOK_KEY).astype(np.float64),
            seed=cfg.codebook_seed, inertia=float("nan"))
    else:
        codebook = fit_run_codebook(records, cfg)
    clips = records_by_clip(records)
    continuous = cfg.seq.front_end == "continuous"
    use_wm = cfg.wm_enabled and ((not continuous and cfg.alpha > 0)
                                 or (continuous and cfg.beta > 0))
    if cfg.seq.vision_only and continuous:
        raise ValueError("vision-only ablation requires the discrete front end")
    if cfg.seq.vision_only and not use_wm:
        raise ValueError("vision-only training needs the world-model loss enabled")
    samples = _valid_samples(clips, cfg.seq, need_future=continuous and use_wm)

    rng_model = np.random.default_rng(cfg.seed_model)
    rng_data = np.random.default_rng(cfg.seed_data)
    rng_noise = np.random.default_rng(cfg.seed_noise)
    store = bb.init_backbone_params(cfg.model, rng_model, continuous=continuous)
    schedule = cfg.schedule if continuous else None
    if continuous and use_wm:
        df.init_denoiser_params(store, rng_model, cond_dim=cfg.model.d_model)
    if init_arrays is not None:
        store.load_arrays(init_arrays, strict=False)
    opt = OptimizerState.for_store(store, cfg.adamw)

    rows: list[dict] = []
    skipped = 0
    ckpt_path = out_dir / "checkpoint.ckpt" if out_dir is not None else None
    for step in range(1, cfg.steps + 1):
        lr = cosine_lr(step, cfg.warmup_steps, cfg.steps, cfg.peak_lr,
                       cfg.lr_floor_frac)
        store.zero_grads()
        batch = [samples[int(rng_data.integers(len(samples)))]
                 for _ in range(cfg.batch_size)]
        act_losses, wm_losses = [], []
        try:
            for cid, t in batch:
                clip = clips[cid]
                seq = build_training_sequence(clip, t, cfg.seq, tokenizer, codebook)
                with Tape() as tape:
                    parts = []
                    act_val = None
                    out = bb.forward(seq, store, cfg.model)
                    if not cfg.seq.vision_only:
                        la = bb.loss_action(out)
                        act_val = la.item()
                        parts.append(la)
                    wm_val = None
                    if use_wm and not continuous:
                        lw = bb.loss_wm_ar(out)
                        wm_val = lw.item()
                        parts.append(scale(lw, cfg.alpha))
                    elif use_wm and continuous:
                        if t + 1 < len(clip):
                            cond_v = out.visual_features(-1)
                            cond_a = out.action_features(-1)
                            lw = df.loss_wm_diff(mean_rows(cond_v), mean_rows(cond_a),
                                                 clip[t + 1].image, store, schedule,
                                                 rng_noise)
                            wm_val = lw.item()
                            parts.append(scale(lw, cfg.beta))
                        else:
                            skipped += 1
                    total = parts[0]
                    for p in parts[1:]:
                        total = add(total, p)
                    total = scale(total, 1.0 / cfg.batch_size)
                    tape.backward(total)
                if act_val is not None:
                    act_losses.append(act_val)
                if wm_val is not None:
                    wm_losses.append(wm_val)
        except ValueError as exc:
            if "non-finite" not in str(exc):
                raise
            # activations blew up before the loss could report it
            if out_dir is not None:
                _save(store, codebook, ckpt_path)
                _write_log(out_dir / "loss_log.csv", rows)
            raise NumericFailure(f"non-finite activations at step {step}") from exc

        act_mean = float(np.mean(act_losses)) if act_losses else None
        wm_mean = float(np.mean(wm_losses)) if wm_losses else None
        wm_weight = cfg.alpha if not continuous else cfg.beta
        total_mean = (act_mean or 0.0) + (wm_weight * wm_mean if use_wm and wm_mean is not None else 0.0)
        report = adamw_step(store, opt, lr)
        rows.append({"step": step, "lr": f"{lr:.8g}",
                     "loss_total": f"{total_mean:.8f}",
                     "loss_action": "n/a" if act_mean is None else f"{act_mean:.8f}",
                     "loss_wm": "n/a" if wm_mean is None else f"{wm_mean:.8f}",
                     "grad_norm": f"{report.grad_norm:.8f}"})
        if not math.isfinite(total_mean):
            if out_dir is not None:
                _save(store, codebook, ckpt_path)
                _write_log(out_dir / "loss_log.csv", rows)
            raise NumericFailure(f"loss diverged at step {step}")
    if out_dir is not None:
        _save(store, codebook, ckpt_path)
        _write_log(out_dir / "loss_log.csv", rows)
    return TrainResult(store=store, codebook=codebook, log_rows=rows,
                       checkpoint_path=ckpt_path, skipped_diffusion_records=skipped)


def load_stage1(ckpt_path: str | Path, cfg: RunConfig) -> tuple[ParamStore, tk.VisualCodebook | None]:
    """Rebuild a backbone store (plus codebook) from a stage-1 checkpoint."""
    arrays = load_checkpoint(ckpt_path)
    continuous = cfg.seq.front_end == "continuous"
    store = bb.init_backbone_params(cfg.model, np.random.default_rng(cfg.seed_model),
                                    continuous=continuous)
    if continuous and any(k.startswith("denoiser.") for k in arrays):
        df.init_denoiser_params(store, np.random.default_rng(cfg.seed_model),
                                cond_dim=cfg.model.d_model)
    codebook = None
    if CODEBOOK_KEY in arrays:
        codebook = tk.VisualCodebook(centroids=arrays.pop(CODEBOOK_KEY).astype(np.float64),
                                     seed=cfg.codebook_seed, inertia=float("nan"))
    store.load_arrays(arrays, strict=False)
    return store, codebook


def stage2_decoder_loss(seq_prefix: bb.TokenSequence, prev_ids: np.ndarray,
                        record: SceneRecord, store: ParamStore, cfg: RunConfig,
                        tokenizer: tk.ActionTokenizer, rng_noise: np.random.Generator):
    kind = cfg.expert.decoder
    if kind == "query":
        pred = ax.query_expert_decode(seq_prefix, prev_ids, store, cfg.model, cfg.expert)
        target = constant(np.asarray(record.expert_traj), dtype=pred.dtype)
        return l1(pred, target)
    if kind == "autoregressive":
        target_ids = tokenizer.tokenize(record.expert_traj)
        return ax.ar_expert_loss(seq_prefix, prev_ids, target_ids, store,
                                 cfg.model, cfg.expert)
    if kind == "flow":
        return ax.flow_expert_loss(seq_prefix, prev_ids, record.expert_traj, store,
                                   cfg.model, cfg.expert, rng_noise)
    raise ValueError(f"unknown decoder kind {kind!r}")


def train_stage2(records: list[SceneRecord], cfg: RunConfig,
                 stage1_ckpt: str | Path,
                 out_dir: str | Path | None = None) -> TrainResult:
    """Expert training on 2VA context, supervised only by the decoder loss."""
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    tokenizer = tk.ActionTokenizer(gamma=cfg.gamma)
    store, codebook = load_stage1(stage1_ckpt, cfg)
    if cfg.seq.front_end == "discrete" and codebook is None:
        raise ValueError("stage-1 checkpoint carries no codebook")
    ax.init_expert_params(store, cfg.model, cfg.expert,
                          np.random.default_rng([cfg.seed_model, 1]))
    clips = records_by_clip(records)
    samples = _valid_samples(clips, cfg.seq, need_future=False)
    rng_data = np.random.default_rng(cfg.seed_data)
    rng_noise = np.random.default_rng(cfg.seed_noise)

    trainable = ([n for n in store.names() if n.startswith("expert.")]
                 if cfg.freeze_backbone else store.names())
    opt = OptimizerState.for_store(store, cfg.adamw, names=trainable)

    rows: list[dict] = []
    ckpt_path = out_dir / "checkpoint.ckpt" if out_dir is not None else None
    for step in range(1, cfg.steps + 1):
        lr = cosine_lr(step, cfg.warmup_steps, cfg.steps, cfg.peak_lr,
                       cfg.lr_floor_frac)
        store.zero_grads()
        batch = [samples[int(rng_data.integers(len(samples)))]
                 for _ in range(cfg.batch_size)]
        losses = []
        try:
            for cid, t in batch:
                clip = clips[cid]
                seq = build_training_sequence(clip, t, cfg.seq, tokenizer, codebook)
                prefix = seq.prefix(seq.input_length)
                prev_ids = tokenizer.tokenize(clip[t - 1].expert_traj)
                with Tape() as tape:
                    loss = stage2_decoder_loss(prefix, prev_ids, clip[t], store, cfg,
                                               tokenizer, rng_noise)
                    tape.backward(scale(loss, 1.0 / cfg.batch_size))
                losses.append(loss.item())
        except ValueError as exc:
            if "non-finite" not in str(exc):
                raise
            if out_dir is not None:
                _save(store, codebook, ckpt_path)
                _write_log(out_dir / "loss_log.csv", rows)
            raise NumericFailure(f"non-finite activations at step {step}") from exc
        mean_loss = float(np.mean(losses))
        report = adamw_step(store, opt, lr)
        rows.append({"step": step, "lr": f"{lr:.8g}",
                     "loss_total": f"{mean_loss:.8f}",
                     "loss_action": f"{mean_loss:.8f}", "loss_wm": "n/a",
                     "grad_norm": f"{report.grad_norm:.8f}"})
        if not math.isfinite(mean_loss):
            if out_dir is not None:
                _save(store, codebook, ckpt_path)
                _write_log(out_dir / "loss_log.csv", rows)
            raise NumericFailure(f"loss diverged at step {step}")
    if out_dir is not None:
        _save(store, codebook, ckpt_path)
        _write_log(out_dir / "loss_log.csv", rows)
    return TrainResult(store=store, codebook=codebook, log_rows=rows,
                       checkpoint_path=ckpt_path)


# ---------------------------------------------------------------------------
# evaluation


def predict_trajectory(clip: list[SceneRecord], t: int, store: ParamStore,
                       cfg: RunConfig, tokenizer: tk.ActionTokenizer,
                       codebook: tk.VisualCodebook | None,
                       sample_seed: int = 0) -> np.ndarray:
    """Greedy decode (stage 1) or expert decode (stage 2) for one frame."""
    seq = build_training_sequence(clip, t, cfg.seq, tokenizer, codebook)
    if cfg.stage == 1:
        ids = bb.generate_action_tokens(seq, store, cfg.model)
        return tokenizer.detokenize(ids)
    prefix = seq.prefix(seq.input_length)
    prev_ids = tokenizer.tokenize(clip[t - 1].expert_traj)
    kind = cfg.expert.decoder
    if kind == "query":
        return ax.query_expert_decode(prefix, prev_ids, store, cfg.model,
                                      cfg.expert).values.astype(np.float64)
    if kind == "autoregressive":
        ids = ax.ar_expert_decode(prefix, prev_ids, store, cfg.model, cfg.expert)
        return tokenizer.detokenize(ids)
    if kind == "flow":
        return ax.flow_expert_sample(prefix, prev_ids, store, cfg.model,
                                     cfg.expert, seed=sample_seed)
    raise ValueError(f"unknown decoder kind {kind!r}")


def evaluate_model(records: list[SceneRecord], store: ParamStore, cfg: RunConfig,
                   codebook: tk.VisualCodebook | None, n_eval: int = 100,
                   seed: int = 1234) -> list[mt.ScenarioResult]:
    """Score model plans on a deterministic subset of eval frames."""
    tokenizer = tk.ActionTokenizer(gamma=cfg.gamma)
    clips = records_by_clip(records)
    samples = _valid_samples(clips, cfg.seq, need_future=False)
    rng = np.random.default_rng(seed)
    if len(samples) > n_eval:
        pick = rng.choice(len(samples), size=n_eval, replace=False)
        samples = [samples[i] for i in sorted(pick)]
    results = []
    for cid, t in samples:
        clip = clips[cid]
        pred = predict_trajectory(clip, t, store, cfg, tokenizer, codebook,
                                  sample_seed=int(rng.integers(2**31)))
        rec = clip[t]
        results.append(mt.ScenarioResult(
            scenario_id=f"{cid}:{t}", ade_m=mt.ade(pred, rec.expert_traj),
            scores=mt.score_scenario(pred, rec)))
    return results
