"""AdamW with decoupled weight decay and the warmup-cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class OptimizerState:
    """Per-parameter first/second moment accumulators plus step counter."""

    config: AdamWConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    skipped_steps: int = 0

    @staticmethod
    def for_store(store: ParamStore, config: AdamWConfig | None = None,
                  names: list[str] | None = None) -> "OptimizerState":
        """Moment buffers for all parameters, or a trainable subset."""
        cfg = config or AdamWConfig()
        state = OptimizerState(config=cfg)
        wanted = store.names() if names is None else names
        for name in wanted:
            t = store[name]
            state.m[name] = np.zeros_like(t.values)
            state.v[name] = np.zeros_like(t.values)
        return state


@dataclass
class StepReport:
    applied: bool
    grad_norm: float


def global_grad_norm(store: ParamStore) -> float:
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def adamw_step(store: ParamStore, state: OptimizerState, lr: float) -> StepReport:
    """One AdamW update over the parameters the state tracks.

    Non-finite gradients skip the whole step and report it.
    """
    missing = [n for n in state.m if n not in store]
    if missing:
        raise ValueError(f"optimizer state tracks unknown parameters: {missing[:3]}")
    norm = global_grad_norm(store)
    if not math.isfinite(norm):
        state.skipped_steps += 1
        return StepReport(applied=False, grad_norm=norm)

    cfg = state.config
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name in state.m:
        p = store[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.values)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.values = p.values - p.values.dtype.type(lr) * (
            update + cfg.weight_decay * p.values
        ).astype(p.values.dtype)
    return StepReport(applied=True, grad_norm=norm)


def cosine_lr(step: int, warmup_steps: int, total_steps: int, peak: float,
              floor_frac: float = 0.1) -> float:
    """Linear warmup to `peak`, then cosine decay to `floor_frac * peak`."""
    if total_steps <= warmup_steps:
        raise ValueError(f"total_steps ({total_steps}) must exceed warmup_steps ({warmup_steps})")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step <= warmup_steps:
        return peak * (step / warmup_steps) if warmup_steps > 0 else peak
    floor = floor_frac * peak
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))
