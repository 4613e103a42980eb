"""Wall-clock latency comparison of the action decoding paths.

Measures full-backbone AR generation (12 tokens) against the expert
decoders on the same 2VA context. No KV caching anywhere: every generated
token pays a full forward pass, so AR cost grows with token count while
query (one pass) and flow (10 passes) stay constant. Results are medians
over repeats with warmup iterations excluded, reported as absolute times
and ratios to the full-backbone path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import action_expert as ax
from . import backbone as bb
from . import tokenizers as tk
from . import training as tr
from .dataset import SceneRecord, records_by_clip
from .params import ParamStore


@dataclass
class LatencyReport:
    medians_s: dict[str, float]
    ratios: dict[str, float]
    ar_token_counts: list[int]
    ar_times_s: list[float]
    ar_fit_r2: float
    ar_fit_slope: float

    def rows(self) -> list[dict]:
        out = [{"path": k, "median_s": f"{v:.6f}",
                "ratio_to_backbone": f"{self.ratios[k]:.4f}"}
               for k, v in self.medians_s.items()]
        for n, t in zip(self.ar_token_counts, self.ar_times_s):
            out.append({"path": f"expert_ar_L{n}", "median_s": f"{t:.6f}",
                        "ratio_to_backbone": ""})
        return out


def _median_time(fn, repeats: int, warmup: int) -> float:
    times = []
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt)
    return float(np.median(times))


def linear_fit_r2(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope and R^2 of y against x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    pred = a @ coef
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return float(coef[0]), 1.0 - ss_res / ss_tot


def latency_bench(records: list[SceneRecord], store: ParamStore,
                  codebook: tk.VisualCodebook | None, cfg: tr.RunConfig,
                  repeats: int = 20, warmup: int = 5,
                  token_counts: tuple[int, ...] = (4, 8, 12, 16)) -> LatencyReport:
    """Time the four decoding paths on one representative context."""
    tokenizer = tk.ActionTokenizer(gamma=cfg.gamma)
    clips = records_by_clip(records)
    clip = next(iter(clips.values()))
    t = cfg.seq.min_frame_index()
    seq = tr.build_training_sequence(clip, t, cfg.seq, tokenizer, codebook)
    prefix = seq.prefix(seq.input_length)
    prev_ids = tokenizer.tokenize(clip[t - 1].expert_traj)

    medians = {
        "full_backbone_ar": _median_time(
            lambda: bb.generate_action_tokens(seq, store, cfg.model),
            repeats, warmup),
        "expert_ar": _median_time(
            lambda: ax.ar_expert_decode(prefix, prev_ids, store, cfg.model,
                                        cfg.expert),
            repeats, warmup),
        "expert_query": _median_time(
            lambda: ax.query_expert_decode(prefix, prev_ids, store, cfg.model,
                                           cfg.expert),
            repeats, warmup),
        "expert_flow": _median_time(
            lambda: ax.flow_expert_sample(prefix, prev_ids, store, cfg.model,
                                          cfg.expert, seed=0),
            repeats, warmup),
    }
    base = medians["full_backbone_ar"]
    ratios = {k: v / base for k, v in medians.items()}

    ar_times = [_median_time(
        lambda n=n: ax.ar_expert_decode(prefix, prev_ids, store, cfg.model,
                                        cfg.expert, n_tokens=n),
        max(3, repeats // 2), warmup) for n in token_counts]
    slope, r2 = linear_fit_r2(np.array(token_counts), np.array(ar_times))
    return LatencyReport(medians_s=medians, ratios=ratios,
                         ar_token_counts=list(token_counts), ar_times_s=ar_times,
                         ar_fit_r2=r2, ar_fit_slope=slope)
