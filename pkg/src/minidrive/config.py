"""Plain-text dotted-key configuration.

One `section.key=value` per line, UTF-8, `#` comments. Every tunable
module default is surfaced here; unknown keys are rejected and the
effective configuration is echoed verbatim into each run directory so any
run can be reproduced from its own artifacts.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from . import action_expert as ax
from . import backbone as bb
from . import diffusion as df
from . import tokenizers as tk
from . import training as tr
from .dataset import DEFAULT_MIX
from .experiments import AblationSpec, SweepSpec
from .optim import AdamWConfig


class ConfigError(ValueError):
    pass


def _mix_to_str(mix: dict[str, float]) -> str:
    return ",".join(f"{k}:{v}" for k, v in mix.items())


DEFAULTS: dict[str, object] = {
    "model.d_model": 128,
    "model.n_layers": 4,
    "model.n_heads": 4,
    "model.head_dim": 32,
    "model.mlp_ratio": 4,
    "model.max_seq_len": 512,
    "seq.history": 6,
    "seq.interval_s": 1.0,
    "seq.front_end": "discrete",
    "seq.vision_only": False,
    "expert.d_expert": 64,
    "expert.decoder": "query",
    "expert.n_queries": 6,
    "expert.flow_steps": 10,
    "expert.max_expert_len": 32,
    "expert.backbone_to_expert": True,
    "train.stage": 1,
    "train.steps": 500,
    "train.batch_size": 4,
    "train.peak_lr": 2e-4,
    "train.warmup_steps": 100,
    "train.lr_floor_frac": 0.1,
    "train.alpha": 1.0,
    "train.beta": 1.0,
    "train.wm_enabled": True,
    "train.freeze_backbone": False,
    "opt.beta1": 0.9,
    "opt.beta2": 0.95,
    "opt.eps": 1e-8,
    "opt.weight_decay": 0.01,
    "seeds.model": 0,
    "seeds.data": 1,
    "seeds.noise": 2,
    "seeds.codebook": 7,
    "tokenizer.gamma": 4.0,
    "diffusion.steps": 100,
    "diffusion.beta_start": 1e-4,
    "diffusion.beta_end": 0.07,
    "data.n_frames": 1000,
    "data.seed": 0,
    "data.mix": _mix_to_str(DEFAULT_MIX),
    "eval.n_eval": 100,
    "eval.seed": 1234,
    "sweep.sizes": "1000,10000,50000",
    "sweep.seeds": "0,1,2",
    "sweep.front_ends": "discrete,continuous",
    "sweep.steps": 300,
    "sweep.batch_size": 4,
    "sweep.history": 2,
    "sweep.n_eval": 100,
    "sweep.eval_frames": 480,
    "sweep.data_seed_base": 1000,
    "sweep.eval_seed": 999,
    "sweep.workers": 1,
    "ablate.families": "seq_design,seq_length,interval",
    "ablate.seeds": "0",
    "ablate.pretrain_steps": 300,
    "ablate.finetune_steps": 150,
    "ablate.batch_size": 4,
    "ablate.pretrain_frames": 2000,
    "ablate.finetune_frames": 800,
    "ablate.eval_frames": 480,
    "ablate.n_eval": 100,
    "latency.repeats": 20,
    "latency.warmup": 5,
}


def _parse_value(key: str, raw: str) -> object:
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    return raw


class Config:
    """Effective key-value configuration with typed access."""

    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v if not isinstance(v, str) else _parse_value(k, v))

    def set(self, key: str, value: object) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key: {key!r}")
        self.values[key] = value

    def set_raw(self, key: str, raw: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key: {key!r}")
        self.values[key] = _parse_value(key, raw)

    def __getitem__(self, key: str):
        return self.values[key]

    def int_list(self, key: str) -> list[int]:
        raw = str(self.values[key])
        return [int(x) for x in raw.split(",") if x.strip()]

    def str_list(self, key: str) -> list[str]:
        raw = str(self.values[key])
        return [x.strip() for x in raw.split(",") if x.strip()]

    def mix(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for part in str(self.values["data.mix"]).split(","):
            if not part.strip():
                continue
            try:
                name, frac = part.split(":")
                out[name.strip()] = float(frac)
            except ValueError as exc:
                raise ConfigError(f"data.mix: bad entry {part!r}") from exc
        return out

    def echo(self) -> str:
        return "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values)) + "\n"

    # ---- typed bundles ------------------------------------------------

    def model_config(self) -> bb.ModelConfig:
        return bb.ModelConfig(
            d_model=self["model.d_model"], n_layers=self["model.n_layers"],
            n_heads=self["model.n_heads"], head_dim=self["model.head_dim"],
            mlp_ratio=self["model.mlp_ratio"], max_seq_len=self["model.max_seq_len"])

    def seq_config(self) -> bb.SequenceConfig:
        return bb.SequenceConfig(
            history=self["seq.history"], interval_s=self["seq.interval_s"],
            front_end=self["seq.front_end"], vision_only=self["seq.vision_only"])

    def expert_config(self) -> ax.ExpertConfig:
        return ax.ExpertConfig(
            d_expert=self["expert.d_expert"], decoder=self["expert.decoder"],
            n_queries=self["expert.n_queries"], flow_steps=self["expert.flow_steps"],
            max_expert_len=self["expert.max_expert_len"],
            backbone_to_expert=self["expert.backbone_to_expert"])

    def run_config(self) -> tr.RunConfig:
        return tr.RunConfig(
            stage=self["train.stage"], model=self.model_config(),
            seq=self.seq_config(), expert=self.expert_config(),
            steps=self["train.steps"], batch_size=self["train.batch_size"],
            peak_lr=self["train.peak_lr"], warmup_steps=self["train.warmup_steps"],
            lr_floor_frac=self["train.lr_floor_frac"],
            adamw=AdamWConfig(beta1=self["opt.beta1"], beta2=self["opt.beta2"],
                              eps=self["opt.eps"],
                              weight_decay=self["opt.weight_decay"]),
            alpha=self["train.alpha"], beta=self["train.beta"],
            wm_enabled=self["train.wm_enabled"], gamma=self["tokenizer.gamma"],
            freeze_backbone=self["train.freeze_backbone"],
            seed_model=self["seeds.model"], seed_data=self["seeds.data"],
            seed_noise=self["seeds.noise"], codebook_seed=self["seeds.codebook"],
            schedule=df.NoiseSchedule(steps=self["diffusion.steps"],
                                      beta_start=self["diffusion.beta_start"],
                                      beta_end=self["diffusion.beta_end"]))

    def sweep_spec(self) -> SweepSpec:
        return SweepSpec(
            sizes=self.int_list("sweep.sizes"), seeds=self.int_list("sweep.seeds"),
            front_ends=self.str_list("sweep.front_ends"),
            steps=self["sweep.steps"], batch_size=self["sweep.batch_size"],
            history=self["sweep.history"], n_eval=self["sweep.n_eval"],
            eval_frames=self["sweep.eval_frames"],
            data_seed_base=self["sweep.data_seed_base"],
            eval_seed=self["sweep.eval_seed"], workers=self["sweep.workers"])

    def ablation_spec(self) -> AblationSpec:
        return AblationSpec(
            families=self.str_list("ablate.families"),
            seeds=self.int_list("ablate.seeds"),
            pretrain_steps=self["ablate.pretrain_steps"],
            finetune_steps=self["ablate.finetune_steps"],
            batch_size=self["ablate.batch_size"],
            pretrain_frames=self["ablate.pretrain_frames"],
            finetune_frames=self["ablate.finetune_frames"],
            eval_frames=self["ablate.eval_frames"], n_eval=self["ablate.n_eval"],
            eval_seed=self["eval.seed"])


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> Config:
    """Config file plus repeated `key=value` overrides."""
    cfg = Config()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            cfg.set_raw(key.strip(), raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        cfg.set_raw(key.strip(), raw)
    return cfg
