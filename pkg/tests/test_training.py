import csv
import hashlib

import numpy as np
import pytest

from minidrive import action_expert as ax
from minidrive import backbone as bb
from minidrive import training as tr
from minidrive.autodiff import Tape, scale
from minidrive.tokenizers import ActionTokenizer


def tiny_cfg(**kw):
    defaults = dict(
        stage=1, steps=4, batch_size=2, warmup_steps=1, peak_lr=1e-3,
        model=bb.ModelConfig(d_model=32, n_layers=2, n_heads=2, head_dim=16),
        seq=bb.SequenceConfig(history=2))
    defaults.update(kw)
    return tr.RunConfig(**defaults)


def log_floats(rows, key):
    return [float(r[key]) for r in rows if r[key] != "n/a"]


def test_stage1_deterministic_logs(small_records):
    a = tr.train_stage1(small_records, tiny_cfg())
    b = tr.train_stage1(small_records, tiny_cfg())
    assert a.log_rows == b.log_rows


def test_stage1_seed_changes_logs(small_records):
    a = tr.train_stage1(small_records, tiny_cfg())
    b = tr.train_stage1(small_records, tiny_cfg(seed_data=99))
    assert a.log_rows != b.log_rows


def test_alpha_zero_disables_wm_column(small_records):
    res = tr.train_stage1(small_records, tiny_cfg(alpha=0.0))
    assert all(r["loss_wm"] == "n/a" for r in res.log_rows)
    assert all(r["loss_action"] != "n/a" for r in res.log_rows)


def test_loss_component_accounting(small_records):
    alpha = 0.6
    res = tr.train_stage1(small_records, tiny_cfg(alpha=alpha))
    for row in res.log_rows:
        total = float(row["loss_total"])
        parts = float(row["loss_action"]) + alpha * float(row["loss_wm"])
        assert abs(total - parts) < 1e-6


def test_stage1_writes_run_artifacts(small_records, tmp_path):
    out = tmp_path / "run"
    res = tr.train_stage1(small_records, tiny_cfg(), out_dir=out)
    assert (out / "checkpoint.ckpt").exists()
    rows = list(csv.DictReader((out / "loss_log.csv").open()))
    assert len(rows) == 4
    assert list(rows[0]) == ["step", "lr", "loss_total", "loss_action",
                             "loss_wm", "grad_norm"]


def test_stage1_continuous_runs_and_skips_last_frames(small_records):
    cfg = tiny_cfg(seq=bb.SequenceConfig(history=2, front_end="continuous"),
                   steps=3)
    res = tr.train_stage1(small_records, cfg)
    assert all(r["loss_wm"] != "n/a" for r in res.log_rows)


def test_vision_only_trains_wm_only(small_records):
    cfg = tiny_cfg(seq=bb.SequenceConfig(history=2, vision_only=True), steps=3)
    res = tr.train_stage1(small_records, cfg)
    assert all(r["loss_action"] == "n/a" for r in res.log_rows)
    assert all(r["loss_wm"] != "n/a" for r in res.log_rows)


def test_stage2_requires_codebook_for_discrete(small_records, tmp_path):
    cfg = tiny_cfg(seq=bb.SequenceConfig(history=2, front_end="continuous"),
                   steps=2)
    res = tr.train_stage1(small_records, cfg, out_dir=tmp_path / "s1")
    cfg2 = tiny_cfg(stage=2, steps=2)
    with pytest.raises(ValueError, match="codebook"):
        tr.train_stage2(small_records, cfg2, res.checkpoint_path)


@pytest.fixture(scope="module")
def stage1_ckpt(small_records, tmp_path_factory):
    out = tmp_path_factory.mktemp("stage1")
    res = tr.train_stage1(small_records, tiny_cfg(steps=3), out_dir=out)
    return res.checkpoint_path


@pytest.mark.parametrize("decoder", ["query", "autoregressive", "flow"])
def test_stage2_decoders_train_and_log(small_records, stage1_ckpt, decoder):
    cfg = tiny_cfg(stage=2, steps=3,
                   expert=ax.ExpertConfig(d_expert=16, decoder=decoder))
    res = tr.train_stage2(small_records, cfg, stage1_ckpt)
    assert len(res.log_rows) == 3
    assert all(np.isfinite(float(r["loss_total"])) for r in res.log_rows)


def test_stage2_backbone_gets_gradients_by_default(small_records, stage1_ckpt):
    cfg = tiny_cfg(stage=2, steps=1,
                   expert=ax.ExpertConfig(d_expert=16, decoder="query"))
    store, codebook = tr.load_stage1(stage1_ckpt, cfg)
    ax.init_expert_params(store, cfg.model, cfg.expert,
                          np.random.default_rng(1))
    tokenizer = ActionTokenizer(gamma=cfg.gamma)
    from minidrive.dataset import records_by_clip
    clips = records_by_clip(small_records)
    cid = next(iter(clips))
    t = cfg.seq.min_frame_index()
    seq = tr.build_training_sequence(clips[cid], t, cfg.seq, tokenizer, codebook)
    prefix = seq.prefix(seq.input_length)
    prev_ids = tokenizer.tokenize(clips[cid][t - 1].expert_traj)
    with Tape() as tape:
        loss = tr.stage2_decoder_loss(prefix, prev_ids, clips[cid][t], store,
                                      cfg, tokenizer, np.random.default_rng(2))
        tape.backward(loss)
    bb_grads = [store[n].grad for n in store.names()
                if not n.startswith("expert.") and store[n].grad is not None]
    assert any(np.abs(g).max() > 0 for g in bb_grads)


def test_stage2_freeze_keeps_backbone_hashes(small_records, stage1_ckpt):
    cfg = tiny_cfg(stage=2, steps=3, freeze_backbone=True,
                   expert=ax.ExpertConfig(d_expert=16, decoder="query"))
    res = tr.train_stage2(small_records, cfg, stage1_ckpt)
    from minidrive.checkpoint import load_checkpoint
    before = load_checkpoint(stage1_ckpt)
    for name, arr in before.items():
        if name == tr.CODEBOOK_KEY or name.startswith("expert."):
            continue
        after = res.store[name].values
        h1 = hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4")).hexdigest()
        h2 = hashlib.sha256(np.ascontiguousarray(after, dtype="<f4")).hexdigest()
        assert h1 == h2, f"frozen backbone parameter {name} changed"


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_divergence_aborts_with_checkpoint(small_records, tmp_path):
    out = tmp_path / "diverge"
    cfg = tiny_cfg(steps=30, peak_lr=1e9, warmup_steps=1)
    with pytest.raises(tr.NumericFailure):
        tr.train_stage1(small_records, cfg, out_dir=out)
    assert (out / "checkpoint.ckpt").exists()
    assert (out / "loss_log.csv").exists()


def test_evaluate_model_deterministic(small_records):
    cfg = tiny_cfg(steps=2)
    res = tr.train_stage1(small_records, cfg)
    a = tr.evaluate_model(small_records, res.store, cfg, res.codebook, n_eval=6)
    b = tr.evaluate_model(small_records, res.store, cfg, res.codebook, n_eval=6)
    assert [(r.scenario_id, r.ade_m) for r in a] == \
           [(r.scenario_id, r.ade_m) for r in b]


def test_history_too_long_for_clip_rejected(small_records):
    cfg = tiny_cfg(seq=bb.SequenceConfig(history=6, interval_s=4.0))
    with pytest.raises(ValueError, match="support"):
        tr.train_stage1(small_records, cfg)
