import numpy as np
import pytest

from minidrive import autodiff as ad
from minidrive import backbone as bb
from minidrive import dataset as ds
from minidrive import tokenizers as tk
from conftest import swap_params_f


def clip_of(records, which=0):
    cid = sorted({r.clip_id for r in records})[which]
    return [r for r in records if r.clip_id == cid]


def make_seq(records, codebook, tokenizer, history=2, **kw):
    cfg = bb.SequenceConfig(history=history, **kw)
    clip = clip_of(records)
    fpi = cfg.frames_per_interval()
    t = cfg.min_frame_index()
    idx = [t - (history - 1 - i) * fpi for i in range(history)]
    return bb.build_sequence([clip[i] for i in idx], [clip[i - 1] for i in idx],
                             cfg, tokenizer, codebook)


# ---------------------------------------------------------------------------
# sequence building


def test_h1_sequence_length_arithmetic(small_records, small_codebook, tokenizer):
    seq = make_seq(small_records, small_codebook, tokenizer, history=1)
    # BOS + (L, BOV, 64 V, BOA, 12 A) + trailing BOA + 12 targets
    assert seq.input_length == 1 + 79
    assert len(seq) == 1 + 79 + 13


def test_sequence_deterministic(small_records, small_codebook, tokenizer):
    a = make_seq(small_records, small_codebook, tokenizer)
    b = make_seq(small_records, small_codebook, tokenizer)
    assert np.array_equal(a.ids, b.ids)
    assert np.array_equal(a.tags, b.tags)
    assert np.array_equal(a.targets, b.targets)


def test_modality_tag_histogram(small_records, small_codebook, tokenizer):
    h = 2
    seq = make_seq(small_records, small_codebook, tokenizer, history=h)
    chunk_tags = seq.tags[:seq.input_length]
    assert (chunk_tags == tk.MODALITY_LANG).sum() == h
    assert (chunk_tags == tk.MODALITY_VISUAL).sum() == 64 * h
    assert (chunk_tags == tk.MODALITY_ACTION).sum() == 12 * h
    # continuation adds 12 more action-tagged positions
    assert (seq.tags == tk.MODALITY_ACTION).sum() == 12 * h + 12


def test_masks_disjoint_and_sized(small_records, small_codebook, tokenizer):
    seq = make_seq(small_records, small_codebook, tokenizer)
    assert seq.action_mask.sum() == 12
    assert seq.wm_mask.sum() == 64
    assert np.all(seq.action_mask * seq.wm_mask == 0)


def test_bad_spacing_rejected(small_records, small_codebook, tokenizer):
    cfg = bb.SequenceConfig(history=2)
    clip = clip_of(small_records)
    with pytest.raises(ValueError, match="spaced"):
        bb.build_sequence([clip[3], clip[6]], [clip[2], clip[5]], cfg,
                          tokenizer, small_codebook)


def test_unrepresentable_interval_rejected():
    with pytest.raises(ValueError, match="not representable"):
        bb.SequenceConfig(history=2, interval_s=0.3).frames_per_interval()


def test_mixed_clips_rejected(small_records, small_codebook, tokenizer):
    cfg = bb.SequenceConfig(history=2)
    c0, c1 = clip_of(small_records, 0), clip_of(small_records, 1)
    with pytest.raises(ValueError, match="clip"):
        bb.build_sequence([c0[3], c1[5]], [c0[2], c1[4]], cfg, tokenizer,
                          small_codebook)


def test_vision_only_has_no_action_tags(small_records, small_codebook, tokenizer):
    seq = make_seq(small_records, small_codebook, tokenizer, history=2,
                   vision_only=True)
    assert (seq.tags == tk.MODALITY_ACTION).sum() == 0
    assert (seq.tags == tk.MODALITY_LANG).sum() == 0
    assert seq.action_mask.sum() == 0
    assert seq.wm_mask.sum() == 64
    assert len(seq) == seq.input_length


def test_continuous_front_end_carries_patches(small_records, tokenizer):
    seq = make_seq(small_records, None, tokenizer, history=2,
                   front_end="continuous")
    assert seq.patch_feats.shape == (2, 64, 48)
    assert seq.wm_mask.sum() == 0


# ---------------------------------------------------------------------------
# forward pass


def test_zero_head_uniform_distribution(seq_2va, tiny_model_cfg):
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(0))
    out = bb.forward(seq_2va, store, tiny_model_cfg)
    loss = bb.loss_action(out)
    assert abs(loss.item() - np.log(tk.VOCAB_SIZE)) < 1e-3


def test_causality_by_perturbation(seq_2va, tiny_model_cfg):
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(0))
    # the head starts at zero (uniform logits); give it signal so logits see
    # the perturbation at all
    store["head.w"].values = np.random.default_rng(1).normal(
        0, 0.05, store["head.w"].shape).astype(np.float32)
    base = bb.forward(seq_2va, store, tiny_model_cfg)
    rng = np.random.default_rng(2)
    t = len(seq_2va)
    for p in rng.choice(np.arange(2, t), size=20, replace=False):
        mutated = seq_2va.prefix(t)
        mutated.ids[p] = (mutated.ids[p] + 7) % tk.VOCAB_SIZE
        out = bb.forward(mutated, store, tiny_model_cfg)
        assert np.array_equal(out.logits.values[:p], base.logits.values[:p]), \
            f"position {p} leaked backward"
        assert np.array_equal(out.hidden.values[:p], base.hidden.values[:p])
        assert not np.array_equal(out.hidden.values[p:], base.hidden.values[p:])


def test_sequence_length_cap(small_records, small_codebook, tokenizer):
    cfg = bb.ModelConfig(d_model=32, n_layers=1, n_heads=2, head_dim=16,
                         max_seq_len=64)
    store = bb.init_backbone_params(cfg, np.random.default_rng(0))
    seq = make_seq(small_records, small_codebook, tokenizer, history=1)
    with pytest.raises(ValueError, match="exceeds max"):
        bb.forward(seq, store, cfg)


def test_backbone_gradient_check_miniature(small_records, small_codebook, tokenizer):
    """Finite differences through the full transformer loss on a 2-layer model."""
    from conftest import dtype_twin_stores
    cfg = bb.ModelConfig(d_model=8, n_layers=2, n_heads=2, head_dim=4)
    seq = make_seq(small_records, small_codebook, tokenizer, history=1)

    def build_store():
        store = bb.init_backbone_params(cfg, np.random.default_rng(0))
        # zero head would zero most gradients; give it signal
        store["head.w"].values = np.random.default_rng(1).normal(
            0, 0.02, store["head.w"].shape).astype(np.float32)
        return store

    stores = dtype_twin_stores(build_store)

    def build_loss(store):
        out = bb.forward(seq, store, cfg)
        return ad.add(bb.loss_action(out), bb.loss_wm_ar(out))

    names = ["layer0.attn.bq", "layer1.mlp.b2", "ln_f.g", "seg_emb",
             "layer0.ln1.b", "layer1.attn.wo"]
    f = swap_params_f(stores, names, build_loss)
    for dtype, tol in ((np.float32, 1e-4), (np.float64, 1e-6)):
        base = stores[np.dtype(dtype).name]
        inputs = [ad.parameter(base[n].values.copy(), dtype=dtype) for n in names]
        report = ad.gradient_check(f, inputs, tol=tol)
        assert report.passed, f"{dtype}: max rel err {report.max_rel_error}"


# ---------------------------------------------------------------------------
# losses


def test_loss_action_matches_manual_summation(seq_2va, tiny_model_cfg):
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(2))
    store["head.w"].values = np.random.default_rng(3).normal(
        0, 0.05, store["head.w"].shape).astype(np.float32)
    out = bb.forward(seq_2va, store, tiny_model_cfg)
    loss = bb.loss_action(out).item()

    logits = out.logits.values.astype(np.float64)
    total = 0.0
    positions = np.flatnonzero(seq_2va.action_mask)
    for p in positions:
        row = logits[p] - logits[p].max()
        logp = row - np.log(np.exp(row).sum())
        total -= logp[seq_2va.targets[p]]
    assert abs(loss - total / len(positions)) < 1e-6


def test_wm_loss_rejects_continuous(small_records, tokenizer, tiny_model_cfg):
    seq = make_seq(small_records, None, tokenizer, history=1,
                   front_end="continuous")
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(0),
                                    continuous=True)
    out = bb.forward(seq, store, tiny_model_cfg)
    with pytest.raises(ValueError, match="discrete front end"):
        bb.loss_wm_ar(out)


def test_wm_loss_requires_masked_positions(seq_2va, tiny_model_cfg):
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(0))
    out = bb.forward(seq_2va, store, tiny_model_cfg)
    stripped = seq_2va.prefix(len(seq_2va))  # prefix() zeroes all masks
    out.seq = stripped
    with pytest.raises(ValueError, match="target positions|no positions"):
        bb.loss_wm_ar(out)


def test_joint_loss_additivity(seq_2va, tiny_model_cfg):
    alpha = 0.7
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(4))
    out = bb.forward(seq_2va, store, tiny_model_cfg)
    la = bb.loss_action(out).item()
    lw = bb.loss_wm_ar(out).item()
    total = ad.add(bb.loss_action(out),
                   ad.scale(bb.loss_wm_ar(out), alpha)).item()
    assert abs(total - (la + alpha * lw)) < 1e-6


def test_action_loss_gradient_reaches_final_chunk_visual_tokens(
        seq_2va, tiny_model_cfg):
    """Supervision flows from action targets into visual context only via
    attention: embeddings of the newest chunk's visual tokens get gradient,
    and blocking attention from the prediction positions to those tokens
    changes the loss."""
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(5))
    store["head.w"].values = np.random.default_rng(6).normal(
        0, 0.05, store["head.w"].shape).astype(np.float32)
    with ad.Tape() as tape:
        out = bb.forward(seq_2va, store, tiny_model_cfg)
        la = bb.loss_action(out)
        tape.backward(la)
    vis_ids = seq_2va.ids[seq_2va.vis_starts[-1]:seq_2va.vis_starts[-1] + 64]
    grad_rows = store["tok_emb"].grad[np.unique(vis_ids)]
    assert np.abs(grad_rows).max() > 0

    t = len(seq_2va)
    block = np.zeros((t, t), dtype=np.float32)
    pred_positions = np.flatnonzero(seq_2va.action_mask)
    vis_positions = np.arange(seq_2va.vis_starts[-1], seq_2va.vis_starts[-1] + 64)
    block[np.ix_(pred_positions, vis_positions)] = bb.NEG_INF
    out_blocked = bb.forward(seq_2va, store, tiny_model_cfg, extra_mask=block)
    assert abs(bb.loss_action(out_blocked).item() - la.item()) > 1e-7


# ---------------------------------------------------------------------------
# generation


def test_greedy_generation_deterministic(seq_2va, tiny_model_cfg):
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(7))
    a = bb.generate_action_tokens(seq_2va, store, tiny_model_cfg)
    b = bb.generate_action_tokens(seq_2va, store, tiny_model_cfg)
    assert np.array_equal(a, b)
    assert len(a) == 12


def test_masked_decoding_stays_in_action_range(seq_2va, tiny_model_cfg):
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(8))
    rng = np.random.default_rng(9)
    for i in range(40):  # high-temperature stress
        ids = bb.generate_action_tokens(seq_2va, store, tiny_model_cfg,
                                        mode="sample", temperature=5.0, rng=rng)
        assert np.all((ids >= tk.ACTION_LO) & (ids < tk.BOS))


def test_temperature_zero_equals_greedy(seq_2va, tiny_model_cfg):
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(10))
    greedy = bb.generate_action_tokens(seq_2va, store, tiny_model_cfg)
    cold = bb.generate_action_tokens(seq_2va, store, tiny_model_cfg,
                                     mode="sample", temperature=0.0,
                                     rng=np.random.default_rng(0))
    assert np.array_equal(greedy, cold)


def test_visual_generation_seeded_and_in_range(seq_2va, tiny_model_cfg,
                                               small_codebook):
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(11))
    a = bb.generate_visual_tokens(seq_2va, store, tiny_model_cfg, seed=5)
    b = bb.generate_visual_tokens(seq_2va, store, tiny_model_cfg, seed=5)
    c = bb.generate_visual_tokens(seq_2va, store, tiny_model_cfg, seed=6)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.all((a >= tk.VISUAL_LO) & (a < tk.ACTION_LO))
    img = small_codebook.decode_tokens(a)
    assert img.dtype == np.uint8 and img.shape == (32, 32, 3)


def test_visual_generation_rejects_continuous(small_records, tokenizer,
                                              tiny_model_cfg):
    seq = make_seq(small_records, None, tokenizer, history=1,
                   front_end="continuous")
    store = bb.init_backbone_params(tiny_model_cfg, np.random.default_rng(0),
                                    continuous=True)
    with pytest.raises(ValueError, match="discrete"):
        bb.generate_visual_tokens(seq, store, tiny_model_cfg, seed=0)
