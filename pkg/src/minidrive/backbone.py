"""Causal transformer over the interleaved command/vision/action sequence.

Sequence layout for H history chunks (one chunk per timestep, newest last):

    BOS, { L_tau, BOV, V_tau x64, BOA, A_(tau-1) x12 } x H, BOA, A_t x12

Each chunk carries the command, the frame's visual tokens (or patch
features on the continuous front end) and the previous step's action
tokens. The trailing BOA opens the current action; its 12 teacher-forced
target tokens are the generation continuation, and the action loss is the
next-token cross entropy over exactly those 12 predictions. The
world-model loss is the next-token cross entropy over the newest chunk's
64 visual tokens (discrete front end only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tokenizers as tok
from .autodiff import (DiffTensor, Tape, add, concat, constant, cross_entropy,
                       embedding_lookup, gelu, layer_norm, matmul, mul, narrow,
                       reshape, scale, softmax_rows, transpose)
from .dataset import SceneRecord
from .params import ParamStore
from .tokenizers import (ACTION_LO, BOA, BOS, BOV, EOS, MODALITY_ACTION,
                         MODALITY_LANG, MODALITY_SPECIAL, MODALITY_VISUAL,
                         N_ACTION_TOKENS, N_VISUAL_TOKENS, VISUAL_LO,
                         VOCAB_SIZE, ActionTokenizer, VisualCodebook,
                         embed_patches_continuous)

NEG_INF = -1e9
CHUNK_LEN = 1 + 1 + N_VISUAL_TOKENS + 1 + N_ACTION_TOKENS   # 79


@dataclass
class SequenceConfig:
    history: int = 6                 # H chunks: 1 = VA, 2 = 2VA, 6 = 6VA
    interval_s: float = 1.0          # chunk spacing in seconds
    front_end: str = "discrete"      # "discrete" or "continuous"
    vision_only: bool = False        # 6V ablation: commands/actions padded out

    def frames_per_interval(self) -> int:
        if self.history == 1:
            return 1
        n = round(self.interval_s / 0.5)
        if n < 1 or abs(self.interval_s - 0.5 * n) > 1e-9:
            raise ValueError(f"interval {self.interval_s}s not representable at 2 Hz")
        return n

    def min_frame_index(self) -> int:
        """Earliest target frame usable in a clip (needs history + prev action)."""
        return (self.history - 1) * self.frames_per_interval() + 1


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 32
    mlp_ratio: int = 4
    max_seq_len: int = 512
    vocab: int = VOCAB_SIZE

    def __post_init__(self) -> None:
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim "
                f"({self.n_heads}x{self.head_dim})")


@dataclass
class TokenSequence:
    """Token ids plus bookkeeping for assembling inputs and loss masks."""

    ids: np.ndarray                       # [T] int64
    tags: np.ndarray                      # [T] modality per position
    chunk_index: np.ndarray               # [T] chunk of each position, -1 outside
    targets: np.ndarray                   # [T] next-token labels at masked positions
    action_mask: np.ndarray               # [T] 1 where the next token is an A_t target
    wm_mask: np.ndarray                   # [T] 1 where the next token is a current-frame visual token
    input_length: int                     # length of BOS + chunks (the S_t part)
    front_end: str
    patch_feats: np.ndarray | None = None  # [H, 64, 48] for the continuous front end
    vis_starts: list[int] = field(default_factory=list)   # start of each chunk's visual block
    act_starts: list[int] = field(default_factory=list)   # start of each chunk's action block
    cmd_positions: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def gen_prefix_len(self) -> int:
        """Length through the trailing BOA that opens action generation."""
        return self.input_length + 1

    def prefix(self, length: int) -> "TokenSequence":
        return TokenSequence(
            ids=self.ids[:length].copy(), tags=self.tags[:length].copy(),
            chunk_index=self.chunk_index[:length].copy(),
            targets=np.zeros(length, dtype=np.int64),
            action_mask=np.zeros(length, dtype=np.int64),
            wm_mask=np.zeros(length, dtype=np.int64),
            input_length=min(self.input_length, length),
            front_end=self.front_end, patch_feats=self.patch_feats,
            vis_starts=[s for s in self.vis_starts if s + N_VISUAL_TOKENS <= length],
            act_starts=[s for s in self.act_starts if s + N_ACTION_TOKENS <= length],
            cmd_positions=[p for p in self.cmd_positions if p < length])


def build_sequence(records: list[SceneRecord], prev_records: list[SceneRecord],
                   config: SequenceConfig, tokenizer: ActionTokenizer,
                   codebook: VisualCodebook | None = None) -> TokenSequence:
    """Assemble the training sequence for the newest record in `records`.

    `records` holds the H chunk frames (oldest first, same clip, spaced by
    the configured interval); `prev_records[i]` is the frame 0.5 s before
    `records[i]`, supplying that chunk's previous action.
    """
    h = config.history
    if len(records) != h or len(prev_records) != h:
        raise ValueError(f"need {h} chunk records plus previous frames, got "
                         f"{len(records)}/{len(prev_records)}")
    clip_ids = {r.clip_id for r in records} | {r.clip_id for r in prev_records}
    if len(clip_ids) != 1:
        raise ValueError("chunk records must share one clip")
    fpi = config.frames_per_interval()
    for a, b in zip(records[:-1], records[1:]):
        if b.frame_index - a.frame_index != fpi:
            raise ValueError(f"records spaced {b.frame_index - a.frame_index} frames, "
                             f"expected {fpi}")
    if config.front_end == "discrete" and codebook is None:
        raise ValueError("discrete front end requires a fitted codebook")

    ids: list[int] = [BOS]
    tags: list[int] = [MODALITY_SPECIAL]
    chunk_of: list[int] = [-1]
    vis_starts: list[int] = []
    act_starts: list[int] = []
    cmd_positions: list[int] = []
    patch_feats = (np.zeros((h, N_VISUAL_TOKENS, tok.PATCH_DIM))
                   if config.front_end == "continuous" else None)
    wm_span: tuple[int, int] | None = None
    wm_ids: np.ndarray | None = None

    for ci, (rec, prev) in enumerate(zip(records, prev_records)):
        cmd_positions.append(len(ids))
        ids.append(EOS if config.vision_only else int(rec.command))
        tags.append(MODALITY_SPECIAL if config.vision_only else MODALITY_LANG)
        chunk_of.append(ci)

        ids.append(BOV)
        tags.append(MODALITY_SPECIAL)
        chunk_of.append(ci)

        vis_starts.append(len(ids))
        if config.front_end == "discrete":
            vis_ids = codebook.encode_image(rec.image)
        else:
            vis_ids = np.full(N_VISUAL_TOKENS, BOV, dtype=np.int64)
            patch_feats[ci] = tok.image_to_patches(rec.image)
        if ci == h - 1 and config.front_end == "discrete":
            wm_span = (vis_starts[-1] - 1, N_VISUAL_TOKENS)  # predictions start at BOV
            wm_ids = vis_ids
        ids.extend(int(v) for v in vis_ids)
        tags.extend([MODALITY_VISUAL] * N_VISUAL_TOKENS)
        chunk_of.extend([ci] * N_VISUAL_TOKENS)

        ids.append(BOA)
        tags.append(MODALITY_SPECIAL)
        chunk_of.append(ci)

        act_starts.append(len(ids))
        if config.vision_only:
            ids.extend([EOS] * N_ACTION_TOKENS)
            tags.extend([MODALITY_SPECIAL] * N_ACTION_TOKENS)
        else:
            prev_ids = tokenizer.tokenize(prev.expert_traj)
            ids.extend(int(a) for a in prev_ids)
            tags.extend([MODALITY_ACTION] * N_ACTION_TOKENS)
        chunk_of.extend([ci] * N_ACTION_TOKENS)

    input_length = len(ids)
    target_ids = None
    if not config.vision_only:
        target_ids = tokenizer.tokenize(records[-1].expert_traj)
        ids.append(BOA)
        tags.append(MODALITY_SPECIAL)
        chunk_of.append(-1)
        ids.extend(int(a) for a in target_ids)
        tags.extend([MODALITY_ACTION] * N_ACTION_TOKENS)
        chunk_of.extend([-1] * N_ACTION_TOKENS)

    t_total = len(ids)
    targets = np.zeros(t_total, dtype=np.int64)
    action_mask = np.zeros(t_total, dtype=np.int64)
    wm_mask = np.zeros(t_total, dtype=np.int64)
    if target_ids is not None:
        start = input_length  # the trailing BOA predicts the first target token
        action_mask[start:start + N_ACTION_TOKENS] = 1
        targets[start:start + N_ACTION_TOKENS] = target_ids
    if wm_span is not None:
        start, n = wm_span
        wm_mask[start:start + n] = 1
        targets[start:start + n] = wm_ids

    return TokenSequence(
        ids=np.array(ids, dtype=np.int64), tags=np.array(tags, dtype=np.int64),
        chunk_index=np.array(chunk_of, dtype=np.int64), targets=targets,
        action_mask=action_mask, wm_mask=wm_mask, input_length=input_length,
        front_end=config.front_end, patch_feats=patch_feats,
        vis_starts=vis_starts, act_starts=act_starts, cmd_positions=cmd_positions)


# ---------------------------------------------------------------------------
# parameters and forward pass


def init_backbone_params(cfg: ModelConfig, rng: np.random.Generator,
                         continuous: bool = False,
                         store: ParamStore | None = None,
                         prefix: str = "") -> ParamStore:
    """Create backbone parameters; the output head starts at zero so the
    initial next-token distribution is uniform."""
    store = store if store is not None else ParamStore()
    d = cfg.d_model
    store.normal(prefix + "tok_emb", (cfg.vocab, d), rng)
    store.normal(prefix + "pos_emb", (cfg.max_seq_len, d), rng)
    store.normal(prefix + "seg_emb", (4, d), rng)
    for i in range(cfg.n_layers):
        p = f"{prefix}layer{i}."
        store.ones(p + "ln1.g", (d,))
        store.zeros(p + "ln1.b", (d,))
        for w in ("wq", "wk", "wv", "wo"):
            store.normal(p + "attn." + w, (d, d), rng)
        for b in ("bq", "bk", "bv", "bo"):
            store.zeros(p + "attn." + b, (1, d))
        store.ones(p + "ln2.g", (d,))
        store.zeros(p + "ln2.b", (d,))
        store.normal(p + "mlp.w1", (d, cfg.mlp_ratio * d), rng)
        store.zeros(p + "mlp.b1", (1, cfg.mlp_ratio * d))
        store.normal(p + "mlp.w2", (cfg.mlp_ratio * d, d), rng)
        store.zeros(p + "mlp.b2", (1, d))
    store.ones(prefix + "ln_f.g", (d,))
    store.zeros(prefix + "ln_f.b", (d,))
    store.zeros(prefix + "head.w", (d, cfg.vocab))
    if continuous:
        store.normal(prefix + "patch.w", (tok.PATCH_DIM, d), rng)
        store.zeros(prefix + "patch.b", (1, d))
    return store


def causal_mask(t: int, dtype) -> np.ndarray:
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = NEG_INF
    return m


def multi_head_attention(y: DiffTensor, store: ParamStore, prefix: str,
                         cfg: ModelConfig, mask: DiffTensor) -> DiffTensor:
    """Masked attention over one 2-D [T, d] stream; heads are column slices."""
    q = add(matmul(y, store[prefix + "wq"]), store[prefix + "bq"])
    k = add(matmul(y, store[prefix + "wk"]), store[prefix + "bk"])
    v = add(matmul(y, store[prefix + "wv"]), store[prefix + "bv"])
    inv_sqrt = 1.0 / math.sqrt(cfg.head_dim)
    heads = []
    for h in range(cfg.n_heads):
        lo = h * cfg.head_dim
        qh = narrow(q, 1, lo, cfg.head_dim)
        kh = narrow(k, 1, lo, cfg.head_dim)
        vh = narrow(v, 1, lo, cfg.head_dim)
        scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt), mask)
        heads.append(matmul(softmax_rows(scores), vh))
    o = concat(heads, axis=1)
    return add(matmul(o, store[prefix + "wo"]), store[prefix + "bo"])


def _assemble_inputs(seq: TokenSequence, store: ParamStore, cfg: ModelConfig,
                     prefix: str = "") -> DiffTensor:
    t = len(seq)
    emb = embedding_lookup(store[prefix + "tok_emb"], seq.ids)
    if seq.front_end == "continuous":
        pieces = []
        cursor = 0
        for ci, start in enumerate(seq.vis_starts):
            if start > cursor:
                pieces.append(narrow(emb, 0, cursor, start - cursor))
            patches = constant(seq.patch_feats[ci], dtype=emb.dtype)
            pieces.append(add(matmul(patches, store[prefix + "patch.w"]),
                              store[prefix + "patch.b"]))
            cursor = start + N_VISUAL_TOKENS
        if cursor < t:
            pieces.append(narrow(emb, 0, cursor, t - cursor))
        emb = concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
    x = add(emb, narrow(store[prefix + "pos_emb"], 0, 0, t))
    return add(x, embedding_lookup(store[prefix + "seg_emb"], seq.tags))


@dataclass
class BackboneOutput:
    hidden: DiffTensor            # [T, d] final-layer states
    logits: DiffTensor            # [T, vocab]
    seq: TokenSequence

    def modality_positions(self, modality: int) -> np.ndarray:
        return np.flatnonzero(self.seq.tags == modality)

    def visual_features(self, chunk: int = -1) -> DiffTensor:
        start = self.seq.vis_starts[chunk]
        return narrow(self.hidden, 0, start, N_VISUAL_TOKENS)

    def action_features(self, chunk: int = -1) -> DiffTensor:
        start = self.seq.act_starts[chunk]
        return narrow(self.hidden, 0, start, N_ACTION_TOKENS)


def forward(seq: TokenSequence, store: ParamStore, cfg: ModelConfig,
            extra_mask: np.ndarray | None = None,
            prefix: str = "") -> BackboneOutput:
    """Pre-norm transformer pass; strict causal masking."""
    t = len(seq)
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max {cfg.max_seq_len}")
    dtype = store[prefix + "tok_emb"].dtype
    m = causal_mask(t, dtype)
    if extra_mask is not None:
        m = m + extra_mask.astype(dtype)
    mask = constant(m, dtype=dtype)
    x = _assemble_inputs(seq, store, cfg, prefix)
    for i in range(cfg.n_layers):
        p = f"{prefix}layer{i}."
        y = layer_norm(x, store[p + "ln1.g"], store[p + "ln1.b"])
        x = add(x, multi_head_attention(y, store, p + "attn.", cfg, mask))
        y = layer_norm(x, store[p + "ln2.g"], store[p + "ln2.b"])
        y = matmul(gelu(add(matmul(y, store[p + "mlp.w1"]), store[p + "mlp.b1"])),
                   store[p + "mlp.w2"])
        x = add(x, add(y, store[p + "mlp.b2"]))
    h = layer_norm(x, store[prefix + "ln_f.g"], store[prefix + "ln_f.b"])
    logits = matmul(h, store[prefix + "head.w"])
    return BackboneOutput(hidden=h, logits=logits, seq=seq)


# ---------------------------------------------------------------------------
# losses


def loss_action(output: BackboneOutput) -> DiffTensor:
    """Cross entropy over the 12 current-action predictions."""
    return cross_entropy(output.logits, output.seq.targets, output.seq.action_mask)


def loss_wm_ar(output: BackboneOutput) -> DiffTensor:
    """Next-token cross entropy over the newest chunk's visual tokens."""
    seq = output.seq
    if seq.front_end != "discrete":
        raise ValueError("AR world-model loss needs the discrete front end "
                         "(continuous features have no visual vocabulary)")
    if seq.wm_mask.sum() == 0:
        raise ValueError("sequence has no world-model target positions")
    return cross_entropy(output.logits, seq.targets, seq.wm_mask)


# ---------------------------------------------------------------------------
# generation


def _argmax_in_range(logits_row: np.ndarray, lo: int, hi: int) -> int:
    return lo + int(np.argmax(logits_row[lo:hi]))


def _sample_in_range(logits_row: np.ndarray, lo: int, hi: int,
                     temperature: float, rng: np.random.Generator) -> int:
    if temperature <= 1e-6:
        return _argmax_in_range(logits_row, lo, hi)
    z = logits_row[lo:hi].astype(np.float64) / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return lo + int(rng.choice(hi - lo, p=p))


def _extend(seq: TokenSequence, token_id: int, tag: int) -> TokenSequence:
    t = len(seq) + 1
    return TokenSequence(
        ids=np.append(seq.ids, token_id), tags=np.append(seq.tags, tag),
        chunk_index=np.append(seq.chunk_index, -1),
        targets=np.zeros(t, dtype=np.int64),
        action_mask=np.zeros(t, dtype=np.int64),
        wm_mask=np.zeros(t, dtype=np.int64),
        input_length=seq.input_length, front_end=seq.front_end,
        patch_feats=seq.patch_feats, vis_starts=seq.vis_starts,
        act_starts=seq.act_starts, cmd_positions=seq.cmd_positions)


def generate_action_tokens(seq: TokenSequence, store: ParamStore, cfg: ModelConfig,
                           mode: str = "greedy", temperature: float = 1.0,
                           rng: np.random.Generator | None = None,
                           prefix: str = "") -> np.ndarray:
    """Emit exactly 12 action-range ids after the trailing BOA.

    Decoding is masked to the action id range, so modality drift is
    impossible by construction. Greedy decoding is deterministic;
    temperature 0 equals greedy.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling mode needs an explicit rng")
    cur = seq.prefix(seq.gen_prefix_len)
    out = []
    for _ in range(N_ACTION_TOKENS):
        logits = forward(cur, store, cfg, prefix=prefix).logits.values[-1]
        if mode == "greedy":
            nxt = _argmax_in_range(logits, ACTION_LO, BOS)
        else:
            nxt = _sample_in_range(logits, ACTION_LO, BOS, temperature, rng)
        out.append(nxt)
        cur = _extend(cur, nxt, MODALITY_ACTION)
    return np.array(out, dtype=np.int64)


def generate_visual_tokens(seq: TokenSequence, store: ParamStore, cfg: ModelConfig,
                           seed: int, temperature: float = 1.0,
                           prefix: str = "") -> np.ndarray:
    """Sample the newest chunk's 64 visual ids, masked to the visual range."""
    if seq.front_end != "discrete":
        raise ValueError("visual generation needs the discrete front end")
    rng = np.random.default_rng(seed)
    cur = seq.prefix(seq.vis_starts[-1])
    out = []
    for _ in range(N_VISUAL_TOKENS):
        logits = forward(cur, store, cfg, prefix=prefix).logits.values[-1]
        nxt = _sample_in_range(logits, VISUAL_LO, ACTION_LO, temperature, rng)
        out.append(nxt)
        cur = _extend(cur, nxt, MODALITY_VISUAL)
    return np.array(out, dtype=np.int64)
