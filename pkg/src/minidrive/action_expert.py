"""Lightweight action expert coupled to the backbone by joint attention.

Both sides project to the same per-head geometry; their Q/K/V are
concatenated along the token axis into one attention computation, and the
output rows are split and routed back to each side. Expert tokens sit
after backbone tokens: attention is causal within each side, the expert
always sees the backbone, and backbone-to-expert attention is a switchable
mask (default on).

The expert prefixes the previous action's 12 embedded tokens, then decodes
by one of three schemes: learned queries regressed to waypoints (L1),
autoregressive action tokens (cross entropy), or a flow-matching velocity
field integrated with 10 Euler steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (DiffTensor, add, concat, constant, cross_entropy,
                       embedding_lookup, gelu, layer_norm, matmul, mse, narrow,
                       scale, softmax_rows, transpose)
from .backbone import (NEG_INF, BackboneOutput, ModelConfig, TokenSequence,
                       _assemble_inputs, _argmax_in_range, _sample_in_range)
from .diffusion import sinusoidal_embedding
from .params import ParamStore
from .tokenizers import (ACTION_LO, BOA, BOS, N_ACTION_TOKENS, VOCAB_SIZE,
                         ActionTokenizer)

FLOW_DIM = 2 * 6  # flattened (x, y) waypoints


@dataclass
class ExpertConfig:
    d_expert: int = 64
    decoder: str = "query"            # query | autoregressive | flow
    n_queries: int = 6
    flow_steps: int = 10
    max_expert_len: int = 32
    backbone_to_expert: bool = True   # reverse attention direction switch
    traj_bound: float = 25.0


def init_expert_params(store: ParamStore, bb_cfg: ModelConfig,
                       ex_cfg: ExpertConfig, rng: np.random.Generator) -> ParamStore:
    d = ex_cfg.d_expert
    shared = bb_cfg.d_model
    store.normal("expert.tok_emb", (VOCAB_SIZE, d), rng)
    store.normal("expert.pos_emb", (ex_cfg.max_expert_len, d), rng)
    store.normal("expert.query_emb", (ex_cfg.n_queries, d), rng)
    store.normal("expert.flow_in.w", (FLOW_DIM, d), rng)
    store.zeros("expert.flow_in.b", (1, d))
    for i in range(bb_cfg.n_layers):
        p = f"expert.layer{i}."
        store.ones(p + "ln1.g", (d,))
        store.zeros(p + "ln1.b", (d,))
        for w in ("wq", "wk", "wv"):
            store.normal(p + "attn." + w, (d, shared), rng)
        for b in ("bq", "bk", "bv"):
            store.zeros(p + "attn." + b, (1, shared))
        store.normal(p + "attn.wo", (shared, d), rng)
        store.zeros(p + "attn.bo", (1, d))
        store.ones(p + "ln2.g", (d,))
        store.zeros(p + "ln2.b", (d,))
        store.normal(p + "mlp.w1", (d, 4 * d), rng)
        store.zeros(p + "mlp.b1", (1, 4 * d))
        store.normal(p + "mlp.w2", (4 * d, d), rng)
        store.zeros(p + "mlp.b2", (1, d))
    store.ones("expert.ln_f.g", (d,))
    store.zeros("expert.ln_f.b", (d,))
    # heads start small but nonzero so decoder gradients reach the backbone
    # from the very first stage-2 step
    store.normal("expert.query_head.w", (d, 2), rng, std=0.01)
    store.zeros("expert.query_head.b", (1, 2))
    store.normal("expert.ar_head.w", (d, VOCAB_SIZE), rng, std=0.01)
    store.normal("expert.flow_head.w", (d, FLOW_DIM), rng, std=0.01)
    store.zeros("expert.flow_head.b", (1, FLOW_DIM))
    return store


def joint_mask(t_b: int, t_e: int, backbone_to_expert: bool, dtype) -> np.ndarray:
    """Block attention mask over [backbone tokens; expert tokens].

    Global position order gives causality within each side and full
    expert-to-backbone visibility; the backbone-to-expert block is opened
    only when the reverse direction is enabled.
    """
    t = t_b + t_e
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = NEG_INF
    if backbone_to_expert:
        m[:t_b, t_b:] = 0.0
    return m


def joint_attention_layer(x_b: DiffTensor, x_e: DiffTensor, store: ParamStore,
                          bb_cfg: ModelConfig, layer: int,
                          backbone_to_expert: bool = True,
                          bb_prefix: str = "") -> tuple[DiffTensor, DiffTensor]:
    """One joint attention + MLP layer; returns updated (backbone, expert) streams."""
    pb = f"{bb_prefix}layer{layer}."
    pe = f"expert.layer{layer}."
    if store[pe + "attn.wq"].shape[1] != bb_cfg.d_model:
        raise ValueError(
            f"expert attention width {store[pe + 'attn.wq'].shape[1]} does not "
            f"match backbone heads ({bb_cfg.d_model})")
    t_b, t_e = x_b.shape[0], x_e.shape[0]
    dtype = x_b.dtype
    mask = constant(joint_mask(t_b, t_e, backbone_to_expert, dtype), dtype=dtype)

    y_b = layer_norm(x_b, store[pb + "ln1.g"], store[pb + "ln1.b"])
    y_e = layer_norm(x_e, store[pe + "ln1.g"], store[pe + "ln1.b"])
    q = concat([add(matmul(y_b, store[pb + "attn.wq"]), store[pb + "attn.bq"]),
                add(matmul(y_e, store[pe + "attn.wq"]), store[pe + "attn.bq"])], axis=0)
    k = concat([add(matmul(y_b, store[pb + "attn.wk"]), store[pb + "attn.bk"]),
                add(matmul(y_e, store[pe + "attn.wk"]), store[pe + "attn.bk"])], axis=0)
    v = concat([add(matmul(y_b, store[pb + "attn.wv"]), store[pb + "attn.bv"]),
                add(matmul(y_e, store[pe + "attn.wv"]), store[pe + "attn.bv"])], axis=0)
    inv_sqrt = 1.0 / math.sqrt(bb_cfg.head_dim)
    heads = []
    for h in range(bb_cfg.n_heads):
        lo = h * bb_cfg.head_dim
        qh = narrow(q, 1, lo, bb_cfg.head_dim)
        kh = narrow(k, 1, lo, bb_cfg.head_dim)
        vh = narrow(v, 1, lo, bb_cfg.head_dim)
        scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt), mask)
        heads.append(matmul(softmax_rows(scores), vh))
    o = concat(heads, axis=1)
    o_b = narrow(o, 0, 0, t_b)
    o_e = narrow(o, 0, t_b, t_e)
    x_b = add(x_b, add(matmul(o_b, store[pb + "attn.wo"]), store[pb + "attn.bo"]))
    x_e = add(x_e, add(matmul(o_e, store[pe + "attn.wo"]), store[pe + "attn.bo"]))

    y_b = layer_norm(x_b, store[pb + "ln2.g"], store[pb + "ln2.b"])
    y_b = matmul(gelu(add(matmul(y_b, store[pb + "mlp.w1"]), store[pb + "mlp.b1"])),
                 store[pb + "mlp.w2"])
    x_b = add(x_b, add(y_b, store[pb + "mlp.b2"]))
    y_e = layer_norm(x_e, store[pe + "ln2.g"], store[pe + "ln2.b"])
    y_e = matmul(gelu(add(matmul(y_e, store[pe + "mlp.w1"]), store[pe + "mlp.b1"])),
                 store[pe + "mlp.w2"])
    x_e = add(x_e, add(y_e, store[pe + "mlp.b2"]))
    return x_b, x_e


def expert_prefix_embedding(prev_action_ids: np.ndarray, store: ParamStore) -> DiffTensor:
    """Embedded previous-action tokens; always exactly 12 positions."""
    prev_action_ids = np.asarray(prev_action_ids)
    if prev_action_ids.shape != (N_ACTION_TOKENS,):
        raise ValueError(f"previous-action prefix must have {N_ACTION_TOKENS} ids, "
                         f"got {prev_action_ids.shape}")
    return embedding_lookup(store["expert.tok_emb"], prev_action_ids)


def _with_positions(x_e: DiffTensor, store: ParamStore) -> DiffTensor:
    return add(x_e, narrow(store["expert.pos_emb"], 0, 0, x_e.shape[0]))


def joint_forward(seq: TokenSequence, expert_x: DiffTensor, store: ParamStore,
                  bb_cfg: ModelConfig, ex_cfg: ExpertConfig,
                  bb_prefix: str = "") -> tuple[DiffTensor, DiffTensor]:
    """Full joint pass over S_t and an already-embedded expert stream.

    Returns final-layer (backbone hidden, expert hidden).
    """
    x_b = _assemble_inputs(seq, store, bb_cfg, bb_prefix)
    x_e = _with_positions(expert_x, store)
    for i in range(bb_cfg.n_layers):
        x_b, x_e = joint_attention_layer(x_b, x_e, store, bb_cfg, i,
                                         ex_cfg.backbone_to_expert, bb_prefix)
    h_b = layer_norm(x_b, store[bb_prefix + "ln_f.g"], store[bb_prefix + "ln_f.b"])
    h_e = layer_norm(x_e, store["expert.ln_f.g"], store["expert.ln_f.b"])
    return h_b, h_e


# ---------------------------------------------------------------------------
# decoders


def query_expert_decode(seq: TokenSequence, prev_action_ids: np.ndarray,
                        store: ParamStore, bb_cfg: ModelConfig,
                        ex_cfg: ExpertConfig) -> DiffTensor:
    """M learned queries through the joint stack, affine head to waypoints."""
    prefix = expert_prefix_embedding(prev_action_ids, store)
    x_e = concat([prefix, store["expert.query_emb"]], axis=0)
    _, h_e = joint_forward(seq, x_e, store, bb_cfg, ex_cfg)
    q = narrow(h_e, 0, N_ACTION_TOKENS, ex_cfg.n_queries)
    return add(matmul(q, store["expert.query_head.w"]), store["expert.query_head.b"])


def ar_expert_logits(seq: TokenSequence, prev_action_ids: np.ndarray,
                     decode_ids: np.ndarray, store: ParamStore,
                     bb_cfg: ModelConfig, ex_cfg: ExpertConfig) -> DiffTensor:
    """Expert-head logits over [prefix, BOA, decode_ids] positions."""
    ids = np.concatenate([[BOA], np.asarray(decode_ids, dtype=np.int64)])
    prefix = expert_prefix_embedding(prev_action_ids, store)
    x_e = concat([prefix, embedding_lookup(store["expert.tok_emb"], ids)], axis=0)
    _, h_e = joint_forward(seq, x_e, store, bb_cfg, ex_cfg)
    return matmul(h_e, store["expert.ar_head.w"])


def ar_expert_loss(seq: TokenSequence, prev_action_ids: np.ndarray,
                   target_ids: np.ndarray, store: ParamStore,
                   bb_cfg: ModelConfig, ex_cfg: ExpertConfig) -> DiffTensor:
    """Teacher-forced cross entropy on the expert's 12 action predictions."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    logits = ar_expert_logits(seq, prev_action_ids, target_ids[:-1], store,
                              bb_cfg, ex_cfg)
    t = logits.shape[0]
    targets = np.zeros(t, dtype=np.int64)
    mask = np.zeros(t, dtype=np.int64)
    start = N_ACTION_TOKENS  # the BOA position predicts the first target
    mask[start:start + N_ACTION_TOKENS] = 1
    targets[start:start + N_ACTION_TOKENS] = target_ids
    return cross_entropy(logits, targets, mask)


def ar_expert_decode(seq: TokenSequence, prev_action_ids: np.ndarray,
                     store: ParamStore, bb_cfg: ModelConfig, ex_cfg: ExpertConfig,
                     mode: str = "greedy", temperature: float = 1.0,
                     rng: np.random.Generator | None = None,
                     n_tokens: int = N_ACTION_TOKENS) -> np.ndarray:
    """Generate action ids from the expert head, masked to the action range.

    `n_tokens` other than 12 exists only for latency measurements.
    """
    if mode == "sample" and rng is None:
        raise ValueError("sampling mode needs an explicit rng")
    out: list[int] = []
    for _ in range(n_tokens):
        logits = ar_expert_logits(seq, prev_action_ids, np.array(out, dtype=np.int64),
                                  store, bb_cfg, ex_cfg).values[-1]
        if mode == "greedy":
            nxt = _argmax_in_range(logits, ACTION_LO, BOS)
        else:
            nxt = _sample_in_range(logits, ACTION_LO, BOS, temperature, rng)
        out.append(nxt)
    return np.array(out, dtype=np.int64)


def flow_expert_velocity(x_t: np.ndarray, t: float, seq: TokenSequence,
                         prev_action_ids: np.ndarray, store: ParamStore,
                         bb_cfg: ModelConfig, ex_cfg: ExpertConfig) -> DiffTensor:
    """Conditional velocity at flow time t for a normalized 12-d action point."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time {t} outside [0, 1]")
    x_t = np.asarray(x_t, dtype=np.float64).reshape(1, FLOW_DIM)
    dtype = store["expert.tok_emb"].dtype
    tok_in = add(matmul(constant(x_t, dtype=dtype), store["expert.flow_in.w"]),
                 store["expert.flow_in.b"])
    t_emb = constant(sinusoidal_embedding(t, ex_cfg.d_expert).reshape(1, -1),
                     dtype=dtype)
    prefix = expert_prefix_embedding(prev_action_ids, store)
    x_e = concat([prefix, add(tok_in, t_emb)], axis=0)
    _, h_e = joint_forward(seq, x_e, store, bb_cfg, ex_cfg)
    flow_tok = narrow(h_e, 0, N_ACTION_TOKENS, 1)
    return add(matmul(flow_tok, store["expert.flow_head.w"]),
               store["expert.flow_head.b"])


def flow_expert_loss(seq: TokenSequence, prev_action_ids: np.ndarray,
                     target_traj: np.ndarray, store: ParamStore,
                     bb_cfg: ModelConfig, ex_cfg: ExpertConfig,
                     rng: np.random.Generator) -> DiffTensor:
    """Straight-path flow matching: regress a1 - a0 at a random point."""
    a1 = np.asarray(target_traj, dtype=np.float64).reshape(FLOW_DIM) / ex_cfg.traj_bound
    a0 = rng.standard_normal(FLOW_DIM)
    t = float(rng.uniform())
    x_t = (1.0 - t) * a0 + t * a1
    v_hat = flow_expert_velocity(x_t, t, seq, prev_action_ids, store, bb_cfg, ex_cfg)
    target = constant((a1 - a0).reshape(1, FLOW_DIM), dtype=v_hat.dtype)
    return mse(v_hat, target)


def flow_expert_sample(seq: TokenSequence, prev_action_ids: np.ndarray,
                       store: ParamStore, bb_cfg: ModelConfig,
                       ex_cfg: ExpertConfig, seed: int,
                       velocity_fn=None) -> np.ndarray:
    """Integrate the velocity field with fixed-step explicit Euler.

    `velocity_fn(x, t) -> (12,)` overrides the learned field (planted-field
    tests). Returns a (6, 2) trajectory in meters.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(FLOW_DIM)
    n = ex_cfg.flow_steps
    for i in range(n):
        t = i / n
        if velocity_fn is not None:
            v = np.asarray(velocity_fn(x, t), dtype=np.float64).reshape(FLOW_DIM)
        else:
            v = flow_expert_velocity(x, t, seq, prev_action_ids, store, bb_cfg,
                                     ex_cfg).values.reshape(FLOW_DIM).astype(np.float64)
        x = x + v / n
    return (x * ex_cfg.traj_bound).reshape(6, 2)
