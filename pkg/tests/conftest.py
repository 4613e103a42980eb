import numpy as np
import pytest

from minidrive import backbone as bb
from minidrive import dataset as ds
from minidrive import tokenizers as tk


@pytest.fixture(scope="session")
def small_records():
    """Ten deterministic clips covering every scenario kind."""
    return ds.generate_dataset(160, seed=77)


@pytest.fixture(scope="session")
def small_codebook(small_records):
    return tk.fit_codebook([r.image for r in small_records], seed=0)


@pytest.fixture(scope="session")
def tokenizer():
    return tk.ActionTokenizer()


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return bb.ModelConfig(d_model=32, n_layers=2, n_heads=2, head_dim=16)


@pytest.fixture(scope="session")
def seq_2va(small_records, small_codebook, tokenizer):
    cfg = bb.SequenceConfig(history=2)
    clip = [r for r in small_records if r.clip_id == small_records[0].clip_id]
    return bb.build_sequence([clip[3], clip[5]], [clip[2], clip[4]], cfg,
                             tokenizer, small_codebook)


def swap_params_f(stores, names, build_loss):
    """Adapt a store-based loss into the gradient_check(f, inputs) protocol.

    `stores` maps a numpy dtype name to a ParamStore whose parameters all
    carry that dtype; gradient_check evaluates the finite-difference side in
    float64 even when the tape side runs in float32, so both twins must
    exist.
    """
    def f(inputs):
        store = stores[inputs[0].dtype.name]
        saved = [store.swap(n, t) for n, t in zip(names, inputs)]
        try:
            return build_loss(store)
        finally:
            for n, s in zip(names, saved):
                store.swap(n, s)
    return f


def dtype_twin_stores(build_store):
    """float32 and float64 copies of one freshly built parameter store."""
    stores = {}
    for dtype in (np.float32, np.float64):
        store = build_store()
        for name in store.names():
            t = store[name]
            t.values = t.values.astype(dtype)
        stores[np.dtype(dtype).name] = store
    return stores
