import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minidrive import autodiff as ad


def rand(shape, seed, lo=-1.0, hi=1.0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, shape).astype(dtype)


def check(f, inputs, dtype):
    tol = 1e-4 if dtype == np.float32 else 1e-6
    tensors = [ad.parameter(x, dtype=dtype) for x in inputs]
    report = ad.gradient_check(f, tensors, tol=tol)
    assert report.passed, f"max rel err {report.max_rel_error} > {tol} ({dtype})"


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    m = ad.constant(rand((3, 3), 0))
    eye = ad.constant(np.eye(3, dtype=np.float32))
    assert np.allclose(ad.matmul(eye, m).values, m.values)


def test_matmul_example():
    a = ad.constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = ad.constant(np.eye(2, dtype=np.float32))
    assert np.array_equal(ad.matmul(a, b).values, a.values)


def test_matmul_shape_mismatch_reports_both_shapes():
    a = ad.constant(np.zeros((2, 3)))
    b = ad.constant(np.zeros((2, 3)))
    with pytest.raises(ValueError, match=r"\(2, 3\) x \(2, 3\)"):
        ad.matmul(a, b)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_matmul_gradient(dtype):
    check(lambda xs: ad.sum_all(ad.matmul(xs[0], xs[1])),
          [rand((4, 4), 1), rand((4, 4), 2)], dtype)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform():
    out = ad.softmax_rows(ad.constant(np.zeros(3)))
    assert np.allclose(out.values, 1.0 / 3.0)


def test_softmax_stability():
    out = ad.softmax_rows(ad.constant(np.array([1000.0, 0.0])))
    assert np.all(np.isfinite(out.values))
    assert np.allclose(out.values, [1.0, 0.0])


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        ad.softmax_rows(ad.constant(np.array([np.nan, 0.0])))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-15, 15), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(row):
    out = ad.softmax_rows(ad.constant(np.array(row), dtype=np.float64)).values
    assert abs(out.sum() - 1.0) <= 1e-6
    assert np.all(out > 0)
    if len(row) > 1:  # singleton rows are exactly 1.0; huge gaps saturate
        assert np.all(out < 1.0)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_softmax_gradient(dtype):
    w = rand((5,), 3)
    check(lambda xs: ad.sum_all(ad.mul(ad.softmax_rows(xs[0]),
                                       ad.constant(w, dtype=xs[0].dtype))),
          [rand((3, 5), 4)], dtype)


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_constant_row_is_zero_pre_affine():
    x = ad.constant(np.full((2, 4), 3.7))
    g = ad.constant(np.ones(4))
    b = ad.constant(np.zeros(4))
    assert np.allclose(ad.layer_norm(x, g, b).values, 0.0, atol=1e-5)


def test_layer_norm_standardizes():
    x = ad.constant(np.array([[1.0, 2.0, 3.0]]))
    out = ad.layer_norm(x, ad.constant(np.ones(3)), ad.constant(np.zeros(3))).values
    assert abs(out.mean()) < 1e-5
    assert abs(out.var() - 1.0) < 1e-3  # eps shifts variance slightly


def test_layer_norm_rejects_bad_eps():
    x = ad.constant(np.ones((1, 3)))
    with pytest.raises(ValueError, match="eps"):
        ad.layer_norm(x, ad.constant(np.ones(3)), ad.constant(np.zeros(3)), eps=0.0)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_layer_norm_gradient(dtype):
    check(lambda xs: ad.mean_all(ad.layer_norm(xs[0], xs[1], xs[2])),
          [rand((4, 6), 5), rand((6,), 6, 0.5, 1.5), rand((6,), 7)], dtype)


# ---------------------------------------------------------------------------
# embedding


def test_embedding_row_gather():
    table = ad.constant(rand((5, 3), 8))
    out = ad.embedding_lookup(table, np.array([0]))
    assert np.array_equal(out.values[0], table.values[0])


def test_embedding_repeated_id_accumulates():
    table = ad.parameter(rand((5, 3), 9))
    with ad.Tape() as tape:
        out = ad.embedding_lookup(table, np.array([2, 2]))
        tape.backward(ad.sum_all(out))
    assert np.allclose(table.grad[2], 2.0)
    assert np.allclose(table.grad[0], 0.0)


def test_embedding_out_of_range_reports_id():
    table = ad.constant(rand((5, 3), 10))
    with pytest.raises(ValueError, match=r"id 7 out of range \[0, 5\)"):
        ad.embedding_lookup(table, np.array([1, 7]))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_embedding_gradient(dtype):
    ids = np.array([0, 2, 2, 1])
    w = rand((4, 3), 11)
    check(lambda xs: ad.sum_all(ad.mul(ad.embedding_lookup(xs[0], ids),
                                       ad.constant(w, dtype=xs[0].dtype))),
          [rand((4, 3), 12)], dtype)


# ---------------------------------------------------------------------------
# losses


def test_cross_entropy_confident_is_near_zero():
    logits = np.full((3, 4), -100.0)
    logits[np.arange(3), [1, 2, 0]] = 100.0
    loss = ad.cross_entropy(ad.constant(logits), np.array([1, 2, 0]), np.ones(3))
    assert loss.item() < 1e-6


def test_cross_entropy_uniform_is_log_vocab():
    loss = ad.cross_entropy(ad.constant(np.zeros((2, 256))), np.array([7, 9]),
                            np.ones(2))
    assert abs(loss.item() - np.log(256)) < 1e-5


def test_cross_entropy_empty_mask_rejected():
    with pytest.raises(ValueError, match="mask"):
        ad.cross_entropy(ad.constant(np.zeros((2, 4))), np.array([0, 1]), np.zeros(2))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_cross_entropy_gradient(dtype):
    targets = np.array([3, 1, 6, 0, 2])
    mask = np.array([1, 1, 0, 1, 1])
    check(lambda xs: ad.cross_entropy(xs[0], targets, mask),
          [rand((5, 7), 13)], dtype)


def test_mse_l1_basics():
    a = ad.constant(rand((3, 3), 14))
    assert ad.mse(a, a).item() == 0.0
    assert ad.l1(a, a).item() == 0.0
    b = ad.constant(a.values - 1.0)
    assert abs(ad.mse(a, b).item() - 1.0) < 1e-6
    assert abs(ad.l1(a, b).item() - 1.0) < 1e-6
    with pytest.raises(ValueError, match="shape"):
        ad.mse(a, ad.constant(np.zeros((2, 3))))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_mse_gradient(dtype):
    check(lambda xs: ad.mse(xs[0], xs[1]), [rand((4, 4), 15), rand((4, 4), 16)], dtype)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_l1_gradient(dtype):
    # keep |a - b| away from the kink at zero
    check(lambda xs: ad.l1(xs[0], xs[1]),
          [rand((4, 4), 17), rand((4, 4), 18) + 3.0], dtype)


# ---------------------------------------------------------------------------
# structural ops and the full-op sweep


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_structural_gradients(dtype):
    w = rand((4, 4), 19)

    def weighted(x):
        return ad.sum_all(ad.mul(x, ad.constant(w[:x.shape[0], :x.shape[1]],
                                                dtype=x.dtype)))

    check(lambda xs: weighted(ad.transpose(xs[0])), [rand((4, 4), 20)], dtype)
    check(lambda xs: weighted(ad.reshape(xs[0], (4, 4))), [rand((2, 8), 21)], dtype)
    check(lambda xs: weighted(ad.narrow(xs[0], 0, 1, 2)), [rand((4, 4), 22)], dtype)
    check(lambda xs: weighted(ad.narrow(xs[0], 1, 0, 3)), [rand((4, 4), 23)], dtype)
    check(lambda xs: weighted(ad.concat([xs[0], xs[1]], axis=0)),
          [rand((2, 4), 24), rand((2, 4), 25)], dtype)
    check(lambda xs: weighted(ad.mean_rows(xs[0])), [rand((4, 4), 26)], dtype)
    check(lambda xs: weighted(ad.gelu(xs[0])), [rand((4, 4), 27)], dtype)
    check(lambda xs: weighted(ad.add(xs[0], xs[1])),
          [rand((4, 4), 28), rand((1, 4), 29)], dtype)
    check(lambda xs: weighted(ad.sub(xs[0], xs[1])),
          [rand((4, 4), 30), rand((4, 4), 31)], dtype)
    check(lambda xs: weighted(ad.mul(xs[0], xs[1])),
          [rand((4, 4), 32), rand((4, 4), 33)], dtype)
    check(lambda xs: weighted(ad.scale(xs[0], -1.7)), [rand((4, 4), 34)], dtype)
    check(lambda xs: ad.mean_all(xs[0]), [rand((4, 4), 35)], dtype)


def test_deterministic_replay():
    def run():
        a = ad.parameter(rand((6, 6), 40), dtype=np.float32)
        b = ad.parameter(rand((6, 6), 41), dtype=np.float32)
        with ad.Tape() as tape:
            y = ad.softmax_rows(ad.matmul(ad.gelu(a), b))
            loss = ad.mse(y, ad.constant(np.zeros((6, 6)), dtype=np.float32))
            tape.backward(loss)
        return loss.values.copy(), a.grad.copy(), b.grad.copy()

    l1_, ga1, gb1 = run()
    l2_, ga2, gb2 = run()
    assert np.array_equal(l1_, l2_)
    assert np.array_equal(ga1, ga2)
    assert np.array_equal(gb1, gb2)


def test_inference_without_tape_records_nothing():
    a = ad.parameter(rand((3, 3), 42))
    out = ad.matmul(a, a)
    assert not out.requires_grad and out.node_id is None


def test_backward_requires_scalar_root():
    a = ad.parameter(rand((3, 3), 43))
    with ad.Tape() as tape:
        out = ad.matmul(a, a)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(out)


def test_gradient_check_oracle_examples():
    # f = sum(x): gradient is exactly one everywhere
    report = ad.gradient_check(lambda xs: ad.sum_all(xs[0]),
                               [ad.parameter(rand((3, 3), 44))], tol=1e-9)
    assert report.passed
    # f = sum(x*x): gradient is 2x
    x = ad.parameter(rand((3, 3), 45))
    with ad.Tape() as tape:
        tape.backward(ad.sum_all(ad.mul(x, x)))
    assert np.allclose(x.grad, 2 * x.values, atol=1e-12)
