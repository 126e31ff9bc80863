import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowrl import autodiff as ad
from flowrl.nets import MLP


def test_matmul_row_times_column():
    a = ad.Tensor([[1.0, 2.0]])
    b = ad.Tensor([[3.0], [4.0]])
    out = ad.matmul(a, b)
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_tanh_zero_is_zero():
    x = ad.Tensor(np.zeros((3, 4)))
    assert np.all(ad.tanh(x).data == 0.0)


def test_log_exp_roundtrip_is_identity():
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.standard_normal((5, 3)))
    out = ad.sub(ad.log(ad.exp(x)), x)
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_sum_gradient_is_ones():
    p = ad.Parameter(np.array([1.0, -2.0, 3.0]), "p")
    with ad.Tape() as tape:
        loss = ad.sum_all(p.tensor())
        tape.backward(loss)
    assert np.array_equal(p.grad, np.ones(3))


def test_square_sum_gradient_is_two_p():
    p = ad.Parameter(np.array([3.0, -1.0]), "p")
    with ad.Tape() as tape:
        t = p.tensor()
        loss = ad.sum_all(ad.mul(t, t))
        tape.backward(loss)
    assert np.allclose(p.grad, [6.0, -2.0])


def test_gradient_accumulates_across_reuse():
    # the same lifted leaf feeds two branches; grads must add
    p = ad.Parameter(np.array([2.0, 5.0]), "p")
    with ad.Tape() as tape:
        t = p.tensor()
        loss = ad.add(ad.sum_all(t), ad.sum_all(ad.mul(t, t)))
        tape.backward(loss)
    assert np.allclose(p.grad, 1.0 + 2.0 * p.value)


def test_bias_broadcast_gradient_is_column_sum():
    rng = np.random.default_rng(1)
    x = ad.Tensor(rng.standard_normal((5, 3)))
    b = ad.Parameter(rng.standard_normal(3), "b")
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.mul(ad.add(x, b.tensor()), ad.add(x, b.tensor())))
        tape.backward(loss)
    expect = (2.0 * (x.data + b.value)).sum(axis=0)
    assert np.allclose(b.grad, expect)


def test_backward_rejects_non_scalar():
    p = ad.Parameter(np.ones(2), "p")
    with ad.Tape() as tape:
        t = ad.mul(p.tensor(), 2.0)
        with pytest.raises(ad.ShapeError):
            tape.backward(t)


def test_matmul_shape_error_names_both_shapes():
    a = ad.Tensor(np.zeros((1, 3)))
    b = ad.Tensor(np.zeros((2, 1)))
    with pytest.raises(ad.ShapeError) as e:
        ad.matmul(a, b)
    assert "(1, 3)" in str(e.value) and "(2, 1)" in str(e.value)


def test_add_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError) as e:
        ad.add(ad.Tensor(np.zeros((3, 2))), ad.Tensor(np.zeros((2, 3))))
    assert "(3, 2)" in str(e.value) and "(2, 3)" in str(e.value)


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        ad.log(ad.Tensor([0.0, 1.0]))
    with pytest.raises(ValueError):
        ad.log(ad.Tensor([-1.0]))


def test_atanh_rejects_out_of_range():
    with pytest.raises(ValueError):
        ad.atanh(ad.Tensor([1.0]))


def test_nested_tape_rejected():
    with ad.Tape():
        with pytest.raises(RuntimeError):
            with ad.Tape():
                pass


def test_detach_blocks_gradient():
    p = ad.Parameter(np.array([2.0]), "p")
    with ad.Tape() as tape:
        t = p.tensor()
        loss = ad.sum_all(ad.mul(t.detach(), t))
        tape.backward(loss)
    # d/dp of p_const * p = p_const only
    assert np.allclose(p.grad, [2.0])


def test_frozen_lift_passes_gradient_through_but_not_into():
    # frozen parameter acts like a constant input: downstream grads flow,
    # the parameter itself stays untouched
    w = ad.Parameter(np.array([[3.0]]), "w")
    x = ad.Parameter(np.array([[2.0]]), "x")
    with ad.Tape() as tape:
        out = ad.matmul(x.tensor(), w.tensor(trainable=False))
        tape.backward(ad.sum_all(out))
    assert np.allclose(x.grad, [[3.0]])
    assert np.all(w.grad == 0.0)


def test_permutation_roundtrip_and_scatter():
    rng = np.random.default_rng(2)
    x = ad.Tensor(rng.standard_normal((4, 3)))
    rev = ad.take_cols(ad.take_cols(x, [2, 1, 0]), [2, 1, 0])
    assert np.array_equal(rev.data, x.data)
    sc = ad.put_cols(ad.take_cols(x, [0, 2]), [0, 2], 3)
    assert np.array_equal(sc.data[:, [0, 2]], x.data[:, [0, 2]])
    assert np.all(sc.data[:, 1] == 0.0)


def test_concat_cols_splits_gradient():
    a = ad.Parameter(np.ones((2, 2)), "a")
    b = ad.Parameter(np.ones((2, 3)), "b")
    w = np.arange(10.0).reshape(2, 5)
    with ad.Tape() as tape:
        cat = ad.concat_cols([a.tensor(), b.tensor()])
        loss = ad.sum_all(ad.mul(cat, ad.Tensor(w)))
        tape.backward(loss)
    assert np.array_equal(a.grad, w[:, :2])
    assert np.array_equal(b.grad, w[:, 2:])


def test_clamp_gradient_zero_where_active():
    p = ad.Parameter(np.array([-2.0, 0.5, 2.0]), "p")
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.clamp(p.tensor(), -1.0, 1.0))
        tape.backward(loss)
    assert np.array_equal(p.grad, [0.0, 1.0, 0.0])


def _mlp_mse_setup(seed):
    rng = np.random.default_rng(seed)
    net = MLP(3, 2, 8, 2, rng, "net")
    x = rng.standard_normal((10, 3))
    y = rng.standard_normal((10, 2))

    def loss_fn():
        pred = net(ad.Tensor(x))
        diff = ad.sub(pred, ad.Tensor(y))
        return ad.mean_all(ad.mul(diff, diff))

    return loss_fn, net.parameters()


def test_mlp_gradients_match_central_differences():
    loss_fn, params = _mlp_mse_setup(3)
    report = ad.grad_check(loss_fn, params, step=1e-6, tolerance=1e-6)
    assert report["ok"], report["failures"]


def test_grad_check_zero_dependence():
    p = ad.Parameter(np.array([1.0, 2.0]), "p")

    def loss_fn():
        return ad.sum_all(ad.Tensor(np.zeros(2)))

    report = ad.grad_check(loss_fn, [p])
    assert report["ok"]
    assert report["errors"]["p"] == 0.0


def test_grad_check_reports_non_finite_loss():
    p = ad.Parameter(np.array([1.0]), "p")

    def loss_fn():
        return ad.Tensor(np.float64("inf"))

    report = ad.grad_check(loss_fn, [p])
    assert not report["ok"]
    assert any("non-finite" in f for f in report["failures"])


OPS = {
    "add": lambda t, c: ad.add(t, ad.Tensor(c)),
    "sub": lambda t, c: ad.sub(ad.Tensor(c), t),
    "mul": lambda t, c: ad.mul(t, ad.Tensor(c)),
    "neg": lambda t, c: ad.neg(t),
    "matmul": lambda t, c: ad.matmul(t, ad.Tensor(c[:3].T.copy())),
    "tanh": lambda t, c: ad.tanh(t),
    "exp": lambda t, c: ad.exp(t),
    "abs": lambda t, c: ad.absolute(t),
    "relu": lambda t, c: ad.relu(t),
    "reshape": lambda t, c: ad.reshape(t, (2, 6)),
    "sum_cols": lambda t, c: ad.sum_cols(t),
    "take": lambda t, c: ad.take_cols(t, [2, 0, 1]),
    "put": lambda t, c: ad.put_cols(t, [4, 2, 0], 5),
    "concat": lambda t, c: ad.concat_cols([t, ad.Tensor(c)]),
}


@pytest.mark.parametrize("opname", sorted(OPS))
@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients_twenty_seeds(opname, seed):
    rng = np.random.default_rng(1000 + seed)
    p = ad.Parameter(rng.standard_normal((4, 3)) * 0.8, "p")
    c = rng.standard_normal((4, 3))
    op = OPS[opname]

    def loss_fn():
        out = op(p.tensor(), c)
        return ad.mean_all(ad.mul(out, out))

    report = ad.grad_check(loss_fn, [p], step=1e-6, tolerance=1e-5)
    assert report["ok"], (opname, seed, report["failures"])


@pytest.mark.parametrize("seed", range(20))
def test_bounded_input_gradients_twenty_seeds(seed):
    # log needs positive inputs, atanh needs (-1,1), clamp needs interior
    # points away from its corners
    rng = np.random.default_rng(2000 + seed)
    p = ad.Parameter(rng.uniform(-0.9, 0.9, (3, 3)), "p")

    def loss_fn():
        t = p.tensor()
        out = ad.add(ad.log(ad.add(ad.exp(t), 0.5)),
                     ad.add(ad.atanh(ad.mul(t, 0.9)), ad.clamp(t, -0.95, 0.95)))
        return ad.mean_all(ad.mul(out, out))

    report = ad.grad_check(loss_fn, [p], step=1e-6, tolerance=1e-5)
    assert report["ok"], report["failures"]


def test_adam_zero_gradient_no_motion():
    p = ad.Parameter(np.array([1.0, -1.0]), "p")
    opt = ad.Adam([p], lr=1e-2)
    opt.step()
    assert np.array_equal(p.value, [1.0, -1.0])


def test_adam_first_step_moves_by_learning_rate():
    p = ad.Parameter(np.array([0.0]), "p")
    opt = ad.Adam([p], lr=3e-4)
    p.grad[:] = 1.0
    opt.step()
    assert abs(p.value[0] + 3e-4) < 1e-10
    assert np.all(p.grad == 0.0)


def test_adam_decoupled_weight_decay_shrinks_values():
    p = ad.Parameter(np.array([2.0]), "p")
    opt = ad.Adam([p], lr=1e-1, weight_decay=1e-1)
    p.grad[:] = 0.0
    opt.step()
    # zero gradient: only the decay term acts, v stays 0 so no Adam motion
    assert abs(p.value[0] - 2.0 * (1.0 - 1e-2)) < 1e-12


def test_adam_skips_non_finite_gradient(caplog):
    p = ad.Parameter(np.array([1.0]), "p")
    opt = ad.Adam([p], lr=1e-2)
    p.grad[:] = np.nan
    with caplog.at_level(logging.WARNING):
        opt.step()
    assert p.value[0] == 1.0
    assert opt.skipped == 1
    assert opt.step_count == 0
    assert np.all(p.grad == 0.0)
    assert any("skipped" in r.message for r in caplog.records)


def _train_trajectory(seed, steps=30):
    rng = np.random.default_rng(seed)
    net = MLP(2, 1, 8, 2, rng, "net")
    x = rng.standard_normal((16, 2))
    y = rng.standard_normal((16, 1))
    opt = ad.Adam(net.parameters(), lr=1e-3, weight_decay=1e-3)
    snaps = []
    for _ in range(steps):
        with ad.Tape() as tape:
            diff = ad.sub(net(ad.Tensor(x)), ad.Tensor(y))
            tape.backward(ad.mean_all(ad.mul(diff, diff)))
        opt.step()
        snaps.append(np.concatenate([p.value.ravel().copy()
                                     for p in net.parameters()]))
    return snaps


def test_training_trajectory_bit_identical_across_runs():
    a = _train_trajectory(7)
    b = _train_trajectory(7)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa, pb)


def test_training_reduces_loss():
    rng = np.random.default_rng(11)
    net = MLP(2, 1, 16, 2, rng, "net")
    x = rng.standard_normal((64, 2))
    y = (x[:, :1] * x[:, 1:]).copy()
    opt = ad.Adam(net.parameters(), lr=1e-2)
    losses = []
    for _ in range(200):
        with ad.Tape() as tape:
            diff = ad.sub(net(ad.Tensor(x)), ad.Tensor(y))
            loss = ad.mean_all(ad.mul(diff, diff))
            tape.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    assert losses[-1] < 0.25 * losses[0]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_mul_gradient_matches_factors(n, d, seed):
    rng = np.random.default_rng(seed)
    a = ad.Parameter(rng.standard_normal((n, d)), "a")
    b = rng.standard_normal((n, d))
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.mul(a.tensor(), ad.Tensor(b)))
        tape.backward(loss)
    assert np.allclose(a.grad, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(2, 5), st.integers(2, 5),
       st.integers(0, 2**32 - 1))
def test_matmul_gradients_closed_form(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a = ad.Parameter(rng.standard_normal((n, k)), "a")
    b = ad.Parameter(rng.standard_normal((k, m)), "b")
    g = rng.standard_normal((n, m))
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.mul(ad.matmul(a.tensor(), b.tensor()), ad.Tensor(g)))
        tape.backward(loss)
    assert np.allclose(a.grad, g @ b.value.T)
    assert np.allclose(b.grad, a.value.T @ g)
