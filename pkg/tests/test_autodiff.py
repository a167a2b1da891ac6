import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htan_spd import autodiff as ad
from htan_spd.autodiff import Tape, Tensor, backward
from htan_spd.gradcheck import check_gradients, relative_error


def test_relu_values():
    y = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])


def test_matmul_identity():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 5)))
    y = ad.matmul(Tensor(np.eye(3)), a)
    np.testing.assert_array_equal(y.data, a.data)


def test_softmax_ce_uniform():
    loss = ad.softmax_cross_entropy(Tensor([0.0, 0.0, 0.0]), 1)
    assert loss.data == pytest.approx(math.log(3.0), abs=1e-12)


def test_sum_of_squares_grad():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        root = ad.sum_all(ad.mul(x, x))
    backward(tape, root)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_dead_relu_grad():
    x = Tensor(-1.0)
    with Tape() as tape:
        root = ad.relu(x)
    backward(tape, root)
    assert x.grad == 0.0


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    a, b = Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4)))

    def run():
        return ad.sum_all(ad.tanh(ad.matmul(a, b))).data.tobytes()

    assert run() == run()


def test_concat_grad_splits_exactly():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0, 5.0])
    w = Tensor(np.arange(5.0))
    with Tape() as tape:
        root = ad.sum_all(ad.mul(ad.concat([a, b]), w))
    backward(tape, root)
    np.testing.assert_array_equal(a.grad, w.data[:2])
    np.testing.assert_array_equal(b.grad, w.data[2:])


def test_double_backward_rejected():
    x = Tensor(2.0)
    with Tape() as tape:
        root = ad.mul(x, x)
    backward(tape, root)
    with pytest.raises(ad.TapeError):
        backward(tape, root)


def test_non_scalar_root_rejected():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ad.TapeError):
        backward(tape, y)


def test_root_not_on_tape_rejected():
    x = Tensor(1.0)
    with Tape() as tape:
        ad.mul(x, x)
    with pytest.raises(ad.TapeError):
        backward(tape, Tensor(3.0))


def test_shape_mismatch_rejected_before_compute():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.maximum(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_log_domain_violation_reports_index():
    with pytest.raises(ad.DomainError, match="index 2"):
        ad.log(Tensor([1.0, 2.0, -3.0]))


def test_div_by_zero_reports_index():
    with pytest.raises(ad.DomainError, match="index 1"):
        ad.div(Tensor([1.0, 2.0]), Tensor([4.0, 0.0]))


def test_maximum_tie_routes_to_first():
    a = Tensor([1.0, 5.0])
    b = Tensor([1.0, 2.0])
    with Tape() as tape:
        root = ad.sum_all(ad.maximum(a, b))
    backward(tape, root)
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_row_broadcast_add_backward():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    b = Tensor([1.0, 2.0, 3.0])

    def build():
        return ad.sum_all(ad.tanh(ad.add(x, b)))

    report = check_gradients(build, {"x": x, "b": b}, coords_per_leaf=6)
    assert max(report.values()) < 1e-6


def _random_graph_loss(params, ops_seed):
    """Small fixed-topology scalar graph touching most primitives."""
    w, v, b, c, s = params
    h = ad.tanh(ad.add(ad.matmul(w, v), b))
    h2 = ad.sigmoid(ad.mul(h, c))
    h3 = ad.concat([h2, ad.relu(v)])
    q = ad.exp(ad.scale(ad.mean_all(h3), 0.3))
    r = ad.log(ad.add(ad.sum_all(ad.absval(ad.sub(h, c))), Tensor(1.5)))
    m = ad.sum_all(ad.maximum(h, v))
    return ad.add(ad.add(q, r), ad.mul(m, s))


@pytest.mark.parametrize("seed", range(100))
def test_random_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = (
        Tensor(rng.normal(size=(3, 3))),
        Tensor(rng.normal(size=3)),
        Tensor(rng.normal(size=3)),
        Tensor(rng.normal(size=3)),
        Tensor(rng.normal()),
    )
    names = dict(zip("wvbcs", params))
    report = check_gradients(lambda: _random_graph_loss(params, seed), names,
                             coords_per_leaf=4, rng=rng)
    assert max(report.values()) < 1e-6, report


def test_five_param_graph_tight_tolerance():
    rng = np.random.default_rng(42)
    xs = [Tensor(rng.normal()) for _ in range(5)]

    def build():
        a = ad.mul(xs[0], xs[1])
        b = ad.sigmoid(ad.add(a, xs[2]))
        c = ad.tanh(ad.mul(b, xs[3]))
        return ad.add(ad.mul(c, xs[4]), ad.exp(ad.scale(xs[0], 0.1)))

    report = check_gradients(build, {f"x{i}": x for i, x in enumerate(xs)},
                             coords_per_leaf=1)
    assert max(report.values()) < 1e-6


def test_softmax_ce_gradient():
    rng = np.random.default_rng(7)
    logits = Tensor(rng.normal(size=(4, 3)))
    targets = rng.integers(0, 3, size=4)

    def build():
        return ad.mean_all(ad.softmax_cross_entropy(logits, targets))

    report = check_gradients(build, {"logits": logits}, coords_per_leaf=8)
    assert max(report.values()) < 1e-6


def test_matmul_vector_cases_gradients():
    rng = np.random.default_rng(11)
    a = Tensor(rng.normal(size=(3, 4)))
    v = Tensor(rng.normal(size=4))
    u = Tensor(rng.normal(size=3))

    def build():
        mv = ad.matmul(a, v)            # (3,)
        vm = ad.matmul(u, a)            # (4,)
        dot = ad.matmul(v, v)           # ()
        return ad.add(ad.add(ad.sum_all(ad.tanh(mv)), ad.sum_all(ad.sigmoid(vm))), dot)

    report = check_gradients(build, {"a": a, "v": v, "u": u}, coords_per_leaf=5)
    assert max(report.values()) < 1e-6


def test_stack_reshape_diag_transpose_gradients():
    rng = np.random.default_rng(13)
    v = Tensor(rng.normal(size=4))
    w = Tensor(rng.normal(size=(4, 4)))

    def build():
        d = ad.diag_embed(v)
        s = ad.stack([v, v], axis=0)
        r = ad.reshape(s, (8,))
        return ad.add(ad.sum_all(ad.mul(ad.transpose(d), w)), ad.sum_all(ad.exp(ad.scale(r, 0.2))))

    report = check_gradients(build, {"v": v, "w": w}, coords_per_leaf=6)
    assert max(report.values()) < 1e-6


def test_grad_accumulates_over_fanout():
    x = Tensor(3.0)
    with Tape() as tape:
        root = ad.add(ad.mul(x, x), ad.mul(x, x))
    backward(tape, root)
    assert x.grad == pytest.approx(12.0)


def test_nan_input_rejected_at_construction():
    with pytest.raises(ad.DomainError):
        Tensor([1.0, float("nan")])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_relu_idempotent_and_nonnegative(values):
    y = ad.relu(Tensor(values))
    assert np.all(y.data >= 0.0)
    np.testing.assert_array_equal(ad.relu(y).data, y.data)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sum_matches_fsum(seed):
    vals = np.random.default_rng(seed).normal(size=17)
    total = ad.sum_all(Tensor(vals)).data
    assert relative_error(float(total), math.fsum(vals)) < 1e-12


def test_tapes_are_thread_isolated():
    import threading

    outcomes = {}

    def worker(tag):
        x = Tensor(np.random.default_rng(tag).normal(size=32))
        for _ in range(100):
            with Tape() as tape:
                root = ad.sum_all(ad.mul(x, x))
            x.zero_grad()
            backward(tape, root)
            if len(tape.nodes) != 2:  # a foreign thread's ops leaked in
                outcomes[tag] = False
                return
        outcomes[tag] = np.allclose(x.grad, 2.0 * x.data)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(outcomes.values()) and len(outcomes) == 4
