import copy

import numpy as np
import pytest

from specguard import autograd as ag
from specguard.errors import ContractError
from specguard.linalg import PowerIterState, svd_oracle
from specguard.msvp import MsvpConfig, init_states, msvp_loss, total_objective
from specguard.verify import gapped_matrix


def converged_states(weights, rng, iters=500):
    states = init_states(weights, rng)
    msvp_loss(weights, MsvpConfig(iters_per_step=iters), states)
    return states


def test_gradient_matches_oracle_finite_differences():
    rng = np.random.default_rng(0)
    w = gapped_matrix(rng, 6, 5, 0.5) * 1.7
    weights = {(0, "q"): w}
    states = converged_states(weights, rng)
    node = ag.leaf(w)
    ag.backward(msvp_loss({(0, "q"): node}, MsvpConfig(1.0, 0.0, 0.0), states))
    h = 1e-6
    fd = np.empty_like(w)
    for idx in np.ndindex(w.shape):
        e = np.zeros_like(w)
        e[idx] = h
        fd[idx] = (svd_oracle(w + e)[0] ** 2 - svd_oracle(w - e)[0] ** 2) / (2 * h)
    assert np.max(np.abs(node.grad - fd)) < 1e-4


def test_gradient_is_rank_one():
    rng = np.random.default_rng(1)
    stack = rng.standard_normal((3, 4, 2))
    node = ag.leaf(stack)
    states = init_states({(0, "v"): stack}, rng)
    loss = msvp_loss({(0, "v"): node}, MsvpConfig.uniform(0.5), states)
    ag.backward(loss)
    for h in range(3):
        st_ = states[(0, h, "v")]
        np.testing.assert_allclose(node.grad[h], 2 * 0.5 * st_.sigma * np.outer(st_.u, st_.v), atol=1e-15)


def test_loss_is_weighted_sum_of_squares():
    rng = np.random.default_rng(2)
    weights = {(0, "q"): rng.standard_normal((2, 3, 3)), (1, "k"): rng.standard_normal((3, 3))}
    states = converged_states(weights, rng)
    cfg = MsvpConfig(0.3, 0.7, 0.0, iters_per_step=50)
    expected = 0.3 * sum(svd_oracle(m)[0] ** 2 for m in weights[(0, "q")]) + 0.7 * svd_oracle(weights[(1, "k")])[0] ** 2
    assert float(msvp_loss(weights, cfg, states).value) == pytest.approx(expected, rel=1e-10)


def test_zero_lambda_and_disabled():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((4, 4))
    node = ag.leaf(w)
    states = init_states({(0, "q"): w}, rng)
    loss = msvp_loss({(0, "q"): node}, MsvpConfig.uniform(0.0), states)
    assert float(loss.value) == 0.0
    ag.backward(loss)
    np.testing.assert_array_equal(node.grad, 0.0)
    off = msvp_loss({(0, "q"): ag.leaf(w)}, MsvpConfig(enabled=False), {})
    assert float(off.value) == 0.0


def test_state_persists_across_calls():
    rng = np.random.default_rng(4)
    w = gapped_matrix(rng, 5, 5, 0.6)
    states = init_states({(0, "k"): w}, rng)
    sigmas = []
    for _ in range(30):
        msvp_loss({(0, "k"): w}, MsvpConfig(), states)
        sigmas.append(states[(0, 0, "k")].sigma)
    assert all(b >= a - 1e-12 for a, b in zip(sigmas, sigmas[1:]))
    assert sigmas[-1] == pytest.approx(svd_oracle(w)[0], rel=1e-6)


def test_missing_state_is_an_error():
    with pytest.raises(ContractError):
        msvp_loss({(0, "q"): np.eye(2)}, MsvpConfig(), {})


def test_config_validation():
    with pytest.raises(ContractError):
        MsvpConfig(-1.0, 0.0, 0.0)
    with pytest.raises(ContractError):
        MsvpConfig(iters_per_step=0)
    assert MsvpConfig.uniform(0.2).weight("v") == 0.2


def test_init_is_reproducible():
    weights = {(1, "v"): np.ones((2, 3, 4)), (0, "q"): np.ones((3, 4))}
    a = init_states(weights, np.random.default_rng(5))
    b = init_states(weights, np.random.default_rng(5))
    assert sorted(a) == [(0, 0, "q"), (1, 0, "v"), (1, 1, "v")]
    for k in a:
        np.testing.assert_array_equal(a[k].u, b[k].u)
        assert isinstance(a[k], PowerIterState)


def test_pure_penalty_descent_is_monotone():
    rng = np.random.default_rng(6)
    w = {(0, kind): rng.standard_normal((2, 4, 4)) for kind in "qkv"}
    states = converged_states(w, rng)
    prev = {k: [svd_oracle(m)[0] for m in v] for k, v in w.items()}
    for _ in range(20):
        nodes = {k: ag.leaf(v) for k, v in w.items()}
        ag.backward(total_objective(ag.Node(0.0), msvp_loss(nodes, MsvpConfig.uniform(0.05), states)))
        for k in w:
            w[k] = w[k] - 0.5 * nodes[k].grad
            now = [svd_oracle(m)[0] for m in w[k]]
            assert all(b <= a + 1e-8 for a, b in zip(prev[k], now))
            prev[k] = now


def test_total_objective_examples():
    cls = ag.cross_entropy(np.zeros((1, 10)), np.array([3]))
    assert float(total_objective(cls, ag.Node(2.0)).value) == pytest.approx(np.log(10) + 2.0, abs=1e-15)
    off = msvp_loss({(0, "q"): np.eye(3)}, MsvpConfig(enabled=False), {})
    assert float(total_objective(cls, off).value) == float(cls.value)


def test_gradient_additivity():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((4, 3))
    x, y = rng.standard_normal((5, 4)), rng.integers(0, 3, 5)
    states = converged_states({(0, "q"): w}, rng)
    cfg = MsvpConfig.uniform(0.3, iters_per_step=1)

    def grads(parts):
        node = ag.leaf(w)
        terms = {"cls": lambda: ag.cross_entropy(ag.matmul(x, node), y),
                 "msvp": lambda: msvp_loss({(0, "q"): node}, cfg, copy.deepcopy(states))}
        built = [terms[p]() for p in parts]
        ag.backward(built[0] if len(built) == 1 else total_objective(*built))
        return node.grad

    np.testing.assert_allclose(grads(["cls", "msvp"]), grads(["cls"]) + grads(["msvp"]), atol=1e-15)


def test_single_small_step_lowers_sigma():
    rng = np.random.default_rng(8)
    for _ in range(10):
        w = rng.standard_normal((5, 4))
        lam = rng.uniform(0.1, 2.0)
        states = converged_states({(0, "v"): w}, rng, iters=1)
        node = ag.leaf(w)
        ag.backward(msvp_loss({(0, "v"): node}, MsvpConfig.uniform(lam), states))
        sigma = svd_oracle(w)[0]
        step = 0.9 / (4 * lam * sigma)
        assert svd_oracle(w - step * node.grad)[0] < sigma
