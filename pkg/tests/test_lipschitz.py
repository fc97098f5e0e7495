import numpy as np
import pytest

from specguard.attention import AttentionWeights, attention_forward
from specguard.errors import ContractError, ShapeError
from specguard.linalg import top_singular_pair
from specguard.lipschitz import (
    block_row_norm_bound,
    bound_from_norms,
    bound_is_valid,
    empirical_local_lipschitz,
    head_report,
    local_lipschitz_bound,
    reports_from_csv,
    reports_from_text,
    reports_to_csv,
    reports_to_text,
    sample_ball,
    sensitivity_linearization_check,
)


def scaled_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X * np.sqrt(d) / np.linalg.norm(X, axis=1, keepdims=True)


def test_zero_weights_give_zero_bound():
    z = np.zeros((3, 2))
    assert local_lipschitz_bound(AttentionWeights(z, z, z), 0, 5, 2.0, 0.1) == 0.0


def test_scalar_identity_example():
    one = np.ones((1, 1))
    w = AttentionWeights(one, one, one)
    assert local_lipschitz_bound(w, 0, 1, 1.0, 0.0) == pytest.approx(4.0, abs=1e-15)
    assert local_lipschitz_bound(w, 0, 1, 1.0, 0.0, scaled=False) == pytest.approx(4.0, abs=1e-15)


def test_bound_matches_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(20):
        sq, sk, sv = rng.uniform(0.1, 3, 3)
        n, dh = rng.integers(1, 10), rng.integers(1, 8)
        a, d0 = rng.uniform(0, 4), rng.uniform(0, 1)
        row = (n + 1) * (a + d0) ** 2 * (sv * sq * sk / np.sqrt(dh) + sv)
        assert bound_from_norms(sq, sk, sv, n, a, d0, dh) == pytest.approx(n * row, rel=1e-12)
        assert bound_from_norms(sq, sk, sv, n, a, d0, dh, aggregation="lemma") == pytest.approx(np.sqrt(n) * row, rel=1e-12)


def test_bound_is_monotone():
    base = dict(sigma_q=1.0, sigma_k=1.5, sigma_v=0.7, n_tokens=4, anchor=2.0, delta0=0.1, head_dim=2)
    b0 = bound_from_norms(**base)
    for key in ("sigma_q", "sigma_k", "sigma_v", "n_tokens", "anchor", "delta0"):
        bumped = dict(base, **{key: base[key] * 2 if key != "n_tokens" else base[key] + 1})
        assert bound_from_norms(**bumped) > b0


def test_bound_argument_checks():
    with pytest.raises(ContractError):
        bound_from_norms(1, 1, 1, 2, 1.0, -0.1)
    with pytest.raises(ValueError):
        bound_from_norms(1, 1, 1, 2, 1.0, 0.1, aggregation="max")


def test_validity_premise():
    assert bound_is_valid(1, 1.0, 0.0)
    assert not bound_is_valid(1, 0.1, 0.1)
    assert bound_is_valid(3, 0.5, 0.0)


def test_premise_matters_for_small_inputs():
    # a single token near zero: the head is linear with norm ||Wv||, but the
    # bound shrinks with ||X||^2 and falls below it once the premise fails
    wv = np.array([[2.0]])
    w = AttentionWeights(np.ones((1, 1)), np.ones((1, 1)), wv)
    X0 = np.array([[0.05]])
    emp = empirical_local_lipschitz(X0, w, 0, 0.05, 200, seed=0)
    bound = local_lipschitz_bound(w, 0, 1, 0.05, 0.05)
    assert not bound_is_valid(1, 0.05, 0.05)
    assert emp.difference_quotient > bound


def test_block_row_bound_examples():
    assert block_row_norm_bound([np.eye(2), np.eye(2)]) == pytest.approx(np.sqrt(2))
    rng = np.random.default_rng(1)
    blocks = [rng.standard_normal((3, k)) for k in (1, 2, 4)]
    assert np.linalg.norm(np.hstack(blocks), 2) <= block_row_norm_bound(blocks) * (1 + 1e-12)
    with pytest.raises(ShapeError):
        block_row_norm_bound([np.ones((2, 2)), np.ones((3, 2))])
    with pytest.raises(ContractError):
        block_row_norm_bound([])


def test_linear_head_ratio_is_below_value_norm():
    rng = np.random.default_rng(2)
    d = 3
    wv = rng.standard_normal((d, 2))
    w = AttentionWeights(np.zeros((d, 2)), np.zeros((d, 2)), wv)
    emp = empirical_local_lipschitz(rng.standard_normal((4, d)), w, 0, 0.5, 300, seed=1)
    assert emp.difference_quotient <= np.linalg.norm(wv, 2) * (1 + 1e-12)


def test_sample_ball_stays_inside():
    rng = np.random.default_rng(3)
    X0 = rng.standard_normal((3, 2))
    pts = sample_ball(X0, 0.3, 500, rng)
    dist = np.sqrt(np.sum((pts - X0) ** 2, axis=(1, 2)))
    assert dist.max() <= 0.3 + 1e-15


def test_empirical_estimates_stay_below_bound():
    rng = np.random.default_rng(4)
    for delta0 in (0.01, 0.1, 1.0):
        n, d, dh = 4, 3, 2
        w = AttentionWeights(*(rng.standard_normal((d, dh)) for _ in range(3)))
        X0 = scaled_rows(rng, n, d)
        emp = empirical_local_lipschitz(X0, w, 0, delta0, 300, seed=5)
        bound = local_lipschitz_bound(w, 0, n, np.linalg.norm(X0), delta0)
        assert emp.difference_quotient <= bound
        assert emp.jacobian_norm <= bound


def test_zero_radius_reports_center_jacobian():
    rng = np.random.default_rng(6)
    w = AttentionWeights(*(rng.standard_normal((2, 2)) for _ in range(3)))
    emp = empirical_local_lipschitz(rng.standard_normal((3, 2)), w, 0, 0.0, 10)
    assert emp.difference_quotient == emp.jacobian_norm


def test_difference_quotient_is_seeded():
    rng = np.random.default_rng(7)
    w = AttentionWeights(*(rng.standard_normal((2, 2)) for _ in range(3)))
    X0 = rng.standard_normal((3, 2))
    assert empirical_local_lipschitz(X0, w, 0, 0.2, 100, seed=9) == empirical_local_lipschitz(X0, w, 0, 0.2, 100, seed=9)


def test_sensitivity_of_affine_maps():
    W = np.diag([3.0, 1.0])
    deltas = [[1e-3, 0.0], [0.0, 1e-3], [0.0, 0.0]]
    assert sensitivity_linearization_check(W, [1.0, -1.0], [0.5, 0.5], deltas) == pytest.approx(3.0, rel=1e-12)
    rng = np.random.default_rng(8)
    W = rng.standard_normal((4, 3))
    ratio = sensitivity_linearization_check(W, np.zeros(4), np.zeros(3), rng.standard_normal((200, 3)))
    assert ratio <= np.linalg.norm(W, 2) * (1 + 1e-12)


def test_reports_round_trip():
    rng = np.random.default_rng(9)
    w = AttentionWeights(*(rng.standard_normal((2, 3, 2)) for _ in range(3)))
    X0 = scaled_rows(rng, 4, 3)
    reps = [head_report(w, 0, 0, 4, 5.0, 0.1), head_report(w, 0, 1, 4, 5.0, 0.1, X0, samples=50, seed=2)]
    assert np.isnan(reps[0].bound_eq9)
    assert reps[1].empirical_quotient <= reps[1].bound_eq9
    assert reps[1].bound_eq10_lemma <= reps[1].bound_eq10 <= reps[1].bound_eq10_unscaled
    for back in (reports_from_text(reports_to_text(reps)), reports_from_csv(reports_to_csv(reps))):
        assert reports_to_text(back) == reports_to_text(reps)


def test_report_matches_forward_scale():
    # sanity: the single-token head is exactly Wv, and the bound covers it
    wv = np.array([[0.5, -1.0]])
    w = AttentionWeights(np.ones((1, 2)), np.ones((1, 2)), wv)
    X0 = np.array([[1.0]])
    out = attention_forward(X0, w).output
    np.testing.assert_allclose(out, X0 @ wv)
    rep = head_report(w, 0, 0, 1, 1.0, 0.0, X0, samples=1)
    assert rep.empirical_max_jacobian_norm == pytest.approx(np.linalg.norm(wv), rel=1e-12)
    assert rep.empirical_max_jacobian_norm <= rep.bound_eq9


def test_sensitivity_examples():
    assert sensitivity_linearization_check(2 * np.eye(3), np.zeros(3), np.ones(3), np.eye(3)) == pytest.approx(2.0, abs=1e-15)
    W = np.diag([3.0, 1.0])
    assert sensitivity_linearization_check(W, np.zeros(2), np.zeros(2), [[1.0, 0.0]]) == 3.0
    assert sensitivity_linearization_check(W, np.zeros(2), np.zeros(2), [[0.0, 1.0]]) == 1.0
    rng = np.random.default_rng(10)
    W = rng.standard_normal((5, 4))
    sigma, _, v = top_singular_pair(W)
    ratio = sensitivity_linearization_check(W, rng.standard_normal(5), rng.standard_normal(4), [v * 1e-3])
    assert abs(ratio - sigma) / sigma < 1e-9


def test_bound_grows_with_radius():
    rng = np.random.default_rng(11)
    w = AttentionWeights(*(rng.standard_normal((3, 2)) for _ in range(3)))
    values = [local_lipschitz_bound(w, 0, 4, 2.0, d) for d in np.linspace(0, 2, 9)]
    assert all(b > a for a, b in zip(values, values[1:]))
