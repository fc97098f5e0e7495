import numpy as np
import pytest

from specguard import autograd as ag
from specguard.attacks import AttackConfig, attack, fgsm, loss_and_grad, parse_epsilon, pgd, project
from specguard.errors import ContractError


def linear_model(seed=0, d=12, classes=4):
    w = np.random.default_rng(seed).standard_normal((d, classes))
    return lambda x: ag.matmul(ag.reshape(x, (x.shape[0], -1)), w)


def batch(seed=1, n=6, shape=(3, 2, 2)):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.2, 0.8, (n,) + shape), rng.integers(0, 4, n)


def test_parse_epsilon():
    assert parse_epsilon("8/255") == 8 / 255
    assert parse_epsilon("0.03") == 0.03
    assert parse_epsilon(2) == 2.0


def test_zero_epsilon_is_identity():
    x, y = batch()
    model = linear_model()
    np.testing.assert_array_equal(fgsm(model, x, y, AttackConfig("fgsm", 0.0)), x)
    np.testing.assert_array_equal(pgd(model, x, y, AttackConfig("pgd", 0.0, alpha=0.1, steps=5)), x)


def test_single_step_pgd_equals_fgsm():
    x, y = batch(2)
    model = linear_model(3)
    eps = 8 / 255
    a = fgsm(model, x, y, AttackConfig("fgsm", eps))
    b = pgd(model, x, y, AttackConfig("pgd", eps, alpha=eps, steps=1))
    assert np.array_equal(a, b)


def test_pgd_iterates_stay_in_the_ball():
    x, y = batch(3)
    model = linear_model(4)
    for norm in ("linf", "l2"):
        cfg = AttackConfig("pgd", 0.1, alpha=0.07, steps=10, norm=norm, random_start=True)
        seen = []

        def check(k, delta):
            if norm == "linf":
                assert np.max(np.abs(delta)) <= 0.1 + 1e-12
            else:
                assert np.max(np.sqrt(np.sum(delta ** 2, axis=(1, 2, 3)))) <= 0.1 + 1e-12
            assert np.all(x + delta >= 0) and np.all(x + delta <= 1)
            seen.append(k)

        pgd(model, x, y, cfg, np.random.default_rng(0), on_step=check)
        assert seen == list(range(10))


def test_attacks_raise_the_loss():
    x, y = batch(4)
    model = linear_model(5)
    clean, _ = loss_and_grad(model, x, y)
    for cfg in (AttackConfig("fgsm", 0.05), AttackConfig("pgd", 0.05, steps=10)):
        adv, _ = loss_and_grad(model, attack(model, x, y, cfg), y)
        assert adv > clean


def test_projection():
    d = np.array([[0.5, -2.0], [0.1, 0.0]])
    np.testing.assert_array_equal(project(d, 0.3), [[0.3, -0.3], [0.1, 0.0]])
    p = project(d[None], 1.0, "l2", batched=True)
    assert np.sqrt(np.sum(p ** 2)) == pytest.approx(1.0, abs=1e-15)
    small = np.array([[0.1, 0.1]])
    np.testing.assert_array_equal(project(small, 1.0, "l2"), small)
    np.testing.assert_array_equal(project(np.zeros((2, 2)), 0.5, "l2", batched=True), 0.0)
    with pytest.raises(ContractError):
        project(d, -1.0)


def test_projection_is_idempotent():
    rng = np.random.default_rng(5)
    d = rng.standard_normal((4, 3, 3))
    for norm in ("linf", "l2"):
        once = project(d, 0.4, norm, batched=True)
        np.testing.assert_allclose(project(once, 0.4, norm, batched=True), once, atol=1e-15)


def test_config_validation_and_names():
    with pytest.raises(ContractError):
        AttackConfig("cw", 0.1)
    with pytest.raises(ContractError):
        AttackConfig("pgd", 0.1, steps=0)
    with pytest.raises(ContractError):
        AttackConfig("pgd", -0.1)
    cfg = AttackConfig("pgd", 0.1, steps=20)
    assert cfg.name == "pgd-20"
    assert cfg.step_size == pytest.approx(2.5 * 0.1 / 20)
    assert cfg.with_epsilon(0.2).epsilon == 0.2
    with pytest.raises(ContractError):
        fgsm(linear_model(), *batch(), cfg)


def test_random_start_is_seeded():
    x, y = batch(6)
    model = linear_model(7)
    cfg = AttackConfig("pgd", 0.1, steps=3, random_start=True)
    a = pgd(model, x, y, cfg, np.random.default_rng(1))
    b = pgd(model, x, y, cfg, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


def test_fgsm_on_a_logistic_model_matches_the_hand_gradient():
    # two-class logits (0, w.x): d loss / dx = (p1 - y) w, so the step is eps * sign((p1 - y) w)
    w = np.array([0.5, -1.0, 0.0, 2.0])
    model = lambda x: ag.matmul(ag.reshape(x, (x.shape[0], -1)), np.stack([np.zeros(4), w], 1))  # noqa: E731
    x = np.full((2, 1, 2, 2), 0.5)
    y = np.array([0, 1])
    out = fgsm(model, x, y, AttackConfig("fgsm", 0.1))
    np.testing.assert_allclose((out - x).reshape(2, 4), [0.1 * np.sign(w), -0.1 * np.sign(w)], atol=1e-15)
    # a zero weight gives a zero gradient entry, and that pixel stays put
    assert np.all(out.reshape(2, 4)[:, 2] == 0.5)


def test_l2_pgd_solves_the_linear_inner_problem_in_one_step():
    rng = np.random.default_rng(8)
    w = rng.standard_normal((6, 2))
    model = lambda x: ag.matmul(ag.reshape(x, (x.shape[0], -1)), w)  # noqa: E731
    x = rng.uniform(0.4, 0.6, (1, 1, 2, 3))
    y = np.array([0])
    eps = 0.05
    _, g = loss_and_grad(model, x, y)
    out = pgd(model, x, y, AttackConfig("pgd", eps, alpha=eps, steps=1, norm="l2"))
    np.testing.assert_allclose(out - x, eps * g / np.linalg.norm(g), atol=1e-15)


def test_projection_examples():
    eps = 0.1
    np.testing.assert_allclose(project(np.array([2 * eps, -3 * eps]), eps), [eps, -eps])
    d = np.random.default_rng(9).standard_normal(7)
    d *= 5 * eps / np.linalg.norm(d)
    assert abs(np.linalg.norm(project(d, eps, "l2")) - eps) <= 1e-12


def test_oversized_start_is_projected():
    x, y = batch(10)
    model = linear_model(11)
    seen = []
    pgd(model, x, y, AttackConfig("pgd", 0.05, steps=1, alpha=1e-9), init=np.full_like(x, 0.3),
        on_step=lambda k, d: seen.append(np.max(np.abs(d))))
    assert seen[0] <= 0.05 + 1e-12


def test_attacks_raise_per_sample_loss_on_a_trained_model():
    rng = np.random.default_rng(12)
    centres = rng.uniform(0.2, 0.8, (3, 12))
    y = np.repeat(np.arange(3), 40)
    x = np.clip(centres[y] + rng.normal(0, 0.05, (120, 12)), 0, 1).reshape(120, 3, 2, 2)
    w = np.zeros((12, 3))
    for _ in range(300):
        xn = x.reshape(120, -1)
        z = xn @ w
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        w -= 0.5 * xn.T @ (p - np.eye(3)[y]) / 120
    model = lambda v: ag.matmul(ag.reshape(v, (v.shape[0], -1)), w)  # noqa: E731

    def per_sample_loss(v):
        z = v.reshape(len(v), -1) @ w
        z = z - z.max(1, keepdims=True)
        return np.log(np.exp(z).sum(1)) - z[np.arange(len(v)), y]

    adv = pgd(model, x, y, AttackConfig("pgd", 4 / 255, steps=10))
    assert np.mean(per_sample_loss(adv) >= per_sample_loss(x)) >= 0.95
