"""Self-check suites comparing each numerical routine with an independent oracle.

Each suite returns a ``SuiteResult`` with its worst error against the
suite's tolerance.  Suites are small enough to run on every build.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .attacks import AttackConfig, pgd, project
from .attention import AttentionWeights, attention_jacobian_full, finite_difference_jacobian
from .lipschitz import empirical_local_lipschitz, local_lipschitz_bound
from .linalg import PowerIterState, power_iteration, svd_oracle, top_singular_pair
from .msvp import MsvpConfig, init_states, msvp_loss


class UsageError(ValueError):
    pass


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""


def gapped_matrix(rng, m, n, ratio):
    """Random singular vectors with spectrum ``1, ratio, ratio^2 ...``."""
    k = min(m, n)
    u, _ = np.linalg.qr(rng.standard_normal((m, k)))
    v, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return (u * ratio ** np.arange(k)) @ v.T


def suite_power_iteration(seed=0, count=20) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        m, n = rng.integers(4, 33, size=2)
        a = gapped_matrix(rng, m, n, rng.uniform(0.3, 0.9)) * rng.uniform(0.5, 5.0)
        sigma, _ = power_iteration(a, PowerIterState.random(m, n, rng), 200)
        ref = svd_oracle(a)[0]
        worst = max(worst, abs(sigma - ref) / ref)
    return SuiteResult("power_iteration", worst <= 1e-9, worst, 1e-9)


def _op_cases(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    v = rng.standard_normal(4)
    labels = np.array([1, 0, 3])
    probes = {}

    def w(node):
        # random linear read-out so every output entry reaches the gradient
        if node.shape not in probes:
            probes[node.shape] = rng.standard_normal(node.shape)
        return ag.sum(ag.mul(node, probes[node.shape]))

    return [
        ("add", a, lambda x: w(ag.add(x, a[::-1]))),
        ("sub", a, lambda x: w(ag.sub(x, a ** 2))),
        ("mul", a, lambda x: w(ag.mul(x, x))),
        ("scale", a, lambda x: w(ag.scale(x, -1.7))),
        ("matmul", a, lambda x: w(ag.matmul(x, b))),
        ("transpose", a, lambda x: w(ag.transpose(x))),
        ("permute", a.reshape(3, 2, 2), lambda x: w(ag.permute(x, (2, 0, 1)))),
        ("reshape", a, lambda x: w(ag.reshape(x, (2, 6)))),
        ("sum", a, lambda x: ag.scale(ag.sum(x), 0.5)),
        ("row_softmax", a, lambda x: w(ag.row_softmax(x))),
        ("layer_norm", a, lambda x: w(ag.layer_norm(x, v + 1.0, v))),
        ("gelu", a, lambda x: w(ag.gelu(x))),
        ("mean_pool", a, lambda x: w(ag.mean_pool(x, axis=0))),
        ("cross_entropy", a, lambda x: ag.cross_entropy(x, labels)),
    ]


def suite_autograd(seed=0) -> SuiteResult:
    """Every registered elementary op against central differences; failing ops are named."""
    rng = np.random.default_rng(seed)
    worst, bad = 0.0, []
    tol = 1e-5
    for op, x, f in _op_cases(rng):
        try:
            err = ag.finite_diff_check(f, x)
        except Exception as exc:  # a corrupted rule may fail loudly
            err = float("inf")
            bad.append(f"{op} ({type(exc).__name__})")
            worst = err
            continue
        worst = max(worst, err)
        if not err <= tol:
            bad.append(op)
    detail = "failing ops: " + ", ".join(bad) if bad else ""
    return SuiteResult("autograd", not bad, worst, tol, detail=detail)


def suite_jacobian(seed=0, count=10) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        n, d, dh = rng.integers(1, 7), rng.integers(1, 5), rng.integers(1, 5)
        w = AttentionWeights(*(rng.standard_normal((d, dh)) for _ in range(3)))
        X = rng.standard_normal((n, d))
        ja = attention_jacobian_full(X, w)
        jf = finite_difference_jacobian(X, w)
        worst = max(worst, float(np.max(np.abs(ja - jf)) / max(np.max(np.abs(jf)), 1e-12)))
    return SuiteResult("jacobian", worst <= 1e-6, worst, 1e-6)


def suite_bound(seed=0, count=10, samples=200) -> SuiteResult:
    """Largest empirical / bound ratio at token scale (rows of norm sqrt(d))."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c in range(count):
        n, d, dh = rng.integers(1, 7), rng.integers(1, 5), rng.integers(1, 5)
        w = AttentionWeights(*(rng.standard_normal((d, dh)) for _ in range(3)))
        X0 = rng.standard_normal((n, d))
        X0 *= np.sqrt(d) / np.linalg.norm(X0, axis=1, keepdims=True)
        delta0 = (0.01, 0.1, 1.0)[c % 3]
        bound = local_lipschitz_bound(w, 0, n, np.linalg.norm(X0), delta0)
        emp = empirical_local_lipschitz(X0, w, 0, delta0, samples, seed=c)
        worst = max(worst, max(emp) / bound)
    return SuiteResult("bound", worst <= 1.0, worst, 1.0)


def suite_projection(seed=0) -> SuiteResult:
    """PGD iterates stay in the ball and in [0, 1]; projection is idempotent."""
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((12, 3))
    model = lambda x: ag.matmul(ag.reshape(x, (x.shape[0], 12)), W)  # noqa: E731
    x = rng.uniform(0, 1, (5, 3, 2, 2))
    y = np.array([0, 1, 2, 0, 1])
    worst = 0.0
    for norm in ("linf", "l2"):
        cfg = AttackConfig("pgd", 0.1, alpha=0.05, steps=8, norm=norm, random_start=True)

        def check(k, delta, norm=norm):
            nonlocal worst
            flat = delta.reshape(len(delta), -1)
            size = np.abs(flat).max(axis=1) if norm == "linf" else np.linalg.norm(flat, axis=1)
            worst = max(worst, float(np.max(size)) - 0.1)
            worst = max(worst, float(-np.min(x + delta)), float(np.max(x + delta)) - 1.0)

        pgd(model, x, y, cfg, rng, on_step=check)
        d = rng.standard_normal((5, 12))
        p1 = project(d, 0.1, norm, batched=True)
        worst = max(worst, float(np.max(np.abs(project(p1, 0.1, norm, batched=True) - p1))))
    return SuiteResult("projection", worst <= 1e-12, max(worst, 0.0), 1e-12)


def suite_msvp(seed=0, count=5) -> SuiteResult:
    """Penalty gradient vs central differences of the oracle sigma^2."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-6
    for _ in range(count):
        m, n = rng.integers(3, 9, size=2)
        a = gapped_matrix(rng, m, n, 0.5) * rng.uniform(0.5, 2.0)
        weights = {(0, "q"): ag.leaf(a)}
        states = init_states(weights, rng)
        cfg = MsvpConfig(1.0, 0.0, 0.0, iters_per_step=200)
        loss = msvp_loss(weights, cfg, states)
        ag.backward(loss)
        g = weights[(0, "q")].grad
        fd = np.empty_like(a)
        for idx in np.ndindex(a.shape):
            e = np.zeros_like(a)
            e[idx] = h
            fd[idx] = (top_singular_pair(a + e)[0] ** 2 - top_singular_pair(a - e)[0] ** 2) / (2 * h)
        worst = max(worst, float(np.max(np.abs(g - fd))))
    return SuiteResult("msvp", worst <= 1e-4, worst, 1e-4)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "power_iteration": suite_power_iteration,
    "autograd": suite_autograd,
    "jacobian": suite_jacobian,
    "bound": suite_bound,
    "projection": suite_projection,
    "msvp": suite_msvp,
}


def run_suites(names=None) -> list[SuiteResult]:
    """Run the named suites (all when ``names`` is None), timing each one."""
    if names is None:
        names = list(SUITES)
    names = list(names)
    if not names:
        raise UsageError("no suites selected")
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UsageError(f"unknown suites: {', '.join(unknown)}")
    out = []
    for name in names:
        t0 = time.perf_counter()
        res = SUITES[name]()
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out


def format_table(results) -> str:
    lines = ["suite,status,max_error,tolerance,seconds,detail"]
    for r in results:
        lines.append(f"{r.name},{'pass' if r.passed else 'FAIL'},{r.max_error:.3e},{r.tolerance:.0e},"
                     f"{r.seconds:.3f},{r.detail}")
    return "\n".join(lines) + "\n"
