"""Dense matrix kernels, power iteration and a Jacobi-based SVD oracle.

Matrices are plain 2-D numpy arrays.  The oracle (``svd_oracle``) is a
self-contained cyclic Jacobi eigensolver applied to the Gram matrix; it is
meant for verification at desk scale and is deliberately independent of
LAPACK.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError, SizeError

ORACLE_CAP = 256

_FLOAT_DTYPE = np.float64


def set_float_width(bits: int) -> None:
    """Select the default float width (64 or 32) for new parameters and data."""
    global _FLOAT_DTYPE
    if bits == 64:
        _FLOAT_DTYPE = np.float64
    elif bits == 32:
        _FLOAT_DTYPE = np.float32
    else:
        raise ValueError(f"unsupported float width {bits}")


def float_dtype():
    return _FLOAT_DTYPE


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} has non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.sum(a * a)))


# ---------------------------------------------------------------------------
# Jacobi oracle

def _round_robin(n: int):
    """Tournament schedule: ``n - 1`` rounds of disjoint index pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        pairs = [(players[i], players[n - 1 - i]) for i in range(half)]
        p = np.array([min(a, b) for a, b in pairs])
        q = np.array([max(a, b) for a, b in pairs])
        rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(s: np.ndarray, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every (p, q) pair once, using the round-robin ordering
    so that the rotations of one round act on disjoint index pairs and can be
    applied together.  Returns ``(eigenvalues, eigenvectors)`` with
    eigenvectors in columns, unsorted.
    """
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n):
        raise ShapeError(f"expected a square matrix, got {s.shape}")
    if n == 1:
        return s.diagonal().copy(), np.eye(1)
    size = n + (n % 2)
    a = np.zeros((size, size))
    a[:n, :n] = s
    a = 0.5 * (a + a.T)
    vecs = np.eye(size)
    scale = np.sqrt(np.sum(a * a))
    if scale == 0.0:
        return np.zeros(n), np.eye(n)
    tol = np.finfo(np.float64).eps * scale
    schedule = _round_robin(size)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol:
            break
        for p, q in schedule:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            big = np.abs(tau) > 1e150
            tau_safe = np.where(big, 0.0, tau)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau_safe) + np.sqrt(1.0 + tau_safe * tau_safe))
            t = np.where(big, 0.5 / np.where(big, tau, 1.0), t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = t * c
            # A <- R^T A R, R a product of disjoint plane rotations
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - sn * aq
            a[:, q] = sn * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - sn[:, None] * aq
            a[q, :] = sn[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = vecs[:, p].copy(), vecs[:, q].copy()
            vecs[:, p] = c * vp - sn * vq
            vecs[:, q] = sn * vp + c * vq
    if size != n:
        # the padding index never mixes with real ones (its row stays zero)
        keep = np.arange(n)
        return a.diagonal()[keep].copy(), vecs[np.ix_(keep, keep)]
    return a.diagonal().copy(), vecs


def _oracle_gram(a: np.ndarray):
    m, n = a.shape
    if min(m, n) > ORACLE_CAP:
        raise SizeError(f"svd_oracle is capped at min(m, n) <= {ORACLE_CAP}, got {a.shape}")
    if n <= m:
        return a.T @ a, "right"
    return a @ a.T, "left"


def svd_oracle(a) -> np.ndarray:
    """All ``min(m, n)`` singular values of ``a``, descending."""
    a = as_matrix(a).astype(np.float64)
    if a.size == 0:
        return np.zeros(0)
    gram, _ = _oracle_gram(a)
    w, _ = jacobi_eigh(gram)
    w = np.clip(w, 0.0, None)
    return np.sort(np.sqrt(w))[::-1]


def top_singular_pair(a):
    """Return ``(sigma, u, v)`` for the dominant singular triple via the oracle."""
    a = as_matrix(a).astype(np.float64)
    gram, side = _oracle_gram(a)
    w, vecs = jacobi_eigh(gram)
    k = int(np.argmax(w))
    sigma = float(np.sqrt(max(w[k], 0.0)))
    x = vecs[:, k]
    if sigma == 0.0:
        u = np.zeros(a.shape[0])
        v = np.zeros(a.shape[1])
        u[0] = v[0] = 1.0
        return 0.0, u, v
    if side == "right":
        v = x
        u = a @ v / sigma
    else:
        u = x
        v = a.T @ u / sigma
    return sigma, u, v


# ---------------------------------------------------------------------------
# power iteration

@dataclass
class PowerIterState:
    """Persisted approximation vectors for one matrix."""

    u: np.ndarray
    v: np.ndarray
    sigma: float = 0.0
    degenerate: bool = False

    @classmethod
    def random(cls, m: int, n: int, rng: np.random.Generator) -> "PowerIterState":
        u = rng.standard_normal(m)
        v = rng.standard_normal(n)
        return cls(u / np.linalg.norm(u), v / np.linalg.norm(v))


def power_iteration(a, state: PowerIterState, iters: int = 1):
    """Run ``iters`` rounds of ``v <- A^T u, u <- A v`` with renormalisation.

    Mutates ``state`` in place and returns ``(sigma, state)`` with
    ``sigma = u^T A v``.  An all-zero matrix leaves the state untouched,
    sets ``state.degenerate`` and reports ``sigma = 0``.
    """
    if iters < 1:
        raise ContractError("iters must be >= 1")
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"power_iteration needs a 2-D matrix, got {a.shape}")
    m, n = a.shape
    if state.u.shape != (m,) or state.v.shape != (n,):
        raise ShapeError(f"state vectors {state.u.shape}, {state.v.shape} do not fit matrix {a.shape}")
    u, v = state.u, state.v
    for _ in range(iters):
        v_new = a.T @ u
        nv = np.linalg.norm(v_new)
        if nv == 0.0:
            if not np.any(a):
                state.sigma = 0.0
                state.degenerate = True
                return 0.0, state
            # u is orthogonal to the column space; restart from a column of A
            u = a[:, int(np.argmax(np.abs(a).sum(axis=0)))].astype(np.float64)
            u = u / np.linalg.norm(u)
            v_new = a.T @ u
            nv = np.linalg.norm(v_new)
        v = v_new / nv
        u_new = a @ v
        u = u_new / np.linalg.norm(u_new)
    state.u, state.v = u, v
    state.sigma = float(u @ (a @ v))
    state.degenerate = False
    return state.sigma, state


def spectral_norm(a, tol: float = 1e-9, max_iters: int = 100_000, seed: int = 0) -> float:
    """Largest singular value: oracle when within the cap, else power iteration."""
    a = as_matrix(a)
    if a.size == 0 or not np.any(a):
        return 0.0
    if min(a.shape) <= ORACLE_CAP:
        return float(svd_oracle(a)[0])
    state = PowerIterState.random(a.shape[0], a.shape[1], np.random.default_rng(seed))
    prev = 0.0
    for _ in range(max_iters):
        sigma, _ = power_iteration(a, state, 1)
        if abs(sigma - prev) <= tol * sigma:
            break
        prev = sigma
    return float(sigma)
