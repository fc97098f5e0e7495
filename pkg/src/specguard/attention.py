"""Multi-head self-attention in plain numpy and its analytic input Jacobian.

Jacobian convention: for token outputs ``f_i = P[i] @ X @ Wv`` (a row of
length ``D_h``) the block ``J[i, j] = d f_i^T / d x_j`` has shape
``(D_h, d)``.  With ``A = Wq Wk^T / sqrt(D_h)`` so that
``scores[i, k] = x_i^T A x_k``,

    J[i, j] = Wv^T (X^T P_i (E_ji X A + [i == j] X A^T) + P[i, j] I)

where ``P_i = diag(P[i]) - P[i] P[i]^T`` and ``E_ji X`` is the zero matrix
with row ``j`` replaced by ``x_i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError


@dataclass
class AttentionWeights:
    """Per-head projections stacked on the leading axis.

    ``wq``, ``wk``, ``wv`` have shape ``(H, d, D_h)``; ``wo`` (optional) has
    shape ``(H * D_h, d)`` and acts on heads concatenated in index order.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray | None = None

    def __post_init__(self):
        for name in ("wq", "wk", "wv"):
            w = np.asarray(getattr(self, name))
            if w.ndim == 2:
                w = w[None]
            setattr(self, name, w)
        if not (self.wq.shape == self.wk.shape and self.wv.shape[:2] == self.wq.shape[:2]):
            raise ShapeError(f"inconsistent projection shapes {self.wq.shape}, {self.wk.shape}, {self.wv.shape}")
        if self.wo is not None and self.wo.shape[0] != self.heads * self.wv.shape[2]:
            raise ShapeError(f"output projection {self.wo.shape} does not fit {self.heads} heads")

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[2]

    def head(self, h: int):
        if not 0 <= h < self.heads:
            raise IndexError(f"head {h} out of range for {self.heads} heads")
        return self.wq[h], self.wk[h], self.wv[h]

    def score_matrix(self, h: int) -> np.ndarray:
        """``A = Wq Wk^T / sqrt(D_h)`` for head ``h``."""
        wq, wk, _ = self.head(h)
        return wq @ wk.T / np.sqrt(wq.shape[1])


@dataclass
class AttentionTrace:
    scores: np.ndarray
    P: np.ndarray
    output: np.ndarray


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(X, w: AttentionWeights):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim not in (2, 3) or X.shape[-1] != w.embed_dim:
        raise ShapeError(f"X must be (N, {w.embed_dim}) or (S, N, {w.embed_dim}), got {X.shape}")
    return X


def attention_forward(X, w: AttentionWeights, head: int = 0) -> AttentionTrace:
    """Single-head attention ``softmax(X Wq (X Wk)^T / sqrt(D_h)) X Wv``.

    ``X`` may carry a leading sample axis.
    """
    X = _check_input(X, w)
    wq, wk, wv = w.head(head)
    q = X @ wq
    k = X @ wk
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(wq.shape[1])
    P = softmax(scores)
    return AttentionTrace(scores, P, P @ X @ wv)


def multihead_forward(X, w: AttentionWeights) -> np.ndarray:
    """All heads concatenated in index order, then projected by ``wo``."""
    outs = [attention_forward(X, w, h).output for h in range(w.heads)]
    cat = np.concatenate(outs, axis=-1)
    return cat if w.wo is None else cat @ w.wo


def softmax_row_jacobian(p) -> np.ndarray:
    """``diag(p) - p p^T``, the derivative of softmax at a row with output ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError("p must be a vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError("p must be a probability vector")
    return np.diag(p) - np.outer(p, p)


def attention_jacobian_block(X, w: AttentionWeights, head: int, i: int, j: int) -> np.ndarray:
    """Block ``d f_i^T / d x_j`` of shape ``(D_h, d)``, built term by term."""
    X = _check_input(X, w)
    if X.ndim != 2:
        raise ShapeError("attention_jacobian_block takes a single (N, d) input")
    n, d = X.shape
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"block ({i}, {j}) out of range for N = {n}")
    _, _, wv = w.head(head)
    A = w.score_matrix(head)
    P = attention_forward(X, w, head).P
    Pi = softmax_row_jacobian(P[i])
    E = np.zeros((n, n))
    E[j, i] = 1.0
    dq = E @ X @ A
    if i == j:
        dq = dq + X @ A.T
    inner = X.T @ Pi @ dq + P[i, j] * np.eye(d)
    return wv.T @ inner


def attention_jacobian_batch(Xs, w: AttentionWeights, head: int = 0) -> np.ndarray:
    """Full Jacobians for a stack of inputs ``(S, N, d) -> (S, N*D_h, N*d)``."""
    Xs = _check_input(Xs, w)
    if Xs.ndim == 2:
        Xs = Xs[None]
    s, n, d = Xs.shape
    _, _, wv = w.head(head)
    dh = wv.shape[1]
    A = w.score_matrix(head)
    P = attention_forward(Xs, w, head).P                       # (S, N, N)
    eye_n = np.eye(n)
    # Pd[s, i] = diag(P[s, i]) - P[s, i] P[s, i]^T
    Pd = P[:, :, :, None] * eye_n - P[:, :, :, None] * P[:, :, None, :]
    C = np.einsum("sikj,skd->sijd", Pd, Xs)                    # X^T P_i e_j
    r = Xs @ A                                                  # rows x_i^T A
    M = C[..., :, None] * r[:, :, None, None, :]               # (S, N, N, d, d)
    G = np.einsum("skd,sikl,sle->side", Xs, Pd, Xs)            # X^T P_i X
    diag = G @ A.T
    idx = np.arange(n)
    M[:, idx, idx] += diag
    M += P[..., None, None] * np.eye(d)
    J = np.einsum("ea,sijef->siajf", wv, M)                    # Wv^T M
    return J.reshape(s, n * dh, n * d)


def attention_jacobian_full(X, w: AttentionWeights, head: int = 0) -> np.ndarray:
    X = _check_input(X, w)
    if X.ndim != 2:
        raise ShapeError("attention_jacobian_full takes a single (N, d) input")
    return attention_jacobian_batch(X[None], w, head)[0]


def finite_difference_jacobian(X, w: AttentionWeights, head: int = 0, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the flattened single-head output."""
    X = np.array(X, dtype=np.float64)
    n, d = X.shape
    dh = w.head_dim
    J = np.empty((n * dh, n * d))
    for col in range(n * d):
        e = np.zeros(n * d)
        e[col] = h
        e = e.reshape(n, d)
        fp = attention_forward(X + e, w, head).output.reshape(-1)
        fm = attention_forward(X - e, w, head).output.reshape(-1)
        J[:, col] = (fp - fm) / (2 * h)
    return J
