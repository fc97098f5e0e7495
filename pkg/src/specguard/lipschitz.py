"""Local Lipschitz bounds for single-head self-attention and empirical checks.

The bound for a head with weights ``Wq, Wk, Wv`` over the Frobenius ball of
radius ``delta0`` around ``X0`` is assembled from a per-row bound

    row = (N + 1) (B + delta0)^2 (sv * sq * sk * c + sv)

where ``B`` is an input-norm anchor (``||X0||_F``, or a global input bound)
and ``c = 1 / sqrt(D_h)`` when the score scaling is folded in.  Rows are
then aggregated either by summation (``N * row``) or through the block-row
norm inequality (``sqrt(N) * row``).

The derivation bounds the softmax term ``P[i, j] I`` by ``(B + delta0)^2``
per block, which silently requires ``(N + 1) (B + delta0)^2 >= 1``.  Inputs
far inside the unit ball can therefore violate the printed bound;
``bound_is_valid`` reports whether the anchor satisfies that condition.
"""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .attention import AttentionWeights, attention_forward, attention_jacobian_batch
from .errors import ContractError, ShapeError
from .linalg import frobenius_norm, spectral_norm


def head_norms(w: AttentionWeights, head: int):
    wq, wk, wv = w.head(head)
    return spectral_norm(wq), spectral_norm(wk), spectral_norm(wv)


def bound_from_norms(sigma_q, sigma_k, sigma_v, n_tokens, anchor, delta0, head_dim=1,
                     scaled=True, aggregation="rowsum") -> float:
    if delta0 < 0:
        raise ContractError("delta0 must be non-negative")
    if anchor < 0:
        raise ContractError("anchor must be non-negative")
    c = 1.0 / np.sqrt(head_dim) if scaled else 1.0
    row = (n_tokens + 1) * (anchor + delta0) ** 2 * (sigma_v * sigma_q * sigma_k * c + sigma_v)
    if aggregation == "rowsum":
        return float(n_tokens * row)
    if aggregation == "lemma":
        return float(np.sqrt(n_tokens) * row)
    raise ValueError(f"unknown aggregation {aggregation!r}")


def local_lipschitz_bound(w: AttentionWeights, head: int, n_tokens: int, anchor: float,
                          delta0: float, scaled: bool = True, aggregation: str = "rowsum") -> float:
    """Upper bound on the local Lipschitz constant of one attention head.

    ``anchor`` is ``||X0||_F`` for the input-anchored form or a global bound
    ``B`` on ``||X||_F``.  ``scaled=False`` drops the ``1/sqrt(D_h)`` score
    factor from the weight product, matching the looser printed form.
    """
    sq, sk, sv = head_norms(w, head)
    return bound_from_norms(sq, sk, sv, n_tokens, anchor, delta0, w.head_dim, scaled, aggregation)


def bound_is_valid(n_tokens: int, anchor: float, delta0: float) -> bool:
    return (n_tokens + 1) * (anchor + delta0) ** 2 >= 1.0


def block_row_norm_bound(blocks) -> float:
    """``sqrt(sum ||block||_2^2)`` for blocks sharing a row count."""
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    if not blocks:
        raise ContractError("need at least one block")
    rows = {b.shape[0] for b in blocks}
    if len(rows) != 1:
        raise ShapeError(f"blocks disagree on row count: {sorted(rows)}")
    return float(np.sqrt(sum(spectral_norm(b) ** 2 for b in blocks)))


class EmpiricalLipschitz(NamedTuple):
    difference_quotient: float
    jacobian_norm: float


def sample_ball(X0: np.ndarray, delta0: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Points in the Frobenius ball: uniform direction, radius uniform in [0, delta0]."""
    dirs = rng.standard_normal((count,) + X0.shape)
    norms = np.sqrt(np.sum(dirs ** 2, axis=tuple(range(1, dirs.ndim)), keepdims=True))
    radii = rng.uniform(0.0, delta0, size=(count,) + (1,) * X0.ndim)
    return X0[None] + dirs / norms * radii


def _batched_spectral_norm(mats: np.ndarray) -> np.ndarray:
    return np.linalg.svd(mats, compute_uv=False)[..., 0]


def empirical_local_lipschitz(X0, w: AttentionWeights, head: int, delta0: float,
                              samples: int, seed=0, jacobian_samples: int | None = None,
                              chunk: int = 500) -> EmpiricalLipschitz:
    """Sampled estimate of the local Lipschitz constant around ``X0``.

    ``difference_quotient`` is the largest ``||f(X1) - f(X2)||_F / ||X1 - X2||_F``
    over independent pairs in the ball; ``jacobian_norm`` the largest Jacobian
    spectral norm over ``X0`` and the first point of each pair.  With
    ``delta0 == 0`` both equal the Jacobian norm at ``X0``.
    """
    if samples < 1:
        raise ContractError("samples must be >= 1")
    if delta0 < 0:
        raise ContractError("delta0 must be non-negative")
    X0 = np.asarray(X0, dtype=np.float64)
    j0 = float(_batched_spectral_norm(attention_jacobian_batch(X0[None], w, head))[0])
    if delta0 == 0:
        return EmpiricalLipschitz(j0, j0)
    rng = np.random.default_rng(seed)
    jac_budget = samples if jacobian_samples is None else jacobian_samples
    best_q, best_j = 0.0, j0
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        X1 = sample_ball(X0, delta0, k, rng)
        X2 = sample_ball(X0, delta0, k, rng)
        f1 = attention_forward(X1, w, head).output
        f2 = attention_forward(X2, w, head).output
        num = np.sqrt(np.sum((f1 - f2) ** 2, axis=(1, 2)))
        den = np.sqrt(np.sum((X1 - X2) ** 2, axis=(1, 2)))
        ok = den > 0
        if np.any(ok):
            best_q = max(best_q, float(np.max(num[ok] / den[ok])))
        take = min(k, max(jac_budget - done, 0))
        if take:
            best_j = max(best_j, float(np.max(_batched_spectral_norm(attention_jacobian_batch(X1[:take], w, head)))))
        done += k
    return EmpiricalLipschitz(best_q, best_j)


def sensitivity_linearization_check(W, b, x0, deltas) -> float:
    """Largest ``||f(x0 + d) - f(x0)|| / ||d||`` for the affine map ``x -> W x + b``."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    f0 = W @ x0 + b
    best = 0.0
    for d in deltas:
        nd = np.linalg.norm(d)
        if nd == 0:
            continue
        best = max(best, float(np.linalg.norm(W @ (x0 + d) + b - f0) / nd))
    return best


# ---------------------------------------------------------------------------
# reports

@dataclass
class HeadReport:
    layer: int
    head: int
    sigma_q: float
    sigma_k: float
    sigma_v: float
    n_tokens: int
    B: float
    delta0: float
    head_dim: int
    bound_eq10: float
    bound_eq10_lemma: float
    bound_eq10_unscaled: float
    x0_norm: float = float("nan")
    bound_eq9: float = float("nan")
    empirical_quotient: float = float("nan")
    empirical_max_jacobian_norm: float = float("nan")


def head_report(w: AttentionWeights, layer: int, head: int, n_tokens: int, B: float,
                delta0: float, X0=None, samples: int = 0, seed=0) -> HeadReport:
    sq, sk, sv = head_norms(w, head)
    dh = w.head_dim
    rep = HeadReport(
        layer, head, sq, sk, sv, n_tokens, B, delta0, dh,
        bound_from_norms(sq, sk, sv, n_tokens, B, delta0, dh, True, "rowsum"),
        bound_from_norms(sq, sk, sv, n_tokens, B, delta0, dh, True, "lemma"),
        bound_from_norms(sq, sk, sv, n_tokens, B, delta0, dh, False, "rowsum"),
    )
    if X0 is not None:
        rep.x0_norm = frobenius_norm(X0)
        rep.bound_eq9 = bound_from_norms(sq, sk, sv, n_tokens, rep.x0_norm, delta0, dh, True, "rowsum")
        if samples:
            emp = empirical_local_lipschitz(X0, w, head, delta0, samples, seed)
            rep.empirical_quotient = emp.difference_quotient
            rep.empirical_max_jacobian_norm = emp.jacobian_norm
    return rep


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def reports_to_text(reports) -> str:
    """One ``key=value`` record per line."""
    return "".join(" ".join(f"{f.name}={_fmt(getattr(r, f.name))}" for f in fields(r)) + "\n" for r in reports)


def reports_from_text(text: str) -> list[HeadReport]:
    types = {f.name: f.type for f in fields(HeadReport)}
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        kv = dict(item.split("=", 1) for item in line.split())
        out.append(HeadReport(**{k: (int(v) if types[k] == "int" else float(v)) for k, v in kv.items()}))
    return out


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(HeadReport)]
    buf.write(",".join(names) + "\n")
    for r in reports:
        d = asdict(r)
        buf.write(",".join(_fmt(d[n]) for n in names) + "\n")
    return buf.getvalue()


def reports_from_csv(text: str) -> list[HeadReport]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    names = lines[0].split(",")
    types = {f.name: f.type for f in fields(HeadReport)}
    return [
        HeadReport(**{n: (int(v) if types[n] == "int" else float(v)) for n, v in zip(names, ln.split(","))})
        for ln in lines[1:]
    ]
