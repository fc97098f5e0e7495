"""Maximum singular value penalisation for attention projections.

The penalty is ``sum_l sum_h lambda_q s(Wq[l,h])^2 + lambda_k s(Wk[l,h])^2
+ lambda_v s(Wv[l,h])^2`` with ``s`` the power-iteration estimate of the top
singular value.  The approximation vectors are persisted between calls and
treated as constants in the backward pass, so the gradient of one term is
``2 lambda s u v^T``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .errors import ContractError
from .linalg import PowerIterState, power_iteration

KINDS = ("q", "k", "v")


@dataclass
class MsvpConfig:
    lambda_q: float = 1e-4
    lambda_k: float = 1e-4
    lambda_v: float = 1e-4
    iters_per_step: int = 1
    enabled: bool = True

    def __post_init__(self):
        if min(self.lambda_q, self.lambda_k, self.lambda_v) < 0:
            raise ContractError("penalty weights must be non-negative")
        if self.iters_per_step < 1:
            raise ContractError("iters_per_step must be >= 1")

    @classmethod
    def uniform(cls, lam: float, **kw) -> "MsvpConfig":
        return cls(lam, lam, lam, **kw)

    def weight(self, kind: str) -> float:
        return {"q": self.lambda_q, "k": self.lambda_k, "v": self.lambda_v}[kind]


def _stack(value: np.ndarray) -> np.ndarray:
    return value[None] if value.ndim == 2 else value


def init_states(weights: Mapping, rng: np.random.Generator) -> dict:
    """One ``PowerIterState`` per penalised matrix, keyed ``(layer, head, kind)``.

    ``weights`` maps ``(layer, kind)`` to a 2-D matrix or a ``(H, m, n)`` head
    stack (arrays or nodes).  Keys are visited in sorted order so the draw is
    reproducible.
    """
    states = {}
    for (layer, kind) in sorted(weights):
        w = weights[(layer, kind)]
        value = _stack(np.asarray(w.value if isinstance(w, ag.Node) else w))
        for h in range(value.shape[0]):
            states[(layer, h, kind)] = PowerIterState.random(value.shape[1], value.shape[2], rng)
    return states


def msvp_loss(weights: Mapping, cfg: MsvpConfig, states: dict) -> ag.Node:
    """Penalty node over every head of every listed projection.

    Runs ``cfg.iters_per_step`` power iterations per matrix (updating
    ``states``) and returns a scalar node whose parents are the weight nodes.
    """
    keys = sorted(weights)
    nodes = [ag.as_node(weights[k]) for k in keys]
    if not cfg.enabled:
        return ag.Node(0.0)
    total = 0.0
    saved = []
    for (layer, kind), node in zip(keys, nodes):
        lam = cfg.weight(kind)
        stack = _stack(node.value)
        terms = []
        for h in range(stack.shape[0]):
            key = (layer, h, kind)
            if key not in states:
                raise ContractError(f"no power-iteration state for {key}")
            sigma, st = power_iteration(stack[h], states[key], cfg.iters_per_step)
            total += lam * sigma * sigma
            terms.append((lam, sigma, st.u.copy(), st.v.copy()))
        saved.append(terms)
    return ag.Node(total, nodes, "msvp", saved)


@ag.register_backward("msvp")
def _msvp_backward(node, g):
    grads = []
    for parent, terms in zip(node.parents, node.ctx):
        gw = np.empty((len(terms),) + (terms[0][2].size, terms[0][3].size))
        for h, (lam, sigma, u, v) in enumerate(terms):
            gw[h] = (2.0 * lam * sigma * g) * np.outer(u, v)
        grads.append(gw.reshape(parent.shape).astype(parent.value.dtype, copy=False))
    return grads


def total_objective(cls_loss: ag.Node, msvp: ag.Node) -> ag.Node:
    return ag.add(cls_loss, msvp)
