"""FGSM and PGD adversarial examples with norm-ball projection.

A ``model`` here is any callable mapping an input node to a logits node; the
attack loss is the mean cross-entropy over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable

import numpy as np

from . import autograd as ag
from .errors import ContractError


def parse_epsilon(text) -> float:
    """Accept ``0.03``, ``8/255`` or a number."""
    if isinstance(text, (int, float)):
        return float(text)
    s = str(text).strip()
    if "/" in s:
        num, den = s.split("/", 1)
        return float(Fraction(num.strip()) / Fraction(den.strip()))
    return float(s)


@dataclass(frozen=True)
class AttackConfig:
    family: str = "pgd"
    epsilon: float = 8 / 255
    alpha: float | None = None
    steps: int = 10
    norm: str = "linf"
    random_start: bool = False
    clamp: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        if self.family not in ("fgsm", "pgd"):
            raise ContractError(f"unknown attack family {self.family!r}")
        if self.norm not in ("linf", "l2"):
            raise ContractError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ContractError("epsilon must be non-negative")
        if self.family == "pgd":
            if self.steps < 1:
                raise ContractError("pgd needs steps >= 1")
            if self.alpha is not None and self.alpha <= 0:
                raise ContractError("pgd needs alpha > 0")

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 2.5 * self.epsilon / self.steps

    @property
    def name(self) -> str:
        return "fgsm" if self.family == "fgsm" else f"pgd-{self.steps}"

    def with_epsilon(self, eps: float) -> "AttackConfig":
        return replace(self, epsilon=eps)


def loss_and_grad(model: Callable, x: np.ndarray, y) -> tuple[float, np.ndarray]:
    xn = ag.leaf(x)
    loss = ag.cross_entropy(model(xn), y)
    ag.backward(loss)
    g = np.zeros_like(x) if xn.grad is None else xn.grad
    return float(loss.value), g


def _per_sample_norm(a: np.ndarray, batched: bool) -> np.ndarray:
    if not batched:
        return np.sqrt(np.sum(a * a))
    return np.sqrt(np.sum(a * a, axis=tuple(range(1, a.ndim)), keepdims=True))


def project(delta, epsilon: float, norm: str = "linf", batched: bool = False) -> np.ndarray:
    """Project onto the ``epsilon`` ball; ``batched`` treats axis 0 as samples."""
    if epsilon < 0:
        raise ContractError("epsilon must be non-negative")
    delta = np.asarray(delta)
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm == "l2":
        n = _per_sample_norm(delta, batched)
        factor = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
        return delta * factor
    raise ContractError(f"unknown norm {norm!r}")


def _clamp(x, cfg: AttackConfig):
    if cfg.clamp is None:
        return x
    return np.clip(x, cfg.clamp[0], cfg.clamp[1])


def fgsm(model: Callable, x, y, cfg: AttackConfig) -> np.ndarray:
    """One signed-gradient step of size epsilon (``sign(0) = 0``)."""
    if cfg.family != "fgsm":
        raise ContractError("fgsm called with a non-fgsm config")
    x = np.asarray(x)
    if cfg.epsilon == 0:
        return x.copy()
    _, g = loss_and_grad(model, x, y)
    return _clamp(x + cfg.epsilon * np.sign(g), cfg)


def _random_start(x, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.norm == "linf":
        return rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype)
    d = rng.standard_normal(x.shape)
    d /= _per_sample_norm(d, True)
    dim = x[0].size
    r = cfg.epsilon * rng.uniform(0, 1, size=(x.shape[0],) + (1,) * (x.ndim - 1)) ** (1.0 / dim)
    return (d * r).astype(x.dtype)


def pgd(model: Callable, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None,
        init: np.ndarray | None = None, on_step: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Projected gradient ascent on the loss inside the epsilon ball.

    linf uses signed steps; l2 uses steps along ``g / ||g||`` per sample.
    ``init`` overrides the starting perturbation (it is projected first).
    ``on_step(k, delta)`` sees the perturbation after every iteration.
    """
    if cfg.family != "pgd":
        raise ContractError("pgd called with a non-pgd config")
    x = np.asarray(x)
    if init is not None:
        delta = np.asarray(init, dtype=x.dtype)
    elif cfg.random_start:
        delta = _random_start(x, cfg, rng if rng is not None else np.random.default_rng(0))
    else:
        delta = np.zeros_like(x)
    delta = project(delta, cfg.epsilon, cfg.norm, batched=True)
    x_adv = _clamp(x + delta, cfg)
    delta = x_adv - x
    alpha = cfg.step_size
    for k in range(cfg.steps):
        _, g = loss_and_grad(model, x_adv, y)
        if cfg.norm == "linf":
            step = alpha * np.sign(g)
        else:
            n = _per_sample_norm(g, True)
            step = alpha * g / np.where(n > 0, n, 1.0)
        delta = project(delta + step, cfg.epsilon, cfg.norm, batched=True)
        x_adv = _clamp(x + delta, cfg)
        delta = x_adv - x
        if on_step is not None:
            on_step(k, delta)
    return x_adv


def attack(model: Callable, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    if cfg.family == "fgsm":
        return fgsm(model, x, y, cfg)
    return pgd(model, x, y, cfg, rng)
