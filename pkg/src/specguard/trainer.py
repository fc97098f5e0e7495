"""Standard and adversarial training with the spectral penalty, SGD and metrics."""
from __future__ import annotations

import io
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .attacks import AttackConfig, attack
from .data import Dataset
from .errors import ContractError
from .linalg import top_singular_pair
from .model import VitParams, classifier, penalized_weights, vit_forward
from .msvp import MsvpConfig, init_states, msvp_loss, total_objective


@dataclass
class TrainConfig:
    mode: str = "standard"
    epochs: int = 1
    batch_size: int = 50
    lr: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    msvp: MsvpConfig = field(default_factory=MsvpConfig)
    attack: AttackConfig | None = None
    eval_attacks: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("standard", "adversarial"):
            raise ContractError(f"unknown training mode {self.mode!r}")
        if self.mode == "adversarial" and self.attack is None:
            raise ContractError("adversarial mode needs a train-time attack")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ContractError("need lr >= 0, weight_decay >= 0, 0 <= momentum < 1")


def sigma_key(layer: int, head: int, kind: str) -> str:
    return f"L{layer}.H{head}.{kind}"


def sigma_snapshot(params: VitParams) -> dict:
    """Oracle top singular value of every penalised matrix, in (layer, head, kind) order."""
    out = {}
    cfg = params.config
    for layer in range(cfg.layers):
        for head in range(cfg.heads):
            for kind in "qkv":
                w = params[f"blocks.{layer}.attn.w{kind}"][head]
                out[sigma_key(layer, head, kind)] = top_singular_pair(w)[0]
    return out


@dataclass
class EpochRecord:
    epoch: int
    cls_loss: float
    msvp_loss: float
    clean_accuracy: float
    robust_accuracy: dict
    sigmas: dict


@dataclass
class Metrics:
    records: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)

    def columns(self) -> list[str]:
        if not self.records:
            return ["epoch", "cls_loss", "msvp_loss", "clean_accuracy"]
        r = self.records[0]
        return (["epoch", "cls_loss", "msvp_loss", "clean_accuracy"]
                + [f"robust:{k}" for k in r.robust_accuracy]
                + [f"sigma:{k}" for k in r.sigmas])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.columns()) + "\n")
        for r in self.records:
            row = [str(r.epoch), repr(r.cls_loss), repr(r.msvp_loss), repr(r.clean_accuracy)]
            row += [repr(v) for v in r.robust_accuracy.values()]
            row += [repr(v) for v in r.sigmas.values()]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Metrics":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        names = lines[0].split(",")
        out = cls()
        for ln in lines[1:]:
            vals = dict(zip(names, ln.split(",")))
            out.records.append(EpochRecord(
                int(vals["epoch"]), float(vals["cls_loss"]), float(vals["msvp_loss"]),
                float(vals["clean_accuracy"]),
                {n[7:]: float(v) for n, v in vals.items() if n.startswith("robust:")},
                {n[6:]: float(v) for n, v in vals.items() if n.startswith("sigma:")},
            ))
        return out

    def timing_csv(self) -> str:
        return "step,seconds\n" + "".join(f"{i},{s!r}\n" for i, s in enumerate(self.step_seconds))

    def summary(self) -> str:
        """Structured-text summary of the last epoch."""
        if not self.records:
            return "epochs=0\n"
        r = self.records[-1]
        sig = np.array(list(r.sigmas.values()))
        lines = [
            f"epochs={r.epoch + 1}",
            f"cls_loss={r.cls_loss!r}",
            f"msvp_loss={r.msvp_loss!r}",
            f"clean_accuracy={r.clean_accuracy!r}",
        ]
        lines += [f"robust_accuracy.{k}={v!r}" for k, v in r.robust_accuracy.items()]
        if sig.size:
            lines += [f"sigma_mean={float(sig.mean())!r}", f"sigma_max={float(sig.max())!r}"]
        return "\n".join(lines) + "\n"


class NonFiniteLossError(RuntimeError):
    """Training hit a NaN/inf loss; carries the batch and current sigmas."""

    def __init__(self, step, epoch, images, labels, cls_loss, msvp_loss, sigmas):
        self.step, self.epoch = step, epoch
        self.images, self.labels = images, labels
        self.cls_loss, self.msvp_loss = cls_loss, msvp_loss
        self.sigmas = sigmas
        worst = max(sigmas.items(), key=lambda kv: kv[1]) if sigmas else ("-", float("nan"))
        super().__init__(
            f"non-finite loss at epoch {epoch} step {step}: cls={cls_loss} msvp={msvp_loss}; "
            f"largest sigma {worst[0]}={worst[1]:.6g}"
        )

    def dump(self) -> str:
        lines = [f"epoch={self.epoch}", f"step={self.step}", f"cls_loss={self.cls_loss!r}",
                 f"msvp_loss={self.msvp_loss!r}", f"labels={' '.join(map(str, self.labels))}"]
        lines += [f"sigma.{k}={v!r}" for k, v in self.sigmas.items()]
        return "\n".join(lines) + "\n"


def sgd_step(params: dict, grads: dict, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: dict | None = None) -> dict:
    """In place: ``v <- momentum v + g + weight_decay theta``; ``theta <- theta - lr v``.

    Missing gradients count as zero.  Returns the (updated) velocity dict.
    """
    velocity = {} if velocity is None else velocity
    for name, theta in params.items():
        g = grads.get(name)
        step = weight_decay * theta if g is None else g + weight_decay * theta
        v = velocity.get(name)
        v = step if v is None else momentum * v + step
        velocity[name] = v
        theta -= lr * v
    return velocity


def _as_model(model) -> Callable:
    return classifier(model) if isinstance(model, VitParams) else model


def evaluate(model, data: Dataset, attack_cfg: AttackConfig | None = None, batch_size: int = 250,
             seed=0) -> float:
    """Accuracy on clean inputs, or on inputs attacked batch by batch.

    ``model`` is a ``VitParams`` or any callable mapping an input node to
    logits.  Ties go to the lowest class index.
    """
    if len(data) == 0:
        return 0.0
    f = _as_model(model)
    rng = np.random.default_rng([int(seed), 13])
    correct = 0
    for xb, yb in data.batches(batch_size):
        if attack_cfg is not None:
            xb = attack(f, xb, yb, attack_cfg, rng)
        logits = f(ag.Node(xb)).value
        correct += int(np.sum(np.argmax(logits, axis=-1) == yb))
    return correct / len(data)


@dataclass
class TrainResult:
    params: VitParams
    metrics: Metrics
    states: dict


def train(params: VitParams, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None, max_steps: int | None = None) -> TrainResult:
    """Train a copy of ``params``.

    Random streams are derived from ``cfg.seed``: batch order, power-iteration
    start vectors and attack starts each get their own.  Accuracies are
    measured on ``eval_data`` (default: the training set).  ``max_steps``
    stops early, which the benchmark uses.
    """
    if len(data) == 0:
        raise ContractError("training data is empty")
    mc = params.config
    if data.images.shape[1:] != (mc.channels, mc.image_size, mc.image_size):
        raise ContractError(f"data images {data.images.shape[1:]} do not fit the model config")
    params = params.copy()
    eval_data = data if eval_data is None else eval_data
    shuffle_rng = np.random.default_rng([int(cfg.seed), 10])
    power_rng = np.random.default_rng([int(cfg.seed), 11])
    attack_rng = np.random.default_rng([int(cfg.seed), 12])
    states = init_states(penalized_weights(params, mc.layers), power_rng) if cfg.msvp.enabled else {}
    velocity: dict = {}
    metrics = Metrics()
    step = 0
    for epoch in range(cfg.epochs):
        cls_sum = msvp_sum = 0.0
        batches = 0
        for xb, yb in data.batches(cfg.batch_size, shuffle_rng):
            t0 = time.perf_counter()
            if cfg.mode == "adversarial":
                xb = attack(classifier(params), xb, yb, cfg.attack, attack_rng)
            leaves = params.leaves()
            cls = ag.cross_entropy(vit_forward(params, xb, leaves), yb)
            pen = msvp_loss(penalized_weights(leaves, mc.layers), cfg.msvp, states)
            total = total_objective(cls, pen)
            if not np.isfinite(total.value):
                raise NonFiniteLossError(step, epoch, xb, yb, float(cls.value), float(pen.value),
                                         sigma_snapshot(params))
            ag.backward(total)
            grads = {k: n.grad for k, n in leaves.items() if n.grad is not None}
            sgd_step(params.tensors, grads, cfg.lr, cfg.momentum, cfg.weight_decay, velocity)
            metrics.step_seconds.append(time.perf_counter() - t0)
            cls_sum += float(cls.value)
            msvp_sum += float(pen.value)
            batches += 1
            step += 1
            if max_steps is not None and step >= max_steps:
                return TrainResult(params, metrics, states)
        rec = EpochRecord(
            epoch, cls_sum / batches, msvp_sum / batches,
            evaluate(params, eval_data),
            {a.name: evaluate(params, eval_data, a, seed=cfg.seed) for a in cfg.eval_attacks},
            sigma_snapshot(params),
        )
        metrics.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(params, metrics, states)
