"""Deterministic mini-batch training of probe heads on frozen features."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit
from threadpoolctl import threadpool_limits

from . import ndgrad as nd
from .metrics import EvalReport, evaluate_all
from .ndgrad import Tensor
from .probes import Head, asymmetric_loss


class NumericError(FloatingPointError):
    def __init__(self, message: str, batch_index: int):
        super().__init__(message)
        self.batch_index = batch_index


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    prototype_lr: float = 4e-2
    weight_decay: float = 3e-4
    epochs: int = 30
    batch_size: int = 128
    grad_clip: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    asl_clip: float = 0.05
    ortho_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.prototype_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")

    @classmethod
    def few_shot(cls, **overrides) -> "TrainConfig":
        return cls(**{"lr": 4e-4, "epochs": 50, **overrides})

    def hash(self) -> str:
        """Hash of everything except the seed."""
        payload = {k: v for k, v in asdict(self).items() if k != "seed"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    seed: int
    config_hash: str
    epoch_loss: list[float] = field(default_factory=list)
    val_map: list[float | None] = field(default_factory=list)
    wall_time: float = 0.0

    def to_jsonl(self) -> str:
        lines = []
        for i, loss in enumerate(self.epoch_loss):
            val = self.val_map[i] if i < len(self.val_map) else None
            lines.append(json.dumps({"epoch": i + 1, "loss": loss, "val_map": val,
                                     "seed": self.seed, "config_hash": self.config_hash}))
        lines.append(json.dumps({"summary": True, "seed": self.seed, "config_hash": self.config_hash,
                                 "epochs": len(self.epoch_loss), "wall_time": self.wall_time}))
        return "\n".join(lines) + "\n"


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """Per-step cosine annealing from ``base`` at step 0 to 0 at the last step."""
    if total_steps <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return total


class AdamW:
    """Adam with decoupled weight decay; one lr per parameter."""

    def __init__(self, params: Sequence[Tensor], lrs: Sequence[float], decay: Sequence[bool],
                 weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lrs = list(lrs)
        self.decay = list(decay)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr_factor: float = 1.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v, base, dec in zip(self.params, self.m, self.v, self.lrs, self.decay):
            g = p.grad
            lr = base * lr_factor
            if dec and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _stack(dataset, idx) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([np.asarray(dataset[i][0], dtype=np.float64) for i in idx])
    ys = np.stack([np.asarray(dataset[i][1], dtype=np.float64) for i in idx])
    return xs, ys


def train_probe(head: Head, dataset: Sequence[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig = TrainConfig(),
                val: Sequence[tuple[np.ndarray, np.ndarray]] | None = None) -> tuple[Head, RunRecord]:
    """Train ``head`` in place on ``(features, multi-hot labels)`` pairs."""
    if not len(dataset):
        raise ValueError("training set is empty")
    start = time.perf_counter()
    named = list(head.parameters())
    params = [p for _, p in named]
    lrs = [cfg.prototype_lr if name == "prototypes" else cfg.lr for name, _ in named]
    decay = [name not in head.no_decay for name, _ in named]
    opt = AdamW(params, lrs, decay, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.adam_eps)

    n = len(dataset)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    record = RunRecord(seed=cfg.seed, config_hash=cfg.hash())

    step = 0
    # One BLAS thread keeps reductions in a fixed order, whatever the machine.
    with threadpool_limits(limits=1):
        for _epoch in range(cfg.epochs):
            order = rng.permutation(n)
            losses = []
            for b in range(per_epoch):
                xb, yb = _stack(dataset, order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
                head.zero_grad()
                logits = head.forward(Tensor(xb))
                loss = asymmetric_loss(logits, yb, cfg.gamma_pos, cfg.gamma_neg, cfg.asl_clip)
                extra = head.extra_loss()
                if extra is not None and cfg.ortho_weight:
                    loss = nd.add(loss, nd.scale(extra, cfg.ortho_weight))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss at batch {step}", step)
                loss.backward()
                clip_grad_norm([p.grad for p in params], cfg.grad_clip)
                opt.step(cosine_lr(1.0, step, total))
                head.project()
                losses.append(value)
                step += 1
            record.epoch_loss.append(float(np.mean(losses)))
            record.val_map.append(evaluate(head, val).map if val else None)
    record.wall_time = time.perf_counter() - start
    return head, record


def predict_scores(head: Head, dataset, batch_size: int = 256) -> np.ndarray:
    out = []
    with threadpool_limits(limits=1):
        for s in range(0, len(dataset), batch_size):
            xb, _ = _stack(dataset, range(s, min(s + batch_size, len(dataset))))
            z = head.predict(xb)
            out.append(expit(z))
    return np.concatenate(out, axis=0)


def evaluate(head: Head, dataset) -> EvalReport:
    scores = predict_scores(head, dataset)
    labels = np.stack([np.asarray(y) for _, y in dataset])
    return evaluate_all(scores, labels)
