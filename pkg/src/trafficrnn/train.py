"""Loss, L2 regularisation, Adam and the epoch loop."""

import dataclasses
import json
import logging
import time

import numpy as np

from trafficrnn.errors import DivergenceError, ShapeError
from trafficrnn.numeric import DTYPE

log = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 300
    steps_per_epoch: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l2: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must all be >= 1")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.l2 < 0:
            raise ValueError(f"L2 coefficient must be non-negative, got {self.l2}")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)


def mse_loss(pred, target):
    """Mean squared error over every element and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def l2_penalty(model, lam, accumulate=True):
    """lam * sum of squared weights (biases excluded).

    With ``accumulate`` the gradient ``2 * lam * w`` is added in place to
    each weight's gradient buffer.
    """
    if lam < 0:
        raise ValueError(f"L2 coefficient must be non-negative, got {lam}")
    total = 0.0
    for _, p, g, is_weight in model.parameters():
        if not is_weight:
            continue
        total += float(np.sum(p * p))
        if accumulate and lam:
            g += 2.0 * lam * p
    return lam * total


class Adam:
    """Adam with bias-corrected moments; state is keyed like ``model.parameters()``."""

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, items):
        """Update every ``(key, param, grad)`` in place."""
        items = list(items)
        for key, _, g in items:
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {key}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, p, g in items:
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)


def adam_step(param, grad, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional single Adam update; returns ``(param, m, v)``."""
    grad = np.asarray(grad, dtype=DTYPE)
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    m = beta1 * np.asarray(m, dtype=DTYPE) + (1.0 - beta1) * grad
    v = beta2 * np.asarray(v, dtype=DTYPE) + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return np.asarray(param, dtype=DTYPE) - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclasses.dataclass
class TrainResult:
    history: list
    seconds: float
    steps: int


def train(model, windows, cfg, callback=None):
    """Fit ``model`` on ``windows`` walking them in chronological order.

    Each step takes the next ``batch_size`` windows (wrapping at the end),
    runs a training-mode forward pass, MSE + L2, backward and one Adam
    update. Returns the per-epoch mean loss history.
    """
    n = len(windows)
    if n < 1:
        raise ValueError("no training windows")
    model.rng = np.random.default_rng([cfg.seed, 2])
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    offsets = np.arange(cfg.batch_size)
    cursor = 0
    history = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        total = 0.0
        for step in range(cfg.steps_per_epoch):
            idx = (cursor + offsets) % n
            cursor = (cursor + cfg.batch_size) % n
            x, y = windows.arrays(idx)
            try:
                pred = model.forward(x, training=True)
                loss, dpred = mse_loss(pred, y)
                model.backward(dpred)
                loss += l2_penalty(model, cfg.l2)
                opt.step((k, p, g) for k, p, g, _ in model.parameters())
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, step {step}: {exc}",
                                      epoch=epoch, step=step) from None
            total += loss
        history.append(total / cfg.steps_per_epoch)
        if callback is not None:
            callback(epoch, history[-1])
        log.debug("epoch %d loss %.6g", epoch, history[-1])
    return TrainResult(history, time.perf_counter() - start, cfg.epochs * cfg.steps_per_epoch)
