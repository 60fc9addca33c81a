"""Categorical cross-entropy and the SGD / RMSprop / Adam update rules.

Optimizers only touch :class:`~statecnn.layers.ParamSlot` objects whose
``trainable`` flag is set; frozen slots are never read for gradients or written.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, InputError, StateError

EPS_CLIP = 1e-7


def categorical_crossentropy(probs: np.ndarray, targets: np.ndarray, eps_clip: float = EPS_CLIP):
    """Mean negative log-probability of the true class.

    Returns ``(loss, dprobs)`` where ``dprobs`` is the gradient of the loss
    with respect to ``probs``. Probabilities below ``eps_clip`` are clipped,
    and the gradient through the clip is zero.
    """
    if probs.shape != targets.shape or probs.ndim != 2:
        raise InputError(f"probs {probs.shape} and targets {targets.shape} must be equal (N, K)")
    is_binary = (targets == 0) | (targets == 1)
    if not is_binary.all() or not (targets.sum(axis=1) == 1).all():
        bad = np.flatnonzero(~is_binary.all(axis=1) | (targets.sum(axis=1) != 1))
        raise InputError(f"target rows {bad.tolist()} are not one-hot")
    n = probs.shape[0]
    p_true = (probs * targets).sum(axis=1)
    clipped = np.maximum(p_true, eps_clip)
    loss = float(-np.log(clipped.astype(np.float64)).sum() / n)
    scale = np.where(p_true > eps_clip, -1.0 / (n * clipped), 0.0)
    dprobs = (targets * scale[:, None]).astype(probs.dtype)
    return loss, dprobs


class Optimizer:
    kind = "optimizer"

    def __init__(self, **hyper):
        self.hyper = hyper
        self.iteration = 0
        self.slots: dict[str, dict[str, np.ndarray]] = {}

    def step(self, params) -> None:
        """Apply one update to every trainable slot in ``params``, in place."""
        active = [p for p in params if p.trainable]
        missing = [p.name for p in active if p.grad is None]
        if missing:
            raise StateError(f"no gradient for trainable parameters: {', '.join(missing)}")
        for p in active:
            if p.name not in self.slots:
                self.slots[p.name] = self._init_slots(p.value)
            self._update(p, p.grad, self.slots[p.name])
        self.iteration += 1

    def _init_slots(self, value):
        raise NotImplementedError

    def _update(self, param, grad, slots):
        raise NotImplementedError

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.hyper.items())
        return f"{type(self).__name__}({args})"


class SGD(Optimizer):
    """Momentum SGD with inverse-time learning-rate decay per step."""

    kind = "sgd"

    def __init__(self, lr=1e-4, momentum=0.9, decay=1e-6):
        if lr <= 0 or not 0 <= momentum < 1 or decay < 0:
            raise ConfigError(f"invalid SGD hyperparameters lr={lr}, momentum={momentum}, decay={decay}")
        super().__init__(lr=lr, momentum=momentum, decay=decay)

    def current_lr(self) -> float:
        return self.hyper["lr"] / (1.0 + self.hyper["decay"] * self.iteration)

    def _init_slots(self, value):
        return {"velocity": np.zeros_like(value)}

    def _update(self, param, grad, slots):
        v = slots["velocity"]
        v *= self.hyper["momentum"]
        v -= self.current_lr() * grad
        param.value += v


class RMSprop(Optimizer):
    kind = "rmsprop"

    def __init__(self, lr=1e-3, rho=0.9, epsilon=1e-7):
        if lr <= 0 or not 0 <= rho < 1 or epsilon <= 0:
            raise ConfigError(f"invalid RMSprop hyperparameters lr={lr}, rho={rho}, epsilon={epsilon}")
        super().__init__(lr=lr, rho=rho, epsilon=epsilon)

    def _init_slots(self, value):
        return {"sq_avg": np.zeros_like(value)}

    def _update(self, param, grad, slots):
        rho, lr, eps = self.hyper["rho"], self.hyper["lr"], self.hyper["epsilon"]
        avg = slots["sq_avg"]
        avg *= rho
        avg += (1 - rho) * grad * grad
        param.value -= lr * grad / (np.sqrt(avg) + eps)


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-7):
        if lr <= 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or epsilon <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        super().__init__(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def _init_slots(self, value):
        return {"m": np.zeros_like(value), "v": np.zeros_like(value)}

    def _update(self, param, grad, slots):
        b1, b2 = self.hyper["beta1"], self.hyper["beta2"]
        t = self.iteration + 1
        m, v = slots["m"], slots["v"]
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        param.value -= self.hyper["lr"] * m_hat / (np.sqrt(v_hat) + self.hyper["epsilon"])


OPTIMIZERS = {cls.kind: cls for cls in (SGD, RMSprop, Adam)}


def make_optimizer(kind: str, **hyper) -> Optimizer:
    try:
        cls = OPTIMIZERS[kind]
    except KeyError:
        raise ConfigError(f"unknown optimizer {kind!r}; choose from {sorted(OPTIMIZERS)}") from None
    return cls(**hyper)
