"""Adaptive-moment optimizer and training hyperparameter bundles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 20
    learning_rate: float = 0.001
    weight_decay: float = 0.0
    seed: int = 0
    optimizer: str = "adam"     # "adam" | "sgd" (momentum 0.9)

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.weight_decay < 0 or self.seed < 0:
            raise ValueError("weight_decay and seed must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def cnn_defaults(cls, **overrides):
        base = dict(epochs=30, batch_size=20, learning_rate=0.001, weight_decay=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def cae_defaults(cls, **overrides):
        base = dict(epochs=100, batch_size=20, learning_rate=0.001, weight_decay=1e-5)
        base.update(overrides)
        return cls(**base)


class Adam:
    """Adam with weight decay folded into the gradient as an L2 term."""

    def __init__(self, named_params, learning_rate=0.001, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8):
        self.named_params = list(named_params)
        self.lr = learning_rate
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, (_, p) in enumerate(self.named_params):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Sgd:
    """Plain momentum SGD; the stable choice when fine-tuning pretrained
    layers whose activation scales Adam's normalized steps would wreck."""

    def __init__(self, named_params, learning_rate=0.001, weight_decay=0.0,
                 momentum=0.9):
        self.named_params = list(named_params)
        self.lr = learning_rate
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self):
        for k, (_, p) in enumerate(self.named_params):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.velocity[k] = self.momentum * self.velocity[k] + g
            p.data = p.data - self.lr * self.velocity[k]


def make_optimizer(named_params, config: TrainConfig):
    cls = Adam if config.optimizer == "adam" else Sgd
    return cls(named_params, learning_rate=config.learning_rate,
               weight_decay=config.weight_decay)
