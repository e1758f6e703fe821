"""Training losses and their gradients."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy over a batch of integer labels.

    Returns (loss, probabilities, gradient wrt logits). The gradient is
    (p - onehot) / N, i.e. already averaged over the batch.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    n = logits.shape[0]
    loss = -log_probs[np.arange(n), labels].mean()
    probs = np.exp(log_probs)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, probs, grad


def mse_loss(reconstruction, target):
    """Mean squared error and its gradient wrt the reconstruction."""
    reconstruction = np.asarray(reconstruction)
    target = np.asarray(target)
    if reconstruction.shape != target.shape:
        raise ShapeMismatch(f"{reconstruction.shape} vs {target.shape}")
    diff = reconstruction - target
    loss = float((diff ** 2).mean())
    return loss, 2.0 * diff / diff.size
