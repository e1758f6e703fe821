"""Finite-difference verification of analytic gradients.

Central differences with step ``eps`` against the backward pass, at 64-bit
precision. The relative error denominator is floored at 1e-6 so that
exactly-zero gradients compare on finite-difference noise alone.
"""

from __future__ import annotations

import numpy as np

from .layers import Sequential
from .losses import mse_loss, softmax_cross_entropy

REL_FLOOR = 1e-6


def _loss_value(model: Sequential, x, target, loss_kind):
    if loss_kind == "ce":
        logits = model.forward_logits(x, training=True)
        value, _, _ = softmax_cross_entropy(logits, target)
        return value
    out = model.forward(x, training=True)
    value, _ = mse_loss(out, target)
    return value


def _analytic_grads(model: Sequential, x, target, loss_kind):
    model.zero_grad()
    if loss_kind == "ce":
        logits = model.forward_logits(x, training=True)
        _, _, grad = softmax_cross_entropy(logits, target)
        dx = model.backward(grad, from_logits=True)
    else:
        out = model.forward(x, training=True)
        _, grad = mse_loss(out, target)
        dx = model.backward(grad)
    return dx


def _rel_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def gradient_check(model: Sequential, x, target, loss="ce", eps=1e-5,
                   check_input=True):
    """Compare every parameter gradient (and optionally d/dinput) to central
    differences. Returns a report dict with the per-tensor and overall worst
    relative errors."""
    x = np.asarray(x, dtype=np.float64)
    dx = _analytic_grads(model, x, target, loss)
    entries = [(name, p.data, p.grad.copy()) for name, p in model.parameters()]
    if check_input:
        entries.append(("input", x, dx))

    per_tensor = {}
    worst = ("", 0.0)
    for name, data, grad in entries:
        flat = data.reshape(-1)
        gflat = grad.reshape(-1)
        tensor_worst = 0.0
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + eps
            up = _loss_value(model, x, target, loss)
            flat[idx] = keep - eps
            down = _loss_value(model, x, target, loss)
            flat[idx] = keep
            numeric = (up - down) / (2.0 * eps)
            err = _rel_error(gflat[idx], numeric)
            if err > tensor_worst:
                tensor_worst = err
        per_tensor[name] = tensor_worst
        if tensor_worst > worst[1]:
            worst = (name, tensor_worst)

    per_layer = {}
    for name, err in per_tensor.items():
        layer = name.rsplit(".", 1)[0]
        per_layer[layer] = max(per_layer.get(layer, 0.0), err)
    return {
        "max_rel_error": worst[1],
        "worst_tensor": worst[0],
        "per_tensor": per_tensor,
        "per_layer": per_layer,
    }
