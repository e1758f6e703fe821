"""Concrete architectures and training protocols.

Builders default to the published layer widths; ``width_scale`` shrinks every
channel/hidden width proportionally for desk-scale runs and gradient checks
without changing the layer structure.
"""

from __future__ import annotations

import numpy as np

from . import metrics
from .errors import DivergedLoss
from .nn import (
    BatchNorm2d,
    Checkpoint,
    Conv2d,
    ConvTranspose2d,
    LeakyReLU,
    Linear,
    MaxPool2d,
    ReLU,
    Sequential,
    Softmax,
    TrainConfig,
    checkpoint_from_model,
    make_optimizer,
    model_from_checkpoint,
    softmax_cross_entropy,
)

N_CLASSES = 9


def _scaled(width, scale):
    return max(1, int(round(width * scale)))


def build_five_layer_cnn(width_scale=1.0, rng=None, dtype=np.float64) -> Sequential:
    """Five conv blocks (64..1024 filters at full width) and a 1000/500 head."""
    rng = rng or np.random.default_rng(0)
    chans = [_scaled(c, width_scale) for c in (64, 128, 256, 512, 1024)]
    hidden = [_scaled(c, width_scale) for c in (1000, 500)]
    layers = []
    in_ch = 1
    for i, out_ch in enumerate(chans):
        layers.append(Conv2d(in_ch, out_ch, 3, stride=1, padding=1, rng=rng, dtype=dtype))
        layers.append(LeakyReLU())
        if i < 4:
            layers.append(MaxPool2d(2, 2))
        layers.append(BatchNorm2d(out_ch, dtype=dtype))
        in_ch = out_ch
    layers += [
        Linear(2 * 2 * chans[4], hidden[0], rng=rng, dtype=dtype),
        LeakyReLU(),
        Linear(hidden[0], hidden[1], rng=rng, dtype=dtype),
        LeakyReLU(),
        Linear(hidden[1], N_CLASSES, rng=rng, dtype=dtype),
        Softmax(),
    ]
    return Sequential(layers, dtype=dtype)


def build_cae1(width_scale=1.0, rng=None, dtype=np.float64) -> Sequential:
    """32x32x1 -> 16x16x128 encoder, transposed-conv decoder back to 32x32x1."""
    rng = rng or np.random.default_rng(0)
    d1 = _scaled(128, width_scale)
    return Sequential([
        Conv2d(1, d1, 3, stride=1, padding=1, rng=rng, dtype=dtype),
        ReLU(),
        MaxPool2d(2, 2),
        ConvTranspose2d(d1, 1, 2, stride=2, rng=rng, dtype=dtype),
        ReLU(),
    ], dtype=dtype)


def build_cae2(width_scale=1.0, rng=None, dtype=np.float64) -> Sequential:
    """16x16x128 -> 8x8x256 encoder and decoder back to 16x16x128.

    The published table lists 128 filters for the encoder conv, but its
    output column (16x16x256) forces 256; the shape column wins here.
    """
    rng = rng or np.random.default_rng(0)
    d1 = _scaled(128, width_scale)
    d2 = _scaled(256, width_scale)
    return Sequential([
        Conv2d(d1, d2, 3, stride=1, padding=1, rng=rng, dtype=dtype),
        ReLU(),
        MaxPool2d(2, 2),
        ConvTranspose2d(d2, d1, 2, stride=2, rng=rng, dtype=dtype),
        ReLU(),
    ], dtype=dtype)


def encoder_layers(cae: Sequential):
    """The conv/relu/pool front of an autoencoder (everything before the decoder)."""
    return cae.layers[:3]


def encode(cae: Sequential, x, batch_size=256):
    outs = []
    for start in range(0, x.shape[0], batch_size):
        h = np.asarray(x[start:start + batch_size], dtype=cae.dtype)
        for layer in encoder_layers(cae):
            h = layer.forward(h, training=False)
        outs.append(h)
    return np.concatenate(outs, axis=0)


def build_pretrained_cnn(cae1=None, cae2=None, width_scale=1.0, rng=None,
                         dtype=np.float64) -> Sequential:
    """Two pretrained encoder stages, then a 500-wide relu head.

    With cae1/cae2 given, their encoder conv weights seed the conv layers;
    otherwise the same architecture is randomly initialized.
    """
    rng = rng or np.random.default_rng(0)
    d1 = _scaled(128, width_scale)
    d2 = _scaled(256, width_scale)
    hidden = _scaled(500, width_scale)
    conv1 = Conv2d(1, d1, 3, stride=1, padding=1, rng=rng, dtype=dtype)
    conv2 = Conv2d(d1, d2, 3, stride=1, padding=1, rng=rng, dtype=dtype)
    if cae1 is not None:
        src = cae1.layers[0]
        conv1.weight.data = src.weight.data.astype(dtype).copy()
        conv1.bias.data = src.bias.data.astype(dtype).copy()
    if cae2 is not None:
        src = cae2.layers[0]
        conv2.weight.data = src.weight.data.astype(dtype).copy()
        conv2.bias.data = src.bias.data.astype(dtype).copy()
    return Sequential([
        conv1, ReLU(), MaxPool2d(2, 2),
        conv2, ReLU(), MaxPool2d(2, 2),
        Linear(8 * 8 * d2, hidden, rng=rng, dtype=dtype),
        ReLU(),
        Linear(hidden, N_CLASSES, rng=rng, dtype=dtype),
        Softmax(),
    ], dtype=dtype)


def build_baseline_mlp(width_scale=1.0, rng=None, dtype=np.float64) -> Sequential:
    """Flattened-image MLP with 1000/500/100 hidden widths at full scale."""
    rng = rng or np.random.default_rng(0)
    widths = [_scaled(w, width_scale) for w in (1000, 500, 100)]
    layers = []
    in_w = 32 * 32
    for w in widths:
        layers += [Linear(in_w, w, rng=rng, dtype=dtype), LeakyReLU()]
        in_w = w
    layers += [Linear(in_w, N_CLASSES, rng=rng, dtype=dtype), Softmax()]
    return Sequential(layers, dtype=dtype)


def build_fusion_mlp(input_width, hidden=(100, 50), rng=None, dtype=np.float64) -> Sequential:
    rng = rng or np.random.default_rng(0)
    layers = []
    in_w = input_width
    for w in hidden:
        layers += [Linear(in_w, w, rng=rng, dtype=dtype), LeakyReLU()]
        in_w = w
    layers += [Linear(in_w, N_CLASSES, rng=rng, dtype=dtype), Softmax()]
    return Sequential(layers, dtype=dtype)


def predict_probs(model: Sequential, x, batch_size=256):
    outs = []
    for start in range(0, x.shape[0], batch_size):
        outs.append(model.forward(x[start:start + batch_size], training=False))
    return np.concatenate(outs, axis=0)


def train_classifier(model: Sequential, train_xy, val_xy, config: TrainConfig):
    """Cross-entropy training with per-epoch validation log loss in eval mode.

    The checkpoint with the strictly lowest validation log loss is returned,
    not the last epoch's. Metrics rows are (epoch, train_loss, val_logloss).
    A trailing batch of one sample is skipped (batchnorm needs batch >= 2).
    """
    x_train, y_train = train_xy
    x_val, y_val = val_xy
    rng = np.random.default_rng(config.seed)
    optim = make_optimizer(model.parameters(), config)
    best = None
    rows = []
    for epoch in range(config.epochs):
        order = rng.permutation(x_train.shape[0])
        loss_sum, seen = 0.0, 0
        for start in range(0, order.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            if idx.size == 1 and order.size > 1:
                continue
            model.zero_grad()
            logits = model.forward_logits(x_train[idx], training=True)
            loss, _, grad = softmax_cross_entropy(logits, y_train[idx])
            if not np.isfinite(loss):
                raise DivergedLoss(f"train loss {loss} not finite",
                                   epoch=epoch, batch=start // config.batch_size)
            model.backward(grad, from_logits=True)
            optim.step()
            loss_sum += loss * idx.size
            seen += idx.size
        val_probs = predict_probs(model, x_val)
        val_ll = metrics.log_loss(val_probs, y_val)
        if not np.isfinite(val_ll):
            raise DivergedLoss(f"validation log loss {val_ll} not finite", epoch=epoch)
        rows.append((epoch, loss_sum / seen, val_ll))
        if best is None or val_ll < best.best_val_logloss:
            best = checkpoint_from_model(model, best_val_logloss=val_ll, epoch=epoch)
    return best, rows


def train_autoencoder(model: Sequential, x, config: TrainConfig):
    """MSE reconstruction training; returns per-epoch (epoch, train_mse) rows."""
    from .nn import mse_loss

    rng = np.random.default_rng(config.seed)
    optim = make_optimizer(model.parameters(), config)
    rows = []
    for epoch in range(config.epochs):
        order = rng.permutation(x.shape[0])
        loss_sum, seen = 0.0, 0
        for start in range(0, order.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = x[idx]
            model.zero_grad()
            recon = model.forward(batch, training=True)
            loss, grad = mse_loss(recon, batch)
            if not np.isfinite(loss):
                raise DivergedLoss(f"reconstruction loss {loss} not finite",
                                   epoch=epoch, batch=start // config.batch_size)
            model.backward(grad)
            optim.step()
            loss_sum += loss * idx.size
            seen += idx.size
        rows.append((epoch, loss_sum / seen))
    return rows


def pretrain_cae_stack(images, config: TrainConfig, width_scale=1.0, rng=None,
                       dtype=np.float64):
    """Train CAE1 on images, CAE2 on CAE1's encodings of those images.

    Returns (cae1, cae2, log rows for both phases).
    """
    rng = rng or np.random.default_rng(config.seed)
    cae1 = build_cae1(width_scale=width_scale, rng=rng, dtype=dtype)
    rows1 = train_autoencoder(cae1, images, config)
    codes = encode(cae1, images)
    cae2 = build_cae2(width_scale=width_scale, rng=rng, dtype=dtype)
    rows2 = train_autoencoder(cae2, codes, config)
    return cae1, cae2, {"cae1": rows1, "cae2": rows2}


def extract_probability_features(checkpoint, x, dtype=np.float64):
    """Nine class probabilities per sample from a saved best model, eval mode."""
    if isinstance(checkpoint, Checkpoint):
        model = model_from_checkpoint(checkpoint, dtype=dtype)
    else:
        model = checkpoint
    return predict_probs(model, np.asarray(x, dtype=dtype))


def parameter_count(model: Sequential) -> int:
    return int(sum(p.data.size for _, p in model.parameters()))


def gradient_audit(width_scale=1 / 32, eps=1e-5, seed=0):
    """Finite-difference audit of every architecture at reduced widths.

    Returns {architecture name: gradient_check report}; classifiers check
    against cross entropy, autoencoders against reconstruction MSE.
    """
    from .nn import gradient_check

    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, size=(2, 1, 32, 32))
    labels = rng.integers(0, N_CLASSES, size=2)
    d1 = _scaled(128, width_scale)
    codes = rng.normal(size=(2, d1, 16, 16))
    fused = rng.uniform(0.0, 1.0, size=(2, 23))

    reports = {}
    reports["five_layer_cnn"] = gradient_check(
        build_five_layer_cnn(width_scale, rng=rng), images, labels, loss="ce", eps=eps)
    reports["cae1"] = gradient_check(
        build_cae1(width_scale, rng=rng), images, images.copy(), loss="mse", eps=eps)
    reports["cae2"] = gradient_check(
        build_cae2(width_scale, rng=rng), codes, codes.copy(), loss="mse", eps=eps)
    reports["pretrained_cnn"] = gradient_check(
        build_pretrained_cnn(width_scale=width_scale, rng=rng), images, labels,
        loss="ce", eps=eps)
    reports["baseline_mlp"] = gradient_check(
        build_baseline_mlp(width_scale, rng=rng), images, labels, loss="ce", eps=eps)
    reports["fusion_mlp"] = gradient_check(
        build_fusion_mlp(fused.shape[1], rng=rng), fused, labels, loss="ce", eps=eps)
    return reports
