"""Support vector machines trained by sequential minimal optimization.

The binary solver keeps the dual gradient updated and picks working pairs
with a maximal-violation first index and a second-order second index;
termination is max KKT violation < tolerance. Multiclass wraps nine
one-vs-rest machines whose decision values are Platt-calibrated and
normalized into class probabilities.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import SingleClassInput, WidthMismatch

_TAU = 1e-12
PROB_FLOOR = 1e-12


@dataclass
class SvmParams:
    C: float = 10.0
    kernel: str = "rbf"          # "linear" | "rbf"
    gamma: float = 0.1
    tolerance: float = 1e-3
    max_iter: int = 200_000
    cache_mb: float = 256.0

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("C must be positive")
        if self.kernel not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "rbf" and self.gamma <= 0:
            raise ValueError("gamma must be positive for the rbf kernel")


def kernel_eval(params: SvmParams, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise WidthMismatch(f"{x.shape} vs {y.shape}")
    if params.kernel == "linear":
        return float(x @ y)
    d2 = float(((x - y) ** 2).sum())
    return float(np.exp(-params.gamma * d2))


def gram(params: SvmParams, a, b=None) -> np.ndarray:
    """Kernel matrix K[i, j] = k(a_i, b_j); b defaults to a."""
    a = np.asarray(a, dtype=np.float64)
    b = a if b is None else np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise WidthMismatch(f"feature widths {a.shape[1]} vs {b.shape[1]}")
    if params.kernel == "linear":
        return a @ b.T
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-params.gamma * d2)


class _RowCache:
    """Kernel rows on demand, bounded by a memory budget."""

    def __init__(self, params, x, cache_mb):
        self.params = params
        self.x = x
        n = x.shape[0]
        max_rows = max(2, int(cache_mb * 2 ** 20 / (8 * n)))
        self.full = max_rows >= n
        if self.full:
            self.matrix = gram(params, x)
        else:
            self.rows = OrderedDict()
            self.max_rows = max_rows
        self.diag = np.ones(n) if params.kernel == "rbf" \
            else (x * x).sum(axis=1)

    def row(self, i):
        if self.full:
            return self.matrix[i]
        if i in self.rows:
            self.rows.move_to_end(i)
            return self.rows[i]
        value = gram(self.params, self.x[i:i + 1], self.x)[0]
        self.rows[i] = value
        if len(self.rows) > self.max_rows:
            self.rows.popitem(last=False)
        return value


@dataclass
class BinarySvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray        # alpha_i * y_i over support vectors
    bias: float
    params: SvmParams
    support_idx: np.ndarray
    alpha: np.ndarray            # full alpha vector over the training set
    objective: float             # minimized dual value 0.5 a'Qa - e'a
    converged: bool
    n_iter: int

    def decision_function(self, x=None, cross=None):
        """Sum_i alpha_i y_i k(sv_i, x) + b; ``cross`` is an optional
        precomputed (n_test, n_train) kernel block over the full train set."""
        if cross is not None:
            return cross[:, self.support_idx] @ self.dual_coef + self.bias
        k = gram(self.params, np.asarray(x, dtype=np.float64), self.support_vectors)
        return k @ self.dual_coef + self.bias


def train_binary_svm_smo(x, y, params: SvmParams, kernel_matrix=None) -> BinarySvmModel:
    """Solve the soft-margin dual for labels y in {-1, +1}.

    Exits when the maximal KKT violation drops below ``params.tolerance``;
    if ``max_iter`` is hit first the model is still returned with
    ``converged=False``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not ((y > 0).any() and (y < 0).any()):
        raise SingleClassInput("need both +1 and -1 labels")
    n = y.size
    C = params.C

    if kernel_matrix is not None:
        cache = None
        kmat = np.asarray(kernel_matrix, dtype=np.float64)
        diag = np.diag(kmat).copy()
        get_row = lambda i: kmat[i]
    else:
        cache = _RowCache(params, x, params.cache_mb)
        diag = cache.diag
        get_row = cache.row

    alpha = np.zeros(n)
    grad = -np.ones(n)           # gradient of 0.5 a'Qa - e'a at a = 0
    converged = False
    it = 0
    while it < params.max_iter:
        it += 1
        neg_yg = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.argmax(np.where(up, neg_yg, -np.inf)))
        m_up = neg_yg[i]
        m_low = float(np.min(np.where(low, neg_yg, np.inf)))
        if m_up - m_low < params.tolerance:
            converged = True
            break
        row_i = get_row(i)
        # second-order gain over admissible j
        b_vec = m_up - neg_yg
        a_vec = diag[i] + diag - 2.0 * row_i
        a_vec = np.where(a_vec > _TAU, a_vec, _TAU)
        cand = low & (neg_yg < m_up)
        score = -(b_vec * b_vec) / a_vec
        j = int(np.argmin(np.where(cand, score, np.inf)))

        # largest feasible step along (y_i e_i, -y_j e_j)
        delta = b_vec[j] / a_vec[j]
        delta = min(delta,
                    (C - alpha[i]) if y[i] > 0 else alpha[i],
                    alpha[j] if y[j] > 0 else (C - alpha[j]))
        if delta <= 0:
            converged = True
            break
        row_j = get_row(j)
        d_i = y[i] * delta
        d_j = -y[j] * delta
        alpha[i] += d_i
        alpha[j] += d_j
        grad += y * (d_i * y[i] * row_i + d_j * y[j] * row_j)

    neg_yg = -y * grad
    free = (alpha > _TAU) & (alpha < C - _TAU)
    if free.any():
        bias = float(neg_yg[free].mean())
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        hi = np.max(np.where(up, neg_yg, -np.inf)) if up.any() else 0.0
        lo = np.min(np.where(low, neg_yg, np.inf)) if low.any() else 0.0
        bias = float((hi + lo) / 2.0)

    objective = float(0.5 * (alpha * (grad - 1.0)).sum())
    sv = alpha > _TAU
    return BinarySvmModel(
        support_vectors=x[sv].copy(),
        dual_coef=(alpha * y)[sv],
        bias=bias,
        params=params,
        support_idx=np.flatnonzero(sv),
        alpha=alpha,
        objective=objective,
        converged=converged,
        n_iter=it,
    )


def platt_fit(decisions, targets, max_iter=100, min_step=1e-10, sigma=1e-12):
    """Sigmoid calibration P(y=1|f) = 1/(1+exp(A f + B)) by regularized
    maximum likelihood (Newton with backtracking)."""
    f = np.asarray(decisions, dtype=np.float64)
    t = np.asarray(targets, dtype=bool)
    prior1 = int(t.sum())
    prior0 = t.size - prior1
    hi = (prior1 + 1.0) / (prior1 + 2.0)
    lo = 1.0 / (prior0 + 2.0)
    target = np.where(t, hi, lo)

    def objective(a, b):
        fab = a * f + b
        # log(1 + exp(-|fab|)) + max(fab, 0) is the stable log(1+exp(fab))
        return float(np.sum(target * fab + np.log1p(np.exp(-np.abs(fab)))
                            + np.maximum(-fab, 0.0)))

    A, B = 0.0, np.log((prior0 + 1.0) / (prior1 + 1.0))
    value = objective(A, B)
    for _ in range(max_iter):
        fab = A * f + B
        p = np.where(fab >= 0, np.exp(-fab) / (1.0 + np.exp(-fab)),
                     1.0 / (1.0 + np.exp(fab)))
        d1 = target - p
        d2 = p * (1.0 - p)
        g1 = float(np.sum(f * d1))
        g2 = float(np.sum(d1))
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        h11 = float(np.sum(f * f * d2)) + sigma
        h22 = float(np.sum(d2)) + sigma
        h21 = float(np.sum(f * d2))
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= min_step:
            new_a, new_b = A + step * dA, B + step * dB
            new_value = objective(new_a, new_b)
            if new_value < value + 1e-4 * step * gd:
                A, B, value = new_a, new_b, new_value
                break
            step /= 2.0
        else:
            break
    return float(A), float(B)


def _sigmoid_ab(f, a, b):
    fab = a * f + b
    return np.where(fab >= 0, np.exp(-fab) / (1.0 + np.exp(-fab)),
                    1.0 / (1.0 + np.exp(fab)))


@dataclass
class MulticlassSvmModel:
    n_classes: int
    binaries: list               # BinarySvmModel or None for absent classes
    platt: list                  # (A, B) per class
    params: SvmParams

    def decision_matrix(self, x=None, cross=None):
        n = cross.shape[0] if cross is not None else np.asarray(x).shape[0]
        out = np.full((n, self.n_classes), -1.0)
        for c, model in enumerate(self.binaries):
            if model is not None:
                out[:, c] = model.decision_function(x=x, cross=cross)
        return out

    def predict_proba(self, x=None, cross=None, decisions=None):
        if decisions is None:
            decisions = self.decision_matrix(x=x, cross=cross)
        raw = np.empty_like(decisions)
        for c in range(self.n_classes):
            a, b = self.platt[c]
            raw[:, c] = _sigmoid_ab(decisions[:, c], a, b)
        raw = np.maximum(raw, PROB_FLOOR)
        return raw / raw.sum(axis=1, keepdims=True)


def train_multiclass_svm(x, labels, params: SvmParams, x_cal=None, y_cal=None,
                         n_classes=9) -> MulticlassSvmModel:
    """One-vs-rest training; Platt sigmoids are fitted on the calibration
    split (the validation data in the pipeline), falling back to the
    training data when none is given."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise SingleClassInput("need at least two classes to train one-vs-rest")
    if x_cal is None:
        x_cal, y_cal = x, labels
    x_cal = np.asarray(x_cal, dtype=np.float64)
    y_cal = np.asarray(y_cal)

    kmat = gram(params, x)
    cross = gram(params, x_cal, x)
    binaries, platt = [], []
    for c in range(n_classes):
        if not (labels == c).any():
            binaries.append(None)
            platt.append((0.0, 30.0))  # sigmoid ~ 0 for a class never seen
            continue
        y_bin = np.where(labels == c, 1.0, -1.0)
        model = train_binary_svm_smo(x, y_bin, params, kernel_matrix=kmat)
        binaries.append(model)
        dec = model.decision_function(cross=cross)
        platt.append(platt_fit(dec, y_cal == c))
    return MulticlassSvmModel(n_classes=n_classes, binaries=binaries,
                              platt=platt, params=params)


def svm_predict(model: MulticlassSvmModel, x):
    """Returns (predicted classes, probability matrix, decision matrix)."""
    x = np.asarray(x, dtype=np.float64)
    decisions = model.decision_matrix(x=x)
    probs = model.predict_proba(decisions=decisions)
    return probs.argmax(axis=1), probs, decisions


def save_multiclass(model: MulticlassSvmModel, path):
    """Delimited text: kernel spec then, per class, Platt A/B, bias and the
    support vectors with their dual coefficients."""
    with open(path, "w", encoding="utf-8") as fh:
        p = model.params
        fh.write(f"kernel,{p.kernel},C,{p.C!r},gamma,{p.gamma!r},classes,{model.n_classes}\n")
        for c, binary in enumerate(model.binaries):
            a, b = model.platt[c]
            if binary is None:
                fh.write(f"class,{c},absent,platt,{a!r},{b!r}\n")
                continue
            fh.write(f"class,{c},sv,{binary.support_vectors.shape[0]},"
                     f"bias,{binary.bias!r},platt,{a!r},{b!r}\n")
            for vec, coef in zip(binary.support_vectors, binary.dual_coef):
                fh.write(",".join(repr(float(v)) for v in vec) + f",{coef!r}\n")


def load_multiclass(path) -> MulticlassSvmModel:
    with open(path, "r", encoding="utf-8") as fh:
        head = fh.readline().strip().split(",")
        params = SvmParams(C=float(head[3]), kernel=head[1], gamma=float(head[5]))
        n_classes = int(head[7])
        binaries, platt = [], []
        line = fh.readline()
        while line:
            parts = line.strip().split(",")
            assert parts[0] == "class"
            if parts[2] == "absent":
                binaries.append(None)
                platt.append((float(parts[4]), float(parts[5])))
                line = fh.readline()
                continue
            n_sv = int(parts[3])
            bias = float(parts[5])
            platt.append((float(parts[7]), float(parts[8])))
            vecs, coefs = [], []
            for _ in range(n_sv):
                row = fh.readline().strip().split(",")
                vecs.append([float(v) for v in row[:-1]])
                coefs.append(float(row[-1]))
            sv = np.array(vecs)
            binaries.append(BinarySvmModel(
                support_vectors=sv, dual_coef=np.array(coefs), bias=bias,
                params=params, support_idx=np.arange(n_sv),
                alpha=np.abs(np.array(coefs)), objective=float("nan"),
                converged=True, n_iter=0))
            line = fh.readline()
    return MulticlassSvmModel(n_classes=n_classes, binaries=binaries,
                              platt=platt, params=params)


BASELINE_GRID = (
    ("linear", SvmParams(C=1.0, kernel="linear")),
    ("rbf", SvmParams(C=10.0, kernel="rbf", gamma=0.1)),
)


def grid_baseline_eval(features, labels, splits, n_classes=9):
    """Linear C=1 and RBF C=10 gamma=0.1 over the given (train, val, test)
    index splits; returns per-kernel mean and std of test log loss."""
    from . import metrics

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    report = {}
    for name, params in BASELINE_GRID:
        losses = []
        for train_idx, val_idx, test_idx in splits:
            model = train_multiclass_svm(
                features[train_idx], labels[train_idx], params,
                x_cal=features[val_idx], y_cal=labels[val_idx],
                n_classes=n_classes)
            _, probs, _ = svm_predict(model, features[test_idx])
            losses.append(metrics.log_loss(probs, labels[test_idx]))
        losses = np.array(losses)
        std = float(losses.std(ddof=1)) if losses.size > 1 else 0.0
        report[name] = {"mean": float(losses.mean()), "std": std,
                        "runs": [float(v) for v in losses]}
    return report
