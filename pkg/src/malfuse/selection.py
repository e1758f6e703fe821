"""Wrapper-based opcode selection: forward search in steps of 10 over a
ranked candidate pool, then backward refinement removing one feature at a
time, with an SVM as the inner evaluator.

The evaluator only ever sees TRAIN and VAL data; scores are deterministic so
a selection trace replays bitwise for a given corpus and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .errors import PoolTooSmall
from .svm import SvmParams, train_multiclass_svm

FORWARD, BACKWARD = "FORWARD", "BACKWARD"


@dataclass
class EvaluatorConfig:
    svm: SvmParams = field(default_factory=lambda: SvmParams(C=10.0, kernel="rbf", gamma=0.1))
    metric: str = "logloss"      # "logloss" (lower wins) | "accuracy" (higher wins)

    def better(self, a, b) -> bool:
        return a < b if self.metric == "logloss" else a > b

    def not_worse(self, a, b) -> bool:
        return a <= b if self.metric == "logloss" else a >= b


@dataclass
class SelectionTrace:
    rows: list          # (phase, size, metric, tuple of feature ids)
    final_subset: list  # feature ids, ranked order


class SvmSubsetEvaluator:
    """Scores a feature subset: fresh inner SVM on the TRAIN columns,
    metric on VAL. Calibration also uses VAL, never TEST."""

    def __init__(self, x_train, y_train, x_val, y_val, config: EvaluatorConfig,
                 n_classes=9):
        self.x_train = np.asarray(x_train, dtype=np.float64)
        self.y_train = np.asarray(y_train)
        self.x_val = np.asarray(x_val, dtype=np.float64)
        self.y_val = np.asarray(y_val)
        self.config = config
        self.n_classes = n_classes
        self.evaluations = 0

    def __call__(self, feature_ids) -> float:
        ids = list(feature_ids)
        self.evaluations += 1
        model = train_multiclass_svm(
            self.x_train[:, ids], self.y_train, self.config.svm,
            x_cal=self.x_val[:, ids], y_cal=self.y_val,
            n_classes=self.n_classes)
        probs = model.predict_proba(x=self.x_val[:, ids])
        if self.config.metric == "logloss":
            return metrics.log_loss(probs, self.y_val)
        return metrics.accuracy(probs, self.y_val)


def rank_candidates(tf_matrix, names=None) -> list:
    """Candidate order: training-split document frequency descending, ties
    lexicographic on the feature name (index order when unnamed)."""
    tf_matrix = np.asarray(tf_matrix)
    df = (tf_matrix > 0).sum(axis=0)
    idx = range(tf_matrix.shape[1])
    if names is None:
        return sorted(idx, key=lambda j: (-int(df[j]), j))
    return sorted(idx, key=lambda j: (-int(df[j]), names[j]))


def forward_search(ranked, evaluator, config: EvaluatorConfig, step=10, patience=1):
    """Evaluate ranked prefixes of sizes step, 2*step, ...; stop after the
    metric has been worse than the best seen for ``patience`` consecutive
    steps, or when the pool is exhausted. Returns (best prefix, trace rows)."""
    ranked = list(ranked)
    if len(ranked) < step:
        raise PoolTooSmall(f"pool of {len(ranked)} < first step {step}")
    rows = []
    best_metric, best_size = None, None
    degraded = 0
    size = step
    while True:
        size = min(size, len(ranked))
        prefix = ranked[:size]
        value = evaluator(prefix)
        rows.append((FORWARD, size, value, tuple(prefix)))
        if best_metric is None or config.better(value, best_metric):
            best_metric, best_size = value, size
            degraded = 0
        else:
            degraded += 1
            if degraded >= patience:
                break
        if size == len(ranked):
            break
        size += step
    return ranked[:best_size], best_metric, rows


def backward_refine(prefix, evaluator, config: EvaluatorConfig,
                    start_metric=None, mode="greedy"):
    """Drop one feature per step while the metric does not worsen.

    ``greedy`` removes whichever feature's removal scores best (ties to the
    lowest feature id); ``last-added`` only ever considers the most recently
    ranked feature.
    """
    current = list(prefix)
    current_metric = evaluator(current) if start_metric is None else start_metric
    rows = []
    while len(current) > 1:
        if mode == "last-added":
            candidates = [len(current) - 1]
        else:
            candidates = range(len(current))
        best_pos, best_value = None, None
        for pos in candidates:
            trial = current[:pos] + current[pos + 1:]
            value = evaluator(trial)
            if best_value is None or config.better(value, best_value) \
                    or (value == best_value and current[pos] < current[best_pos]):
                best_pos, best_value = pos, value
        if best_value is None or not config.not_worse(best_value, current_metric):
            break
        del current[best_pos]
        current_metric = best_value
        rows.append((BACKWARD, len(current), current_metric, tuple(current)))
    return current, current_metric, rows


def select_features(x_train, y_train, x_val, y_val, config: EvaluatorConfig,
                    names=None, step=10, patience=1, backward_mode="greedy",
                    n_classes=9) -> SelectionTrace:
    """Full wrapper pass over a TF table; returns the replayable trace."""
    evaluator = SvmSubsetEvaluator(x_train, y_train, x_val, y_val, config,
                                   n_classes=n_classes)
    ranked = rank_candidates(x_train, names)
    prefix, peak_metric, fwd_rows = forward_search(ranked, evaluator, config,
                                                   step=step, patience=patience)
    final, _, bwd_rows = backward_refine(prefix, evaluator, config,
                                         start_metric=peak_metric, mode=backward_mode)
    return SelectionTrace(rows=fwd_rows + bwd_rows, final_subset=final)


def save_trace(trace: SelectionTrace, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("phase,size,metric,feature_ids\n")
        for phase, size, value, ids in trace.rows:
            fh.write(f"{phase},{size},{value!r}," + "|".join(str(i) for i in ids) + "\n")


def save_subset(feature_ids, path, names=None):
    with open(path, "w", encoding="utf-8") as fh:
        for fid in feature_ids:
            fh.write((names[fid] if names else str(fid)) + "\n")


def load_subset(path, names=None) -> list:
    lines = [ln.strip() for ln in open(path, "r", encoding="utf-8") if ln.strip()]
    if names is None:
        return [int(ln) for ln in lines]
    index = {name: i for i, name in enumerate(names)}
    return [index[ln] for ln in lines]
