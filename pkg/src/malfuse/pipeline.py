"""End-to-end orchestration: extract, select, fuse, train the fusion MLP and
report every evaluation metric.

Test-partition hygiene is enforced structurally: per-run data lives behind a
SplitData handle that records (stage, partition) on every access, and TEST
may only be touched by the evaluate stage. The access log is part of each
run's result so the property is checkable after the fact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus, features, metrics, models, selection, svm
from .config import RunConfig
from .errors import IdSetMismatch, StageError
from .metrics import PredictionBatch, accuracy, confusion, log_loss
from .nn import TrainConfig, save_checkpoint

EVALUATE_STAGES = ("evaluate",)


class AccessLog:
    """Records which pipeline stage touched which partition."""

    def __init__(self):
        self.events = []
        self.stage = "init"

    def set_stage(self, stage):
        self.stage = stage

    def record(self, partition, item):
        self.events.append((self.stage, partition, item))

    def test_violations(self, allowed=EVALUATE_STAGES):
        return [e for e in self.events
                if e[1] == corpus.TEST and e[0] not in allowed]


class SplitData:
    """Per-partition arrays; every read goes through the access log."""

    def __init__(self, log: AccessLog, parts: dict):
        self.log = log
        self.parts = parts

    def get(self, partition, item):
        self.log.record(partition, item)
        return self.parts[partition][item]


@dataclass
class CorpusBundle:
    manifest: corpus.CorpusManifest
    ids: list
    labels: np.ndarray
    docs: list                  # AsmDocument per sample, manifest order
    images: np.ndarray          # (N, 1, 32, 32) float64


def prepare_corpus(data_root, labels_file="trainLabels.csv") -> CorpusBundle:
    """Parse every sample once; reused across runs (parsing is split-free)."""
    root = Path(data_root)
    labels = corpus.load_labels(root / labels_file)
    manifest = corpus.ingest_corpus(root, labels)
    docs, imgs = [], []
    for sample in manifest.samples:
        with open(sample.asm_source, "r", encoding="utf-8") as fh:
            docs.append(corpus.parse_asm_file(fh))
        with open(sample.bytes_source, "r", encoding="utf-8") as fh:
            records = corpus.parse_bytes_file(fh, path=sample.bytes_source)
        imgs.append(features.bytes_to_image(records).pixels)
    images = np.stack(imgs)[:, None, :, :]
    return CorpusBundle(manifest=manifest, ids=manifest.ids(),
                        labels=manifest.labels(), docs=docs, images=images)


def fuse_features(ids_a, probs_a, ids_b, probs_b, ids_tf, tf_rows,
                  train_ids=None):
    """Concatenate [CNN-A 9 | CNN-B 9 | selected opcodes] aligned by id.

    The three blocks must cover the same id set; the TF block is expected to
    be min-max normalized already. With ``train_ids`` given, the whole
    concatenation is re-normalized by min-max fitted on those rows only.
    Returns (ids, matrix) in ids_a order.
    """
    ids_a, ids_b, ids_tf = list(ids_a), list(ids_b), list(ids_tf)
    if set(ids_a) != set(ids_b) or set(ids_a) != set(ids_tf):
        raise IdSetMismatch("probability and opcode blocks cover different ids")
    if len(set(ids_a)) != len(ids_a):
        raise IdSetMismatch("duplicate ids in a feature block")
    pos_b = {sid: k for k, sid in enumerate(ids_b)}
    pos_tf = {sid: k for k, sid in enumerate(ids_tf)}
    probs_a = np.asarray(probs_a, dtype=np.float64)
    probs_b = np.asarray(probs_b, dtype=np.float64)
    tf_rows = np.asarray(tf_rows, dtype=np.float64)
    order_b = [pos_b[sid] for sid in ids_a]
    order_tf = [pos_tf[sid] for sid in ids_a]
    table = np.hstack([probs_a, probs_b[order_b], tf_rows[order_tf]])
    if train_ids is not None:
        rows = [k for k, sid in enumerate(ids_a) if sid in set(train_ids)]
        params = features.minmax_fit(table[rows])
        table = features.minmax_apply(params, table)
    return ids_a, table


@dataclass
class RunResult:
    run_index: int
    seed: int
    dlmd_logloss: float
    dlmd_accuracy: float
    cnn_logloss: float
    pretrained_logloss: float
    svm_opcode_logloss: float
    n_selected: int
    selected_names: list
    confusion: np.ndarray
    access_log: AccessLog
    epoch_logs: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    runs: list
    mean_logloss: float
    std_logloss: float
    mean_accuracy: float
    std_accuracy: float
    confusion: np.ndarray       # designated run (index 0)
    fingerprint: str


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _partition_indices(split: corpus.SplitAssignment, ids):
    index_of = {sid: k for k, sid in enumerate(ids)}
    out = {}
    for part in corpus.PARTITIONS:
        out[part] = np.array(sorted(index_of[sid] for sid in split.ids_for(part)),
                             dtype=np.int64)
    return out


def single_run(cfg: RunConfig, bundle: CorpusBundle, run_index: int,
               out_dir=None) -> RunResult:
    """One full pipeline pass at seed cfg.seed + run_index."""
    run_seed = cfg.seed + run_index
    split = corpus.stratified_split(bundle.manifest, run_seed,
                                    cfg.test_fraction, cfg.val_fraction)
    idx = _partition_indices(split, bundle.ids)

    log = AccessLog()
    parts = {}
    for part in corpus.PARTITIONS:
        sel = idx[part]
        parts[part] = {
            "images": bundle.images[sel],
            "labels": bundle.labels[sel],
            "ids": [bundle.ids[k] for k in sel],
            "docs": [bundle.docs[k] for k in sel],
        }
    data = SplitData(log, parts)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        corpus.save_split(split, out_dir / "split.csv")

    # --- opcode features (train/val only; test is deferred to evaluate) ---
    log.set_stage("featurize")
    vocab = features.build_vocabulary(data.get(corpus.TRAIN, "docs"), cfg.vocab_cap)
    tf_train = np.stack([features.extract_opcode_tf(d, vocab)
                         for d in data.get(corpus.TRAIN, "docs")])
    tf_params = features.minmax_fit(tf_train)
    tf_train_n = features.minmax_apply(tf_params, tf_train)
    tf_val_n = features.minmax_apply(tf_params, np.stack(
        [features.extract_opcode_tf(d, vocab) for d in data.get(corpus.VAL, "docs")]))
    y_train = data.get(corpus.TRAIN, "labels")
    y_val = data.get(corpus.VAL, "labels")

    # --- feature extractor A: five-layer CNN trained from scratch ---
    log.set_stage("train-cnn")
    cnn_cfg = cfg.train_settings("cnn")
    model_a = models.build_five_layer_cnn(
        width_scale=cnn_cfg.width_scale, rng=np.random.default_rng([run_seed, 1]))
    ckpt_a, rows_a = models.train_classifier(
        model_a,
        (data.get(corpus.TRAIN, "images"), y_train),
        (data.get(corpus.VAL, "images"), y_val),
        TrainConfig(epochs=cnn_cfg.epochs, batch_size=cnn_cfg.batch_size,
                    learning_rate=cnn_cfg.learning_rate,
                    weight_decay=cnn_cfg.weight_decay, seed=run_seed,
                    optimizer=cnn_cfg.optimizer))
    probs_a_train = models.extract_probability_features(
        ckpt_a, data.get(corpus.TRAIN, "images"))
    probs_a_val = models.extract_probability_features(
        ckpt_a, data.get(corpus.VAL, "images"))

    # --- feature extractor B: CAE-pretrained CNN ---
    log.set_stage("pretrain-cae")
    cae_cfg = cfg.train_settings("cae")
    cae1, cae2, cae_logs = models.pretrain_cae_stack(
        data.get(corpus.TRAIN, "images"),
        TrainConfig(epochs=cae_cfg.epochs, batch_size=cae_cfg.batch_size,
                    learning_rate=cae_cfg.learning_rate,
                    weight_decay=cae_cfg.weight_decay, seed=run_seed,
                    optimizer=cae_cfg.optimizer),
        width_scale=cae_cfg.width_scale,
        rng=np.random.default_rng([run_seed, 2]))

    log.set_stage("train-pretrained")
    pre_cfg = cfg.train_settings("pretrained")
    model_b = models.build_pretrained_cnn(
        cae1, cae2, width_scale=cae_cfg.width_scale,
        rng=np.random.default_rng([run_seed, 3]))
    ckpt_b, rows_b = models.train_classifier(
        model_b,
        (data.get(corpus.TRAIN, "images"), y_train),
        (data.get(corpus.VAL, "images"), y_val),
        TrainConfig(epochs=pre_cfg.epochs, batch_size=pre_cfg.batch_size,
                    learning_rate=pre_cfg.learning_rate,
                    weight_decay=pre_cfg.weight_decay, seed=run_seed,
                    optimizer=pre_cfg.optimizer))
    probs_b_train = models.extract_probability_features(
        ckpt_b, data.get(corpus.TRAIN, "images"))
    probs_b_val = models.extract_probability_features(
        ckpt_b, data.get(corpus.VAL, "images"))

    # --- wrapper selection over the opcode table ---
    log.set_stage("select")
    eval_cfg = selection.EvaluatorConfig(svm=cfg.svm_params(),
                                         metric=cfg["selection.metric"])
    trace = selection.select_features(
        tf_train_n, y_train, tf_val_n, y_val, eval_cfg,
        names=vocab.tokens, step=cfg["selection.step"],
        patience=cfg["selection.patience"],
        backward_mode=cfg["selection.backward"])
    selected = trace.final_subset

    log.set_stage("train-opcode-svm")
    svm_model = svm.train_multiclass_svm(
        tf_train_n[:, selected], y_train, cfg.svm_params(),
        x_cal=tf_val_n[:, selected], y_cal=y_val)

    # --- fuse and train the final MLP ---
    log.set_stage("fuse")
    hybrid_train = np.hstack([probs_a_train, probs_b_train, tf_train_n[:, selected]])
    hybrid_val = np.hstack([probs_a_val, probs_b_val, tf_val_n[:, selected]])
    hybrid_params = features.minmax_fit(hybrid_train)
    hybrid_train_n = features.minmax_apply(hybrid_params, hybrid_train)
    hybrid_val_n = features.minmax_apply(hybrid_params, hybrid_val)

    log.set_stage("train-fusion")
    fus_cfg = cfg.train_settings("fusion")
    fusion = models.build_fusion_mlp(hybrid_train.shape[1],
                                     hidden=cfg.fusion_hidden(),
                                     rng=np.random.default_rng([run_seed, 4]))
    ckpt_f, rows_f = models.train_classifier(
        fusion, (hybrid_train_n, y_train), (hybrid_val_n, y_val),
        TrainConfig(epochs=fus_cfg.epochs, batch_size=fus_cfg.batch_size,
                    learning_rate=fus_cfg.learning_rate,
                    weight_decay=fus_cfg.weight_decay, seed=run_seed,
                    optimizer=fus_cfg.optimizer))

    # --- test evaluation: the only stage allowed to touch TEST ---
    log.set_stage("evaluate")
    y_test = data.get(corpus.TEST, "labels")
    img_test = data.get(corpus.TEST, "images")
    tf_test_n = features.minmax_apply(tf_params, np.stack(
        [features.extract_opcode_tf(d, vocab) for d in data.get(corpus.TEST, "docs")]))
    probs_a_test = models.extract_probability_features(ckpt_a, img_test)
    probs_b_test = models.extract_probability_features(ckpt_b, img_test)
    hybrid_test = np.hstack([probs_a_test, probs_b_test, tf_test_n[:, selected]])
    dlmd_probs = models.extract_probability_features(
        ckpt_f, features.minmax_apply(hybrid_params, hybrid_test))
    _, svm_probs, _ = svm.svm_predict(svm_model, tf_test_n[:, selected])

    result = RunResult(
        run_index=run_index,
        seed=run_seed,
        dlmd_logloss=log_loss(dlmd_probs, y_test),
        dlmd_accuracy=accuracy(dlmd_probs, y_test),
        cnn_logloss=log_loss(probs_a_test, y_test),
        pretrained_logloss=log_loss(probs_b_test, y_test),
        svm_opcode_logloss=log_loss(svm_probs, y_test),
        n_selected=len(selected),
        selected_names=[vocab.tokens[j] for j in selected],
        confusion=confusion(dlmd_probs, y_test),
        access_log=log,
        epoch_logs={"cnn": rows_a, "pretrained": rows_b, "fusion": rows_f,
                    **cae_logs},
    )

    if out_dir is not None:
        save_checkpoint(ckpt_a, out_dir / "cnn.ckpt")
        save_checkpoint(ckpt_b, out_dir / "pretrained.ckpt")
        save_checkpoint(ckpt_f, out_dir / "fusion.ckpt")
        for name, rows in result.epoch_logs.items():
            header = "epoch,train_loss,val_logloss" if len(rows[0]) == 3 else "epoch,train_mse"
            _write_rows(out_dir / f"log_{name}.csv", header, rows)
        selection.save_trace(trace, out_dir / "selection_trace.csv")
        selection.save_subset(selected, out_dir / "selected.txt", names=vocab.tokens)
        svm.save_multiclass(svm_model, out_dir / "opcode_svm.csv")
        (out_dir / "vocab.txt").write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")
        _write_rows(out_dir / "metrics.csv",
                    "metric,value",
                    [("dlmd_logloss", result.dlmd_logloss),
                     ("dlmd_accuracy", result.dlmd_accuracy),
                     ("cnn_logloss", result.cnn_logloss),
                     ("pretrained_logloss", result.pretrained_logloss),
                     ("svm_opcode_logloss", result.svm_opcode_logloss),
                     ("n_selected", result.n_selected)])
        np.savetxt(out_dir / "confusion.csv", result.confusion, fmt="%d", delimiter=",")
    return result


def run_experiment(cfg: RunConfig, n_runs=None, bundle=None,
                   progress=None) -> ExperimentReport:
    """Run the full flow n_runs times with seeds seed+0..n_runs-1."""
    n_runs = cfg.n_runs if n_runs is None else n_runs
    if bundle is None:
        bundle = prepare_corpus(cfg.data_root, cfg["data.labels_file"])
    out_root = Path(cfg.output_root)
    out_root.mkdir(parents=True, exist_ok=True)
    runs = []
    for r in range(n_runs):
        try:
            result = single_run(cfg, bundle, r, out_dir=out_root / f"run_{r:02d}")
        except Exception as exc:
            raise StageError(f"run {r}", exc) from exc
        runs.append(result)
        if progress is not None:
            progress(result)

    mean_ll, std_ll = _mean_std([r.dlmd_logloss for r in runs])
    mean_acc, std_acc = _mean_std([r.dlmd_accuracy for r in runs])
    report = ExperimentReport(runs=runs, mean_logloss=mean_ll, std_logloss=std_ll,
                              mean_accuracy=mean_acc, std_accuracy=std_acc,
                              confusion=runs[0].confusion,
                              fingerprint=cfg.fingerprint())
    _write_rows(out_root / "runs.csv",
                "run,seed,dlmd_logloss,dlmd_accuracy,cnn_logloss,"
                "pretrained_logloss,svm_opcode_logloss,n_selected",
                [(r.run_index, r.seed, r.dlmd_logloss, r.dlmd_accuracy,
                  r.cnn_logloss, r.pretrained_logloss, r.svm_opcode_logloss,
                  r.n_selected) for r in runs])
    np.savetxt(out_root / "confusion.csv", report.confusion, fmt="%d", delimiter=",")
    (out_root / "fingerprint.txt").write_text(report.fingerprint + "\n", encoding="utf-8")
    with open(out_root / "report.txt", "w", encoding="utf-8") as fh:
        fh.write("hybrid malware family classification report\n")
        fh.write(f"runs: {n_runs}\n")
        fh.write(f"log loss: {report.mean_logloss!r} +/- {report.std_logloss!r}\n")
        fh.write(f"accuracy: {report.mean_accuracy!r} +/- {report.std_accuracy!r}\n")
        fh.write(f"config fingerprint: {report.fingerprint}\n")
    return report


@dataclass
class BaselineReport:
    rows: list  # (name, mean log loss, std)


def compare_baselines(cfg: RunConfig, n_runs=None, bundle=None,
                      experiment: ExperimentReport | None = None) -> BaselineReport:
    """Linear/RBF SVM and a plain MLP on images, the CNN, and the fused model,
    all on identical per-run splits."""
    n_runs = cfg.n_runs if n_runs is None else n_runs
    if bundle is None:
        bundle = prepare_corpus(cfg.data_root, cfg["data.labels_file"])
    if experiment is None:
        experiment = run_experiment(cfg, n_runs=n_runs, bundle=bundle)

    flat = bundle.images.reshape(bundle.images.shape[0], -1)
    mlp_cfg = cfg.train_settings("baseline_mlp")
    svm_losses = {"linear": [], "rbf": []}
    mlp_losses = []
    for r in range(n_runs):
        run_seed = cfg.seed + r
        split = corpus.stratified_split(bundle.manifest, run_seed,
                                        cfg.test_fraction, cfg.val_fraction)
        idx = _partition_indices(split, bundle.ids)
        tr, va, te = idx[corpus.TRAIN], idx[corpus.VAL], idx[corpus.TEST]
        grid = svm.grid_baseline_eval(flat, bundle.labels, [(tr, va, te)])
        for name in svm_losses:
            svm_losses[name].append(grid[name]["runs"][0])
        mlp = models.build_baseline_mlp(width_scale=mlp_cfg.width_scale,
                                        rng=np.random.default_rng([run_seed, 5]))
        ckpt, _ = models.train_classifier(
            mlp, (bundle.images[tr], bundle.labels[tr]),
            (bundle.images[va], bundle.labels[va]),
            TrainConfig(epochs=mlp_cfg.epochs, batch_size=mlp_cfg.batch_size,
                        learning_rate=mlp_cfg.learning_rate,
                        weight_decay=mlp_cfg.weight_decay, seed=run_seed,
                        optimizer=mlp_cfg.optimizer))
        probs = models.extract_probability_features(ckpt, bundle.images[te])
        mlp_losses.append(log_loss(probs, bundle.labels[te]))

    rows = []
    for label, losses in (("LINEAR-SVM", svm_losses["linear"]),
                          ("RBF-SVM", svm_losses["rbf"]),
                          ("MLP", mlp_losses)):
        mean, std = _mean_std(losses)
        rows.append((label, mean, std))
    cnn_mean, cnn_std = _mean_std([r.cnn_logloss for r in experiment.runs])
    rows.append(("CNN", cnn_mean, cnn_std))
    rows.append(("DLMD", experiment.mean_logloss, experiment.std_logloss))
    return BaselineReport(rows=rows)
