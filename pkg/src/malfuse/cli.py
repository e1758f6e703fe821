"""Command-line entry point: one subcommand per pipeline stage plus run-all.

Exit codes: 0 success, 2 config error, 3 data error, 4 stage failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import corpus, features, metrics, models, pipeline, selection, svm
from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    DuplicateId,
    EmptyFile,
    EmptyInput,
    InvalidSpec,
    IoFailure,
    MalformedLine,
    MalfuseError,
    MissingFile,
    NoOpcodesFound,
    TooFewSamples,
    UnknownClass,
)
from .nn import TrainConfig, load_checkpoint, save_checkpoint
from .synth import SyntheticSpec, generate_synthetic_corpus

DATA_ERRORS = (MalformedLine, EmptyFile, UnknownClass, DuplicateId, MissingFile,
               TooFewSamples, InvalidSpec, IoFailure, EmptyInput, NoOpcodesFound)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 2, 3, 4


class _Formatter(argparse.HelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, width=96, max_help_position=28)


def _add_common(sub):
    sub.add_argument("--config", help="key-value config file")
    sub.add_argument("--data-root", help="corpus directory (overrides config)")
    sub.add_argument("--out", help="output directory (overrides config)")
    sub.add_argument("--seed", type=int, help="base random seed")
    sub.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                     help="override any config entry")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="malfuse", formatter_class=_Formatter,
        description="Hybrid byte-image / opcode-frequency malware family classifier.")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")

    specs = [
        ("ingest", "resolve labels and per-sample files into a manifest"),
        ("synth", "generate a seeded synthetic corpus"),
        ("featurize", "parse the corpus into images, opcode counts and a split"),
        ("train-cnn", "train the five-layer CNN feature extractor"),
        ("pretrain-cae", "train the two stacked convolutional autoencoders"),
        ("train-pretrained-cnn", "fine-tune the CAE-initialized CNN"),
        ("baseline-svm", "linear and RBF SVM baselines on flattened images"),
        ("baseline-mlp", "plain MLP baseline on flattened images"),
        ("select", "wrapper-based opcode feature selection"),
        ("fuse", "build the hybrid feature table"),
        ("train-mlp", "train the fusion MLP on the hybrid table"),
        ("evaluate", "score a trained fusion model on a partition"),
        ("run-all", "run the whole pipeline end to end, n times"),
        ("gradcheck", "finite-difference audit of every layer and architecture"),
    ]
    handlers = {}
    for name, help_text in specs:
        sub = subs.add_parser(name, help=help_text, formatter_class=_Formatter)
        _add_common(sub)
        handlers[name] = sub

    handlers["synth"].add_argument("--families", type=int, help="number of families (1..9)")
    handlers["synth"].add_argument("--per-family", type=int, help="samples per family")
    handlers["run-all"].add_argument("--runs", type=int, help="number of independent runs")
    handlers["baseline-svm"].add_argument("--runs", type=int, help="number of seeded runs")
    handlers["baseline-mlp"].add_argument("--runs", type=int, help="number of seeded runs")
    handlers["evaluate"].add_argument("--partition", default="TEST",
                                      choices=["TRAIN", "VAL", "TEST"])
    handlers["gradcheck"].add_argument("--width-scale", type=float, default=1 / 32,
                                       help="channel-width multiplier for the audit")
    return parser


def _resolve_config(args) -> RunConfig:
    overrides = {}
    for item in getattr(args, "set", []):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError("expected SECTION.KEY=VALUE", key=item)
        overrides[key.strip()] = value.strip()
    if getattr(args, "data_root", None):
        overrides["data.root"] = args.data_root
    if getattr(args, "out", None):
        overrides["data.output"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        overrides["run.n_runs"] = args.runs
    if getattr(args, "families", None) is not None:
        overrides["synth.families"] = args.families
    if getattr(args, "per_family", None) is not None:
        overrides["synth.per_family"] = args.per_family
    return load_config(getattr(args, "config", None), overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_root)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fingerprint.txt").write_text(cfg.fingerprint() + "\n", encoding="utf-8")
    return out


def _require_data_root(cfg: RunConfig) -> Path:
    root = Path(cfg.data_root) if cfg.data_root else None
    if root is None or not root.is_dir():
        raise IoFailure(f"data root {cfg.data_root!r} is not a directory "
                        "(set [data] root, --data-root or MALFUSE_DATA_ROOT)")
    return root


def _write_probs(path, ids, probs):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id," + ",".join(f"p{k}" for k in range(probs.shape[1])) + "\n")
        for sid, row in zip(ids, probs):
            fh.write(sid + "," + ",".join(repr(float(v)) for v in row) + "\n")


def _read_probs(path):
    ids, rows = [], []
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        for raw in fh:
            parts = raw.strip().split(",")
            if parts and parts[0]:
                ids.append(parts[0])
                rows.append([float(v) for v in parts[1:]])
    return ids, np.array(rows)


def _load_stage_inputs(cfg, out):
    """Featurize artifacts shared by the training stages."""
    ids, images = features.load_images(out / "images.bin")
    table_ids, labels, tf, tokens = features.read_feature_table(out / "features.csv")
    if ids != table_ids:
        raise IoFailure("images.bin and features.csv list different samples")
    split = corpus.load_split(out / "split.csv")
    parts = {p: [k for k, sid in enumerate(ids) if split.assignment[sid] == p]
             for p in corpus.PARTITIONS}
    return ids, images[:, None, :, :], labels, tf, tokens, parts


def _tf_normalized(tf, parts):
    params = features.minmax_fit(tf[parts[corpus.TRAIN]])
    return features.minmax_apply(params, tf)


def cmd_synth(cfg: RunConfig, args) -> int:
    root = Path(cfg.data_root) if cfg.data_root else Path(cfg.output_root) / "corpus"
    spec = SyntheticSpec(families=cfg["synth.families"],
                         per_family=cfg["synth.per_family"])
    manifest, _ = generate_synthetic_corpus(spec, cfg["synth.seed"], root)
    out = _out_dir(cfg)
    corpus.save_manifest(manifest, out / "manifest.csv", root=root)
    print(f"synthetic corpus: {len(manifest.samples)} samples in {root}")
    print(f"class histogram: {manifest.class_histogram}")
    return EXIT_OK


def cmd_ingest(cfg: RunConfig, args) -> int:
    root = _require_data_root(cfg)
    labels = corpus.load_labels(root / cfg["data.labels_file"])
    manifest = corpus.ingest_corpus(root, labels)
    out = _out_dir(cfg)
    corpus.save_manifest(manifest, out / "manifest.csv", root=root)
    print(f"manifest: {len(manifest.samples)} samples, histogram {manifest.class_histogram}")
    print(f"wrote {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_featurize(cfg: RunConfig, args) -> int:
    root = _require_data_root(cfg)
    bundle = pipeline.prepare_corpus(root, cfg["data.labels_file"])
    out = _out_dir(cfg)
    split = corpus.stratified_split(bundle.manifest, cfg.seed,
                                    cfg.test_fraction, cfg.val_fraction)
    corpus.save_split(split, out / "split.csv")
    train_docs = [bundle.docs[k] for k, sid in enumerate(bundle.ids)
                  if split.assignment[sid] == corpus.TRAIN]
    vocab = features.build_vocabulary(train_docs, cfg.vocab_cap)
    tf = np.stack([features.extract_opcode_tf(d, vocab) for d in bundle.docs])
    train_rows = [k for k, sid in enumerate(bundle.ids)
                  if split.assignment[sid] == corpus.TRAIN]
    params = features.minmax_fit(tf[train_rows])
    features.assemble_feature_table(bundle.ids, bundle.labels, tf, vocab,
                                    out / "features.csv", params=params)
    imgs = [features.ByteImage(pixels=bundle.images[k, 0], source_length=0)
            for k in range(len(bundle.ids))]
    features.save_images(imgs, bundle.ids, out / "images.bin")
    (out / "vocab.txt").write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")
    skipped = sum(d.skipped_lines for d in bundle.docs)
    (out / "diagnostics.txt").write_text(
        f"samples {len(bundle.ids)}\nskipped_asm_lines {skipped}\n", encoding="utf-8")
    print(f"featurized {len(bundle.ids)} samples; vocabulary {len(vocab)} opcodes")
    return EXIT_OK


def _train_extractor(cfg, args, kind) -> int:
    out = _out_dir(cfg)
    ids, images, labels, tf, tokens, parts = _load_stage_inputs(cfg, out)
    tr, va = parts[corpus.TRAIN], parts[corpus.VAL]
    settings = cfg.train_settings("cnn" if kind == "cnn" else "pretrained")
    tcfg = TrainConfig(epochs=settings.epochs, batch_size=settings.batch_size,
                       learning_rate=settings.learning_rate,
                       weight_decay=settings.weight_decay, seed=cfg.seed)
    if kind == "cnn":
        model = models.build_five_layer_cnn(
            width_scale=settings.width_scale, rng=np.random.default_rng([cfg.seed, 1]))
        ckpt_name, probs_name, log_name = "cnn.ckpt", "probs_cnn.csv", "log_cnn.csv"
    else:
        cae_ws = cfg.train_settings("cae").width_scale
        cae1 = models.build_cae1(width_scale=cae_ws)
        cae2 = models.build_cae2(width_scale=cae_ws)
        cae1_state = load_checkpoint(out / "cae1.ckpt")
        cae2_state = load_checkpoint(out / "cae2.ckpt")
        cae1.load_state_arrays([a for _, a in cae1_state.arrays])
        cae2.load_state_arrays([a for _, a in cae2_state.arrays])
        model = models.build_pretrained_cnn(
            cae1, cae2, width_scale=cae_ws, rng=np.random.default_rng([cfg.seed, 3]))
        ckpt_name, probs_name, log_name = ("pretrained.ckpt", "probs_pretrained.csv",
                                           "log_pretrained.csv")
    ckpt, rows = models.train_classifier(model, (images[tr], labels[tr]),
                                         (images[va], labels[va]), tcfg)
    save_checkpoint(ckpt, out / ckpt_name)
    pipeline._write_rows(out / log_name, "epoch,train_loss,val_logloss", rows)
    probs = models.extract_probability_features(ckpt, images)
    _write_probs(out / probs_name, ids, probs)
    print(f"{kind}: best val log loss {ckpt.best_val_logloss!r} at epoch {ckpt.epoch}")
    return EXIT_OK


def cmd_pretrain_cae(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ids, images, labels, tf, tokens, parts = _load_stage_inputs(cfg, out)
    settings = cfg.train_settings("cae")
    tcfg = TrainConfig(epochs=settings.epochs, batch_size=settings.batch_size,
                       learning_rate=settings.learning_rate,
                       weight_decay=settings.weight_decay, seed=cfg.seed)
    cae1, cae2, logs = models.pretrain_cae_stack(
        images[parts[corpus.TRAIN]], tcfg, width_scale=settings.width_scale,
        rng=np.random.default_rng([cfg.seed, 2]))
    from .nn import checkpoint_from_model
    save_checkpoint(checkpoint_from_model(cae1), out / "cae1.ckpt")
    save_checkpoint(checkpoint_from_model(cae2), out / "cae2.ckpt")
    for name, rows in logs.items():
        pipeline._write_rows(out / f"log_{name}.csv", "epoch,train_mse", rows)
    print(f"cae1 final mse {logs['cae1'][-1][1]!r}; cae2 final mse {logs['cae2'][-1][1]!r}")
    return EXIT_OK


def cmd_select(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ids, images, labels, tf, tokens, parts = _load_stage_inputs(cfg, out)
    tf_n = _tf_normalized(tf, parts)
    tr, va = parts[corpus.TRAIN], parts[corpus.VAL]
    eval_cfg = selection.EvaluatorConfig(svm=cfg.svm_params(),
                                         metric=cfg["selection.metric"])
    trace = selection.select_features(
        tf_n[tr], labels[tr], tf_n[va], labels[va], eval_cfg, names=tokens,
        step=cfg["selection.step"], patience=cfg["selection.patience"],
        backward_mode=cfg["selection.backward"])
    selection.save_trace(trace, out / "selection_trace.csv")
    selection.save_subset(trace.final_subset, out / "selected.txt", names=tokens)
    print(f"selected {len(trace.final_subset)} opcodes: "
          + ",".join(tokens[j] for j in trace.final_subset))
    return EXIT_OK


def cmd_fuse(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ids, images, labels, tf, tokens, parts = _load_stage_inputs(cfg, out)
    tf_n = _tf_normalized(tf, parts)
    selected = selection.load_subset(out / "selected.txt", names=tokens)
    ids_a, probs_a = _read_probs(out / "probs_cnn.csv")
    ids_b, probs_b = _read_probs(out / "probs_pretrained.csv")
    train_ids = [ids[k] for k in parts[corpus.TRAIN]]
    fused_ids, table = pipeline.fuse_features(ids_a, probs_a, ids_b, probs_b,
                                              ids, tf_n[:, selected],
                                              train_ids=train_ids)
    label_of = {sid: int(labels[k]) for k, sid in enumerate(ids)}
    names = [f"a{k}" for k in range(9)] + [f"b{k}" for k in range(9)] \
        + [tokens[j] for j in selected]
    with open(out / "hybrid.csv", "w", encoding="utf-8") as fh:
        fh.write("id,label," + ",".join(names) + "\n")
        for sid, row in zip(fused_ids, table):
            fh.write(f"{sid},{label_of[sid]},"
                     + ",".join(repr(float(v)) for v in row) + "\n")
    print(f"hybrid table: {table.shape[0]} rows x {table.shape[1]} features")
    return EXIT_OK


def _read_hybrid(path):
    ids, labels, rows = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        for raw in fh:
            parts = raw.strip().split(",")
            if parts and parts[0]:
                ids.append(parts[0])
                labels.append(int(parts[1]))
                rows.append([float(v) for v in parts[2:]])
    return ids, np.array(labels), np.array(rows)


def cmd_train_mlp(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ids, labels, table = _read_hybrid(out / "hybrid.csv")
    split = corpus.load_split(out / "split.csv")
    parts = {p: [k for k, sid in enumerate(ids) if split.assignment[sid] == p]
             for p in corpus.PARTITIONS}
    settings = cfg.train_settings("fusion")
    model = models.build_fusion_mlp(table.shape[1], hidden=cfg.fusion_hidden(),
                                    rng=np.random.default_rng([cfg.seed, 4]))
    ckpt, rows = models.train_classifier(
        model, (table[parts[corpus.TRAIN]], labels[parts[corpus.TRAIN]]),
        (table[parts[corpus.VAL]], labels[parts[corpus.VAL]]),
        TrainConfig(epochs=settings.epochs, batch_size=settings.batch_size,
                    learning_rate=settings.learning_rate,
                    weight_decay=settings.weight_decay, seed=cfg.seed))
    save_checkpoint(ckpt, out / "fusion.ckpt")
    pipeline._write_rows(out / "log_fusion.csv", "epoch,train_loss,val_logloss", rows)
    print(f"fusion: best val log loss {ckpt.best_val_logloss!r} at epoch {ckpt.epoch}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ids, labels, table = _read_hybrid(out / "hybrid.csv")
    split = corpus.load_split(out / "split.csv")
    rows = [k for k, sid in enumerate(ids) if split.assignment[sid] == args.partition]
    ckpt = load_checkpoint(out / "fusion.ckpt")
    probs = models.extract_probability_features(ckpt, table[rows])
    y = labels[rows]
    ll = metrics.log_loss(probs, y)
    acc = metrics.accuracy(probs, y)
    matrix = metrics.confusion(probs, y)
    pipeline._write_rows(out / "metrics.csv", "metric,value",
                         [("logloss", ll), ("accuracy", acc),
                          ("partition", args.partition)])
    np.savetxt(out / "confusion.csv", matrix, fmt="%d", delimiter=",")
    print(f"{args.partition}: log loss {ll!r}, accuracy {acc!r}")
    return EXIT_OK


def cmd_baseline_svm(cfg: RunConfig, args) -> int:
    root = _require_data_root(cfg)
    bundle = pipeline.prepare_corpus(root, cfg["data.labels_file"])
    out = _out_dir(cfg)
    flat = bundle.images.reshape(bundle.images.shape[0], -1)
    splits = []
    for r in range(cfg.n_runs):
        split = corpus.stratified_split(bundle.manifest, cfg.seed + r,
                                        cfg.test_fraction, cfg.val_fraction)
        idx = pipeline._partition_indices(split, bundle.ids)
        splits.append((idx[corpus.TRAIN], idx[corpus.VAL], idx[corpus.TEST]))
    report = svm.grid_baseline_eval(flat, bundle.labels, splits)
    rows = [(name, report[name]["mean"], report[name]["std"]) for name in report]
    pipeline._write_rows(out / "baseline_svm.csv", "kernel,mean_logloss,std", rows)
    for name, mean, std in rows:
        print(f"SVM ({name}): {mean!r} +/- {std!r} over {cfg.n_runs} runs")
    return EXIT_OK


def cmd_baseline_mlp(cfg: RunConfig, args) -> int:
    root = _require_data_root(cfg)
    bundle = pipeline.prepare_corpus(root, cfg["data.labels_file"])
    out = _out_dir(cfg)
    settings = cfg.train_settings("baseline_mlp")
    losses = []
    for r in range(cfg.n_runs):
        run_seed = cfg.seed + r
        split = corpus.stratified_split(bundle.manifest, run_seed,
                                        cfg.test_fraction, cfg.val_fraction)
        idx = pipeline._partition_indices(split, bundle.ids)
        model = models.build_baseline_mlp(width_scale=settings.width_scale,
                                          rng=np.random.default_rng([run_seed, 5]))
        ckpt, _ = models.train_classifier(
            model,
            (bundle.images[idx[corpus.TRAIN]], bundle.labels[idx[corpus.TRAIN]]),
            (bundle.images[idx[corpus.VAL]], bundle.labels[idx[corpus.VAL]]),
            TrainConfig(epochs=settings.epochs, batch_size=settings.batch_size,
                        learning_rate=settings.learning_rate,
                        weight_decay=settings.weight_decay, seed=run_seed))
        probs = models.extract_probability_features(
            ckpt, bundle.images[idx[corpus.TEST]])
        losses.append(metrics.log_loss(probs, bundle.labels[idx[corpus.TEST]]))
    mean, std = pipeline._mean_std(losses)
    pipeline._write_rows(out / "baseline_mlp.csv", "model,mean_logloss,std",
                         [("MLP", mean, std)])
    print(f"MLP: {mean!r} +/- {std!r} over {cfg.n_runs} runs")
    return EXIT_OK


def cmd_run_all(cfg: RunConfig, args) -> int:
    _require_data_root(cfg)
    out = _out_dir(cfg)
    report = pipeline.run_experiment(
        cfg, progress=lambda r: print(
            f"run {r.run_index}: dlmd {r.dlmd_logloss:.4f} ll / {r.dlmd_accuracy:.4f} acc, "
            f"cnn {r.cnn_logloss:.4f}, svm {r.svm_opcode_logloss:.4f}, "
            f"{r.n_selected} opcodes"))
    print(f"log loss {report.mean_logloss!r} +/- {report.std_logloss!r}; "
          f"accuracy {report.mean_accuracy!r} +/- {report.std_accuracy!r}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    reports = models.gradient_audit(width_scale=args.width_scale)
    failed = False
    for arch, report in reports.items():
        print(f"{arch}: max rel error {report['max_rel_error']:.3e} "
              f"({report['worst_tensor']})")
        for layer, err in sorted(report["per_layer"].items()):
            print(f"  {layer}: {err:.3e}")
        if report["max_rel_error"] >= 1e-4:
            failed = True
    if failed:
        print("FAIL: at least one gradient exceeded 1e-4 relative error")
        return EXIT_STAGE
    print("all architectures under 1e-4 relative error")
    return EXIT_OK


HANDLERS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train-cnn": lambda cfg, args: _train_extractor(cfg, args, "cnn"),
    "pretrain-cae": cmd_pretrain_cae,
    "train-pretrained-cnn": lambda cfg, args: _train_extractor(cfg, args, "pretrained"),
    "baseline-svm": cmd_baseline_svm,
    "baseline-mlp": cmd_baseline_mlp,
    "select": cmd_select,
    "fuse": cmd_fuse,
    "train-mlp": cmd_train_mlp,
    "evaluate": cmd_evaluate,
    "run-all": cmd_run_all,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        cfg = _resolve_config(args)
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MalfuseError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
