"""Run configuration: key-value config files with per-stage sections.

Precedence: command-line overrides > config file > table defaults. The
``MALFUSE_DATA_ROOT`` environment variable supplies the data root when the
config leaves it empty.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class TrainSettings:
    epochs: int
    batch_size: int = 20
    learning_rate: float = 0.001
    weight_decay: float = 0.0
    width_scale: float = 1.0
    optimizer: str = "adam"


def _bool(raw: str) -> bool:
    text = raw.strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# section.key -> (caster, default); training defaults follow the published
# parameter tables (CNN epochs 30, CAE epochs 100 with weight decay 1e-5,
# batch 20, learning rate 0.001 everywhere)
SCHEMA = {
    "data.root": (str, ""),
    "data.output": (str, "out"),
    "data.labels_file": (str, "trainLabels.csv"),
    "run.seed": (int, 0),
    "run.n_runs": (int, 10),
    "run.deterministic": (_bool, True),
    "run.workers": (int, 1),
    "split.test_fraction": (float, 0.25),
    "split.val_fraction": (float, 0.25),
    "features.vocab_cap": (int, 500),
    "cnn.epochs": (int, 30),
    "cnn.batch_size": (int, 20),
    "cnn.learning_rate": (float, 0.001),
    "cnn.weight_decay": (float, 0.0),
    "cnn.width_scale": (float, 1.0),
    "cnn.optimizer": (str, "adam"),
    "cae.epochs": (int, 100),
    "cae.batch_size": (int, 20),
    "cae.learning_rate": (float, 0.001),
    "cae.weight_decay": (float, 1e-5),
    "cae.width_scale": (float, 1.0),
    "cae.optimizer": (str, "adam"),
    "pretrained.epochs": (int, 30),
    "pretrained.batch_size": (int, 20),
    "pretrained.learning_rate": (float, 0.001),
    "pretrained.weight_decay": (float, 0.0),
    "pretrained.width_scale": (float, 1.0),
    "pretrained.optimizer": (str, "adam"),
    "fusion.epochs": (int, 30),
    "fusion.batch_size": (int, 20),
    "fusion.learning_rate": (float, 0.001),
    "fusion.weight_decay": (float, 0.0),
    "fusion.hidden": (str, "100,50"),
    "fusion.optimizer": (str, "adam"),
    "baseline_mlp.epochs": (int, 30),
    "baseline_mlp.batch_size": (int, 20),
    "baseline_mlp.learning_rate": (float, 0.001),
    "baseline_mlp.weight_decay": (float, 0.0),
    "baseline_mlp.width_scale": (float, 1.0),
    "baseline_mlp.optimizer": (str, "adam"),
    "svm.C": (float, 10.0),
    "svm.kernel": (str, "rbf"),
    "svm.gamma": (float, 0.1),
    "svm.tolerance": (float, 1e-3),
    "selection.step": (int, 10),
    "selection.patience": (int, 1),
    "selection.metric": (str, "logloss"),
    "selection.backward": (str, "greedy"),
    "synth.families": (int, 9),
    "synth.per_family": (int, 90),
    "synth.seed": (int, 7),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def data_root(self):
        return self.values["data.root"]

    @property
    def output_root(self):
        return self.values["data.output"]

    @property
    def seed(self):
        return self.values["run.seed"]

    @property
    def n_runs(self):
        return self.values["run.n_runs"]

    @property
    def test_fraction(self):
        return self.values["split.test_fraction"]

    @property
    def val_fraction(self):
        return self.values["split.val_fraction"]

    @property
    def vocab_cap(self):
        return self.values["features.vocab_cap"]

    def train_settings(self, section) -> TrainSettings:
        v = self.values
        return TrainSettings(
            epochs=v[f"{section}.epochs"],
            batch_size=v[f"{section}.batch_size"],
            learning_rate=v[f"{section}.learning_rate"],
            weight_decay=v[f"{section}.weight_decay"],
            width_scale=v.get(f"{section}.width_scale", 1.0),
            optimizer=v.get(f"{section}.optimizer", "adam"),
        )

    def fusion_hidden(self) -> tuple:
        try:
            widths = tuple(int(w) for w in self.values["fusion.hidden"].split(",") if w.strip())
        except ValueError as exc:
            raise ConfigError(str(exc), key="fusion.hidden") from exc
        if not widths:
            raise ConfigError("needs at least one hidden width", key="fusion.hidden")
        return widths

    def svm_params(self):
        from .svm import SvmParams
        v = self.values
        return SvmParams(C=v["svm.C"], kernel=v["svm.kernel"],
                         gamma=v["svm.gamma"], tolerance=v["svm.tolerance"])

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for key in sorted(self.values):
            digest.update(f"{key}={self.values[key]!r}\n".encode("utf-8"))
        return digest.hexdigest()


def _validate(values: dict):
    for key in ("split.test_fraction", "split.val_fraction"):
        if not 0.0 < values[key] < 1.0:
            raise ConfigError(f"must be in (0,1), got {values[key]}", key=key)
    for key, val in values.items():
        leaf = key.split(".")[-1]
        if leaf in ("epochs", "batch_size", "n_runs", "vocab_cap", "step",
                    "patience", "per_family", "families", "workers") and val <= 0:
            raise ConfigError(f"must be positive, got {val}", key=key)
        if leaf in ("learning_rate", "width_scale", "C", "gamma") and val <= 0:
            raise ConfigError(f"must be positive, got {val}", key=key)
        if leaf == "weight_decay" and val < 0:
            raise ConfigError(f"must be non-negative, got {val}", key=key)
    for key, val in values.items():
        if key.split(".")[-1] == "optimizer" and val not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd", key=key)
    if values["selection.metric"] not in ("logloss", "accuracy"):
        raise ConfigError("metric must be logloss or accuracy", key="selection.metric")
    if values["selection.backward"] not in ("greedy", "last-added"):
        raise ConfigError("backward must be greedy or last-added", key="selection.backward")
    if values["svm.kernel"] not in ("linear", "rbf"):
        raise ConfigError("kernel must be linear or rbf", key="svm.kernel")


def load_config(path=None, overrides=None) -> RunConfig:
    """Resolve defaults, then the config file, then explicit overrides."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                full = f"{section}.{key}"
                if full not in SCHEMA:
                    raise ConfigError("unknown key", key=full)
                caster = SCHEMA[full][0]
                try:
                    values[full] = caster(raw)
                except ValueError as exc:
                    raise ConfigError(str(exc), key=full)
    for full, raw in (overrides or {}).items():
        if full not in SCHEMA:
            raise ConfigError("unknown key", key=full)
        caster = SCHEMA[full][0]
        try:
            values[full] = caster(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(str(exc), key=full)
    if not values["data.root"]:
        values["data.root"] = os.environ.get("MALFUSE_DATA_ROOT", "")
    _validate(values)
    return RunConfig(values=values)
