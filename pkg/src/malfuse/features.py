"""Model-ready features: 32x32 byte images, opcode term frequencies, min-max scaling."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import AsmDocument
from .errors import EmptyInput, IoFailure, NoOpcodesFound, WidthMismatch

IMAGE_SIZE = 32
DEFAULT_VOCAB_CAP = 500


@dataclass
class ByteImage:
    pixels: np.ndarray      # (32, 32) float in [0, 1]
    source_length: int


@dataclass
class OpcodeVocabulary:
    tokens: list            # document-frequency descending, ties lexicographic
    document_frequency: dict

    def __len__(self):
        return len(self.tokens)

    def index(self):
        return {tok: i for i, tok in enumerate(self.tokens)}


@dataclass
class NormalizerParams:
    minimum: np.ndarray
    maximum: np.ndarray

    @property
    def width(self):
        return self.minimum.shape[0]


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers and edge clamping."""
    in_h, in_w = grid.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bottom = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bottom * fy


def bytes_to_image(records) -> ByteImage:
    """Lay byte cells row-major on a near-square grid, resize to 32x32, scale to [0,1].

    Grid width is ceil(sqrt(n)); the last row is zero padded. Unreadable
    ('??') cells count as 0.
    """
    cells = []
    for record in records:
        cells.extend(0 if v is None else v for v in record.values)
    n = len(cells)
    if n == 0:
        raise EmptyInput("no byte cells to image")
    w = math.ceil(math.sqrt(n))
    h = math.ceil(n / w)
    grid = np.zeros(h * w, dtype=np.float64)
    grid[:n] = cells
    grid = grid.reshape(h, w)
    pixels = bilinear_resize(grid, IMAGE_SIZE, IMAGE_SIZE) / 255.0
    return ByteImage(pixels=pixels, source_length=n)


def build_vocabulary(documents, cap: int = DEFAULT_VOCAB_CAP) -> OpcodeVocabulary:
    """Distinct mnemonics over the given (training) documents.

    Ordered by document frequency descending, ties lexicographic, truncated
    to ``cap`` entries.
    """
    df = Counter()
    for doc in documents:
        df.update(set(doc.opcode_stream))
    if not df:
        raise NoOpcodesFound("no mnemonics in any document")
    ordered = sorted(df, key=lambda tok: (-df[tok], tok))[:cap]
    return OpcodeVocabulary(tokens=ordered, document_frequency=dict(df))


def extract_opcode_tf(document: AsmDocument, vocab: OpcodeVocabulary) -> np.ndarray:
    """Counts of each vocabulary mnemonic; out-of-vocabulary tokens are ignored."""
    counts = document.opcode_counts()
    return np.array([counts.get(tok, 0) for tok in vocab.tokens], dtype=np.int64)


def minmax_fit(matrix: np.ndarray) -> NormalizerParams:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise EmptyInput("need at least one row to fit")
    return NormalizerParams(minimum=matrix.min(axis=0), maximum=matrix.max(axis=0))


def minmax_apply(params: NormalizerParams, rows: np.ndarray) -> np.ndarray:
    """(x - min) / (max - min), clamped to [0, 1]; constant columns map to 0."""
    rows = np.asarray(rows, dtype=np.float64)
    width = rows.shape[-1]
    if width != params.width:
        raise WidthMismatch(f"row width {width} != fitted width {params.width}")
    span = params.maximum - params.minimum
    safe = np.where(span > 0, span, 1.0)
    out = (rows - params.minimum) / safe
    out = np.where(span > 0, out, 0.0)
    return np.clip(out, 0.0, 1.0)


def assemble_feature_table(ids, labels, tf_matrix, vocab: OpcodeVocabulary, path,
                           params: NormalizerParams | None = None):
    """Persist the term-frequency table as ``id,label,<mnemonic...>`` CSV rows.

    Counts are written raw (integers). When fitted normalizer params are
    given they go to a ``<path>.norm`` sidecar for later application.
    """
    tf_matrix = np.asarray(tf_matrix)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("id,label," + ",".join(vocab.tokens) + "\n")
            for sid, label, row in zip(ids, labels, tf_matrix):
                fh.write(f"{sid},{int(label)}," + ",".join(str(int(v)) for v in row) + "\n")
        if params is not None:
            with open(str(path) + ".norm", "w", encoding="utf-8") as fh:
                fh.write("stat," + ",".join(vocab.tokens) + "\n")
                fh.write("min," + ",".join(repr(float(v)) for v in params.minimum) + "\n")
                fh.write("max," + ",".join(repr(float(v)) for v in params.maximum) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write feature table {path}: {exc}") from exc


def read_feature_table(path):
    """Inverse of assemble_feature_table; returns (ids, labels, matrix, tokens)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            tokens = header[2:]
            ids, labels, rows = [], [], []
            for raw in fh:
                parts = raw.strip().split(",")
                if not parts or parts == [""]:
                    continue
                ids.append(parts[0])
                labels.append(int(parts[1]))
                rows.append([int(v) for v in parts[2:]])
    except OSError as exc:
        raise IoFailure(f"cannot read feature table {path}: {exc}") from exc
    matrix = np.array(rows, dtype=np.int64) if rows else np.zeros((0, len(tokens)), np.int64)
    return ids, np.array(labels, dtype=np.int64), matrix, tokens


def save_images(images, ids, path):
    """Flat binary of 32-bit little-endian pixels, 1024 per sample, plus an id index."""
    stack = np.stack([img.pixels for img in images]).astype("<f4")
    try:
        stack.tofile(path)
        Path(str(path) + ".ids").write_text("\n".join(ids) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write image bank {path}: {exc}") from exc


def load_images(path):
    try:
        ids = Path(str(path) + ".ids").read_text(encoding="utf-8").split()
        flat = np.fromfile(path, dtype="<f4")
    except OSError as exc:
        raise IoFailure(f"cannot read image bank {path}: {exc}") from exc
    if flat.size != len(ids) * IMAGE_SIZE * IMAGE_SIZE:
        raise IoFailure(f"image bank {path} truncated")
    return ids, flat.reshape(len(ids), IMAGE_SIZE, IMAGE_SIZE).astype(np.float64)
