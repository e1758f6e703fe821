"""Corpus ingestion: byte/ASM parsing, label loading, manifests and stratified splits.

Input layout follows the BIG-2015 convention: a labels CSV (id, class 1..9)
next to per-sample ``<id>.bytes`` and ``<id>.asm`` text files.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateId,
    EmptyFile,
    MalformedLine,
    MissingFile,
    TooFewSamples,
    UnknownClass,
)

FAMILIES = (
    "Ramnit",
    "Lollipop",
    "Kelihos_ver3",
    "Vundo",
    "Simda",
    "Tracur",
    "Kelihos_ver1",
    "Obfuscator.ACY",
    "Gatak",
)
NUM_FAMILIES = len(FAMILIES)

TRAIN, VAL, TEST = "TRAIN", "VAL", "TEST"
PARTITIONS = (TRAIN, VAL, TEST)

UNKNOWN = None  # cell value for a '??' byte

_HEX_BYTE = re.compile(r"^[0-9A-Fa-f]{2}$")
_UPPER_HEX_BYTE = re.compile(r"^[0-9A-F]{2}$")
_SECTION_ADDR = re.compile(r"^(?P<section>[^\s:]+):(?P<addr>[0-9A-Fa-f]+)$")
_MNEMONIC = re.compile(r"^[A-Za-z][A-Za-z0-9]*$")


@dataclass(frozen=True)
class Sample:
    id: str
    label: int
    bytes_source: Path
    asm_source: Path


@dataclass(frozen=True)
class ByteRecord:
    offset: str
    values: tuple  # ints 0..255, or UNKNOWN (None) for '??'


@dataclass
class AsmDocument:
    sections: list          # ordered (section name, line count) pairs
    opcode_stream: list     # mnemonic tokens in listing order
    skipped_lines: int = 0  # lines that did not match the listing layout

    def opcode_counts(self) -> Counter:
        return Counter(self.opcode_stream)


@dataclass
class CorpusManifest:
    samples: list
    class_histogram: list
    checksum: str

    def ids(self):
        return [s.id for s in self.samples]

    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass
class SplitAssignment:
    assignment: dict  # sample id -> TRAIN | VAL | TEST
    seed: int

    def ids_for(self, partition: str) -> list:
        return [sid for sid, part in self.assignment.items() if part == partition]


def parse_bytes_file(stream, path=None) -> list:
    """Parse a .bytes hex dump into ByteRecords.

    Each line is an offset token followed by byte tokens; a byte token is two
    hex digits or the literal ``??`` (an unreadable byte, kept as UNKNOWN).
    """
    records = []
    for line_no, raw in enumerate(stream, start=1):
        tokens = raw.split()
        if not tokens:
            continue
        offset, cells = tokens[0], []
        for tok in tokens[1:]:
            if _HEX_BYTE.match(tok):
                cells.append(int(tok, 16))
            elif tok == "??":
                cells.append(UNKNOWN)
            else:
                raise MalformedLine(line_no, tok, path)
        records.append(ByteRecord(offset=offset, values=tuple(cells)))
    if not records:
        raise EmptyFile(f"no byte records in {path or 'stream'}")
    return records


def parse_asm_file(stream) -> AsmDocument:
    """Parse an IDA-style listing into section tallies and an opcode stream.

    Per line: drop the leading ``section:address`` token, skip the following
    run of two-uppercase-hex-digit byte tokens, then take the next token as a
    mnemonic iff it is a letter followed by letters/digits (lowercased).
    Lines that do not fit the layout are counted, never fatal.
    """
    sections = []
    section_counts = {}
    opcode_stream = []
    skipped = 0
    for raw in stream:
        tokens = raw.split()
        if not tokens:
            continue
        head = _SECTION_ADDR.match(tokens[0])
        if head is None:
            skipped += 1
            continue
        name = head.group("section")
        if name not in section_counts:
            section_counts[name] = 0
            sections.append(name)
        section_counts[name] += 1
        idx = 1
        while idx < len(tokens) and _UPPER_HEX_BYTE.match(tokens[idx]):
            idx += 1
        if idx < len(tokens) and _MNEMONIC.match(tokens[idx]):
            opcode_stream.append(tokens[idx].lower())
    return AsmDocument(
        sections=[(name, section_counts[name]) for name in sections],
        opcode_stream=opcode_stream,
        skipped_lines=skipped,
    )


def load_labels(path) -> dict:
    """Read a two-column (id, class 1..9) CSV; returns id -> label in 0..8."""
    labels = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            sid, _, cls = line.partition(",")
            sid = sid.strip().strip('"')
            cls = cls.strip().strip('"')
            if line_no == 1 and not cls.isdigit():
                continue  # header row
            if not cls.isdigit() or not 1 <= int(cls) <= NUM_FAMILIES:
                raise UnknownClass(f"line {line_no}: class {cls!r} not in 1..{NUM_FAMILIES}")
            if sid in labels:
                raise DuplicateId(f"line {line_no}: id {sid!r} seen twice")
            labels[sid] = int(cls) - 1
    return labels


def _tree_checksum(samples) -> str:
    digest = hashlib.sha256()
    for s in samples:
        digest.update(s.id.encode())
        digest.update(bytes([s.label]))
        for p in (s.bytes_source, s.asm_source):
            digest.update(Path(p).read_bytes())
    return digest.hexdigest()


def ingest_corpus(root, labels: dict) -> CorpusManifest:
    """Resolve every labeled sample under ``root`` into a manifest."""
    root = Path(root)
    samples, missing = [], []
    for sid in sorted(labels):
        bytes_path = root / f"{sid}.bytes"
        asm_path = root / f"{sid}.asm"
        if not bytes_path.is_file():
            missing.append((sid, "bytes"))
        if not asm_path.is_file():
            missing.append((sid, "asm"))
        if bytes_path.is_file() and asm_path.is_file():
            samples.append(Sample(sid, labels[sid], bytes_path, asm_path))
    if missing:
        raise MissingFile(missing)
    histogram = [0] * NUM_FAMILIES
    for s in samples:
        histogram[s.label] += 1
    return CorpusManifest(samples=samples, class_histogram=histogram,
                          checksum=_tree_checksum(samples))


def save_manifest(manifest: CorpusManifest, path, root=None):
    root = Path(root) if root else None
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# checksum {manifest.checksum}\n")
        fh.write("id,label,bytes_path,asm_path\n")
        for s in manifest.samples:
            bp, ap = s.bytes_source, s.asm_source
            if root is not None:
                bp, ap = Path(bp).relative_to(root), Path(ap).relative_to(root)
            fh.write(f"{s.id},{s.label},{bp},{ap}\n")


def load_manifest(path, root=None) -> CorpusManifest:
    root = Path(root) if root else Path(path).parent
    samples = []
    checksum = ""
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line.startswith("# checksum"):
                checksum = line.split()[-1]
                continue
            if not line or line.startswith("id,"):
                continue
            sid, label, bp, ap = line.split(",")
            samples.append(Sample(sid, int(label), root / bp, root / ap))
    histogram = [0] * NUM_FAMILIES
    for s in samples:
        histogram[s.label] += 1
    return CorpusManifest(samples=samples, class_histogram=histogram, checksum=checksum)


def largest_remainder_counts(group_sizes, fraction) -> list:
    """Apportion round(fraction * total) slots over groups by largest remainder.

    Ties in the fractional remainders are broken by group order. The grand
    total is the half-up rounding of ``fraction * sum(sizes)``.
    """
    quotas = [fraction * n for n in group_sizes]
    total = int(np.floor(fraction * sum(group_sizes) + 0.5))
    counts = [int(np.floor(q)) for q in quotas]
    leftover = total - sum(counts)
    remainders = sorted(range(len(quotas)),
                        key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in remainders[:leftover]:
        counts[i] += 1
    return counts


def stratified_split(manifest: CorpusManifest, seed: int,
                     test_fraction: float = 0.25,
                     val_fraction: float = 0.25) -> SplitAssignment:
    """Assign every sample to TRAIN/VAL/TEST, stratified per family.

    Per family, ``test_fraction`` of the samples is held out, then
    ``val_fraction`` of the remainder; both use largest-remainder rounding.
    Membership is a seeded shuffle; sizes depend only on the histogram.
    """
    by_family = {f: [] for f in range(NUM_FAMILIES)}
    for s in manifest.samples:
        by_family[s.label].append(s.id)
    present = [f for f in range(NUM_FAMILIES) if by_family[f]]
    for f in present:
        if len(by_family[f]) < 3:
            raise TooFewSamples(FAMILIES[f], len(by_family[f]))

    sizes = [len(by_family[f]) for f in present]
    test_counts = largest_remainder_counts(sizes, test_fraction)
    val_counts = largest_remainder_counts(
        [n - t for n, t in zip(sizes, test_counts)], val_fraction)

    rng = np.random.default_rng(seed)
    assignment = {}
    for f, n_test, n_val in zip(present, test_counts, val_counts):
        ids = sorted(by_family[f])
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        for sid in shuffled[:n_test]:
            assignment[sid] = TEST
        for sid in shuffled[n_test:n_test + n_val]:
            assignment[sid] = VAL
        for sid in shuffled[n_test + n_val:]:
            assignment[sid] = TRAIN
    return SplitAssignment(assignment=assignment, seed=seed)


def stratified_index_split(labels, seed: int, test_fraction: float = 0.25,
                           val_fraction: float = 0.25):
    """Index-array flavor of stratified_split for feature matrices.

    Returns (train_idx, val_idx, test_idx) with the same per-class counting
    rule; class order (ascending label) is the tie-break order.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    sizes = [int((labels == c).sum()) for c in classes]
    for c, n in zip(classes, sizes):
        if n < 3:
            raise TooFewSamples(int(c), n)
    test_counts = largest_remainder_counts(sizes, test_fraction)
    val_counts = largest_remainder_counts(
        [n - t for n, t in zip(sizes, test_counts)], val_fraction)
    rng = np.random.default_rng(seed)
    train_idx, val_idx, test_idx = [], [], []
    for c, n_test, n_val in zip(classes, test_counts, val_counts):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        test_idx.extend(members[:n_test])
        val_idx.extend(members[n_test:n_test + n_val])
        train_idx.extend(members[n_test + n_val:])
    return (np.array(sorted(train_idx)), np.array(sorted(val_idx)),
            np.array(sorted(test_idx)))


def save_split(split: SplitAssignment, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# seed {split.seed}\n")
        for sid in sorted(split.assignment):
            fh.write(f"{sid},{split.assignment[sid]}\n")


def load_split(path) -> SplitAssignment:
    assignment, seed = {}, 0
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line.startswith("# seed"):
                seed = int(line.split()[-1])
            elif line:
                sid, part = line.split(",")
                assignment[sid] = part
    return SplitAssignment(assignment=assignment, seed=seed)
