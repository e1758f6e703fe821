"""Seeded synthetic corpus generator: desk-scale stand-in for the real dataset.

Each family plants signal in both modalities, deliberately split so neither
alone identifies a family:

* byte texture  — family // 3 picks the pattern amplitude, so images reveal
  only the "texture group";
* opcode mixture — family % 3 picks which mnemonic block is boosted, so term
  frequencies reveal only the "opcode residue".

Combining both resolves all nine families, which is what the fused feature
space is for. The generator records exactly what it planted so parsers can be
checked against ground truth.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CorpusManifest, ingest_corpus
from .errors import InvalidSpec

# 38 instruction mnemonics + the two data-definition tokens the tokenizer
# also yields (dd/db lines in .data sections); 40 distinct tokens total.
OPCODE_POOL = (
    "mov", "push", "pop", "call", "lea", "xor", "add", "sub", "cmp",
    "jmp", "jz", "jnz", "test", "ret", "inc", "dec", "and", "or",
    "shl", "shr", "imul", "idiv", "movzx", "movsx", "nop", "int",
    "jb", "ja", "jle", "jge", "xchg", "sbb", "adc", "neg", "not",
    "rol", "ror", "cdq", "dd", "db",
)

# three disjoint mnemonic blocks; block f%3 is boosted for family f
SIGNAL_BLOCKS = (
    ("mov", "push", "call"),
    ("xor", "lea", "cmp"),
    ("add", "sub", "test"),
)

_OPERANDS = (
    "eax", "ebx", "ecx", "edx", "esi", "edi",
    "eax, ebx", "ecx, eax", "edx, dword ptr [eax]",
    "[esp+8]", "[ebp+var_4], eax", "eax, [esp+2Ch+var_C]",
    "offset loc_401000", "offset a9gw0p ; \"9gw0p\"",
    "5", "0Fh", "10h", "short loc_4020BD", "large fs:0, eax",
)


@dataclass(frozen=True)
class SyntheticSpec:
    families: int = 9
    per_family: int = 90
    byte_length: tuple = (3600, 4096)
    opcode_tokens: tuple = (380, 520)
    mean_level: float = 0.35              # shared brightness; groups differ in texture only
    amplitude: float = 0.22
    noise_sigma: float = 0.05
    texture_cycles: float = 4.0           # stripe frequency over the byte grid
    unknown_rate: float = 0.002           # fraction of '??' cells
    signal_boost: float = 8.0             # weight multiplier for boosted block
    background_keep: float = 0.55         # per-sample chance a background opcode is used
    data_lines: tuple = (6, 16)           # dd/db line count range


@dataclass
class SamplePlan:
    family: int
    byte_values: tuple      # planted cells; None where '??' was written
    opcode_counts: Counter  # every token the listing yields, incl. dd/db


def _validate(spec: SyntheticSpec):
    if not 1 <= spec.families <= 9:
        raise InvalidSpec(f"families must be in 1..9, got {spec.families}")
    if spec.per_family < 3:
        raise InvalidSpec("per_family must be >= 3 so the corpus can be split")
    for name in ("byte_length", "opcode_tokens", "data_lines"):
        lo, hi = getattr(spec, name)
        if not 0 < lo <= hi:
            raise InvalidSpec(f"{name} range {lo}..{hi} is not valid")
    if not 0.0 < spec.mean_level < 1.0 or spec.amplitude <= 0:
        raise InvalidSpec("mean_level must be in (0,1) and amplitude positive")


def _texture_bytes(spec: SyntheticSpec, family: int, n: int, rng) -> np.ndarray:
    """Oriented stripes: the family group picks the direction (rows, columns
    or diagonal), the per-sample phase is random. Mean brightness carries no
    label signal, so classifiers must pick up the texture itself."""
    w = math.ceil(math.sqrt(n))
    h = math.ceil(n / w)
    rows = np.arange(h) / max(h - 1, 1)
    cols = np.arange(w) / max(w - 1, 1)
    u, v = np.meshgrid(rows, cols, indexing="ij")
    coord = (u, v, (u + v) / 2.0)[(family // 3) % 3]
    phase = rng.uniform(0.0, 2.0 * np.pi)
    level = spec.mean_level \
        + spec.amplitude * np.sin(2.0 * np.pi * spec.texture_cycles * coord + phase) \
        + rng.normal(0.0, spec.noise_sigma, size=coord.shape)
    values = np.clip(np.rint(level * 255.0), 0, 255).astype(np.int64)
    return values.reshape(-1)[:n]


def _opcode_mixture(spec: SyntheticSpec, family: int, rng) -> np.ndarray:
    """Per-sample mixture: the family's signal block is always present and
    boosted; each background mnemonic is used with probability
    ``background_keep`` (real binaries use differing instruction subsets,
    and sparsity lets document frequency rank the stable signal first)."""
    weights = np.where(rng.random(len(OPCODE_POOL)) < spec.background_keep, 1.0, 0.0)
    for mnem in ("dd", "db"):
        weights[OPCODE_POOL.index(mnem)] = 1.0
    for mnem in SIGNAL_BLOCKS[family % 3]:
        weights[OPCODE_POOL.index(mnem)] = spec.signal_boost
    return weights / weights.sum()


def _emit_bytes_file(path: Path, values, unknown_mask):
    lines = []
    for start in range(0, len(values), 16):
        offset = f"{0x00401000 + start:08X}"
        cells = []
        for i in range(start, min(start + 16, len(values))):
            cells.append("??" if unknown_mask[i] else f"{values[i]:02X}")
        lines.append(offset + " " + " ".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _emit_asm_file(path: Path, tokens, dd_count, db_count, rng):
    lines = [
        ".text:00401000 ; ===== synthetic listing =====",
        ".text:00401000 _text segment para public 'CODE' use32",
    ]
    addr = 0x00401010
    for k, mnem in enumerate(tokens):
        size = int(rng.integers(1, 6))
        hexbytes = " ".join(f"{int(b):02X}" for b in rng.integers(0, 256, size))
        operand = _OPERANDS[int(rng.integers(0, len(_OPERANDS)))]
        lines.append(f".text:{addr:08X} {hexbytes} {mnem} {operand}")
        addr += size
        if k % 37 == 36:
            lines.append(f".text:{addr:08X} ; " + "-" * 24)
    addr = 0x00410000
    for _ in range(dd_count):
        val = int(rng.integers(0, 2 ** 31))
        lines.append(f".data:{addr:08X} dd {val:X}h")
        addr += 4
    for _ in range(db_count):
        lines.append(f".data:{addr:08X} db {int(rng.integers(0, 256)):X}h")
        addr += 1
    lines.append(f".bss:{addr + 0x100:08X} byte_{addr + 0x100:X} db ?")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def generate_synthetic_corpus(spec: SyntheticSpec, seed: int, out_dir):
    """Write a labeled .bytes/.asm tree under ``out_dir``.

    Returns (manifest, plans) where plans maps sample id -> SamplePlan with
    the exact planted byte cells and opcode counts.
    """
    _validate(spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    labels = {}
    plans = {}
    index = 0
    label_rows = ["Id,Class"]
    for family in range(spec.families):
        for _ in range(spec.per_family):
            sid = f"syn{seed & 0xFFFF:04x}{index:06d}"
            index += 1
            labels[sid] = family
            label_rows.append(f"{sid},{family + 1}")

            n = int(rng.integers(spec.byte_length[0], spec.byte_length[1] + 1))
            values = _texture_bytes(spec, family, n, rng)
            unknown_mask = rng.random(n) < spec.unknown_rate
            _emit_bytes_file(out_dir / f"{sid}.bytes", values, unknown_mask)

            mixture = _opcode_mixture(spec, family, rng)
            n_tokens = int(rng.integers(spec.opcode_tokens[0], spec.opcode_tokens[1] + 1))
            counts = rng.multinomial(n_tokens, mixture)
            dd_extra = int(rng.integers(spec.data_lines[0], spec.data_lines[1] + 1))
            db_extra = int(rng.integers(spec.data_lines[0], spec.data_lines[1] + 1))
            counts[OPCODE_POOL.index("dd")] += dd_extra
            counts[OPCODE_POOL.index("db")] += db_extra

            text_tokens = []
            for mnem, c in zip(OPCODE_POOL, counts):
                if mnem not in ("dd", "db"):
                    text_tokens.extend([mnem] * int(c))
            order = rng.permutation(len(text_tokens))
            text_tokens = [text_tokens[i] for i in order]
            dd_count = int(counts[OPCODE_POOL.index("dd")])
            db_count = int(counts[OPCODE_POOL.index("db")])
            _emit_asm_file(out_dir / f"{sid}.asm", text_tokens, dd_count, db_count, rng)

            planted = Counter({m: int(c) for m, c in zip(OPCODE_POOL, counts) if c})
            cells = tuple(None if unknown_mask[i] else int(values[i]) for i in range(n))
            plans[sid] = SamplePlan(family=family, byte_values=cells, opcode_counts=planted)

    (out_dir / "trainLabels.csv").write_text("\n".join(label_rows) + "\n", encoding="utf-8")
    manifest = ingest_corpus(out_dir, labels)
    return manifest, plans
