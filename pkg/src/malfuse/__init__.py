"""malfuse: hybrid byte-image / opcode-frequency malware family classification.

Parses disassembly and raw-byte representations, extracts deep image features
and wrapper-selected opcode features, fuses them and classifies nine malware
families with a small MLP. Ships a seeded synthetic corpus generator for
desk-scale experiments; points at a BIG-2015-style tree for the real thing.
"""

__version__ = "0.1.0"
