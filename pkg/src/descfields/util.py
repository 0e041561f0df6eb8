"""Deterministic RNG splitting, content hashing, and small JSON helpers."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    h = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(h[:4], "little")


def seed_stream(root_seed: int, *tags) -> np.random.Generator:
    """Independent generator for (root_seed, tags...).

    Counter-based splitting: the tag path maps to SeedSequence entropy, so
    the same (seed, path) always yields the same stream regardless of how
    many other streams were drawn, or in what order.
    """
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path):
    with open(path) as f:
        return json.load(f)
