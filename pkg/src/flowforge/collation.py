"""Collate shuffle & drop: reference dropout/permutation with prompt re-indexing."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .manifest import SampleRecord

# each pattern must capture the figure index in group 1
DEFAULT_FIGURE_PATTERNS = (r"\b(?:fig(?:ure)?\.?)\s*([1-9][0-9]*)\b",)


class CollationError(ValueError):
    pass


@dataclass(frozen=True)
class CollationConfig:
    drop_prob: float = 0.0
    shuffle: bool = False
    seed: int = 0
    figure_patterns: tuple[str, ...] = DEFAULT_FIGURE_PATTERNS

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise CollationError(f"drop_prob must lie in [0, 1], got {self.drop_prob}")


@dataclass
class CollatedSample:
    id: str
    kept_refs: list[int]
    instruction: str
    permutation: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kept_refs": list(self.kept_refs),
            "instruction": self.instruction,
            "permutation": {str(k): v for k, v in sorted(self.permutation.items())},
        }


def _compile(patterns: Sequence[str]) -> list[re.Pattern]:
    return [re.compile(p, re.IGNORECASE) for p in patterns]


def _spans(instruction: str, patterns: Sequence[str]) -> list[tuple[int, int, int]]:
    """(start, end, index) of every figure-number span, non-overlapping, in text order."""
    found = []
    for rx in _compile(patterns):
        for m in rx.finditer(instruction):
            found.append((m.start(1), m.end(1), int(m.group(1))))
    found.sort()
    out, last_end = [], -1
    for start, end, idx in found:
        if start >= last_end:
            out.append((start, end, idx))
            last_end = end
    return out


def detect_references(
    instruction: str, patterns: Sequence[str] = DEFAULT_FIGURE_PATTERNS
) -> set[int]:
    return {idx for _, _, idx in _spans(instruction, patterns)}


def reindex_instruction(
    instruction: str,
    mapping: Mapping[int, int],
    patterns: Sequence[str] = DEFAULT_FIGURE_PATTERNS,
) -> str:
    """Rewrite every figure index k as mapping[k], all against the original text at once."""
    pieces, pos = [], 0
    for start, end, idx in _spans(instruction, patterns):
        if idx not in mapping:
            raise CollationError(f"no mapping for figure index {idx}")
        pieces.append(instruction[pos:start])
        pieces.append(str(mapping[idx]))
        pos = end
    pieces.append(instruction[pos:])
    return "".join(pieces)


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def collate(sample: SampleRecord, config: CollationConfig) -> CollatedSample:
    if sample.task != "edit":
        raise CollationError(f"sample {sample.id!r}: collate applies to edit samples only")
    n = sample.n_refs
    mentioned = detect_references(sample.instruction, config.figure_patterns)
    dangling = sorted(k for k in mentioned if k > n)
    if dangling:
        raise CollationError(
            f"sample {sample.id!r}: dangling figure reference {dangling} with {n} references"
        )

    rng = sample_rng(config.seed, sample.id)
    droppable = [k for k in range(1, n + 1) if k not in mentioned]
    # one uniform per droppable ref regardless of drop_prob keeps the stream layout fixed
    draws = rng.random(len(droppable))
    dropped = {k for k, u in zip(droppable, draws) if u < config.drop_prob}
    if len(dropped) == n:
        dropped.discard(droppable[int(rng.integers(len(droppable)))])
    kept = [k for k in range(1, n + 1) if k not in dropped]

    if config.shuffle:
        kept = [kept[i] for i in rng.permutation(len(kept))]
    permutation = {old: new for new, old in enumerate(kept, start=1)}
    instruction = reindex_instruction(sample.instruction, permutation, config.figure_patterns)
    return CollatedSample(sample.id, kept, instruction, permutation)


def invert(permutation: Mapping[int, int]) -> dict[int, int]:
    return {new: old for old, new in permutation.items()}
