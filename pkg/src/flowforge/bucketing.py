"""Multi-condition aware bucket sampler.

Samples are grouped by (resolution bucket, reference count) so that every batch
has one tensor shape, and batches are cut so their visual token count never
exceeds a fixed per-device capacity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .manifest import ImageDims, SampleRecord


class BucketError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class BucketSpec:
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    def as_list(self) -> list[int]:
        return [self.height, self.width]


@dataclass(frozen=True)
class BucketTable:
    buckets: tuple[BucketSpec, ...]
    patch_size: int
    capacity: int

    def __post_init__(self):
        if not self.buckets:
            raise BucketError("bucket table must contain at least one bucket")
        if self.patch_size < 1:
            raise BucketError("patch_size must be >= 1")
        for b in self.buckets:
            if b.height < 1 or b.width < 1:
                raise BucketError(f"bucket {b.height}x{b.width} has non-positive side")
            if b.height % self.patch_size or b.width % self.patch_size:
                raise BucketError(
                    f"bucket {b.height}x{b.width} not divisible by patch size {self.patch_size}"
                )
        largest = max(visual_sequence_length([b], self.patch_size) for b in self.buckets)
        if self.capacity < largest:
            raise BucketError(
                f"capacity {self.capacity} below the largest single-bucket token count {largest}"
            )

    @classmethod
    def from_sizes(cls, sizes: Iterable[Sequence[int]], patch_size: int, capacity: int):
        return cls(tuple(BucketSpec(int(h), int(w)) for h, w in sizes), patch_size, capacity)


@dataclass(frozen=True)
class Batch:
    bucket: BucketSpec
    n_refs: int
    sample_ids: tuple[str, ...]
    token_count: int

    def to_dict(self) -> dict:
        return {
            "bucket": self.bucket.as_list(),
            "n_refs": self.n_refs,
            "sample_ids": list(self.sample_ids),
            "token_count": self.token_count,
        }


@dataclass
class BatchPlan:
    batches: list[Batch]
    dropped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "batches": [b.to_dict() for b in self.batches],
            "dropped": list(self.dropped),
            "n_batches": len(self.batches),
            "n_samples": sum(len(b.sample_ids) for b in self.batches),
        }


def visual_sequence_length(dims: Iterable, patch_size: int) -> int:
    """Sum over images of ceil(H * W / p^2); accepts ImageDims, BucketSpec or (h, w) pairs."""
    if patch_size < 1:
        raise BucketError("patch_size must be >= 1")
    p2 = patch_size * patch_size
    total = 0
    for d in dims:
        h, w = (d.height, d.width) if hasattr(d, "height") else d
        total += -(-(h * w) // p2)
    return total


def _aspect_key(bucket: BucketSpec, ref: ImageDims) -> Fraction:
    # |log(h/w) - log(H/W)| is monotone in max(q, 1/q) with q = h*W / (w*H); exact in rationals
    q = Fraction(bucket.height * ref.width, bucket.width * ref.height)
    return q if q >= 1 else 1 / q


def select_bucket(dims: Sequence[ImageDims], table: BucketTable) -> BucketSpec:
    """Pick the bucket for a sample whose images all share one bucket.

    Stage one keeps the buckets whose aspect ratio is closest (in log space) to
    the first image; stage two picks, among those, the bucket minimising the
    aggregate area mismatch over all images. Ties go to the smaller area, then
    the smaller height.
    """
    if not dims:
        raise BucketError("cannot select a bucket for an empty image set")
    first = dims[0]
    best_ratio = min(_aspect_key(b, first) for b in table.buckets)
    candidates = [b for b in table.buckets if _aspect_key(b, first) == best_ratio]
    return min(
        candidates,
        key=lambda b: (sum(abs(d.area - b.area) for d in dims), b.area, b.height),
    )


def sample_token_count(n_images: int, bucket: BucketSpec, patch_size: int) -> int:
    return n_images * visual_sequence_length([bucket], patch_size)


def plan_batches(
    records: Sequence[SampleRecord],
    table: BucketTable,
    batch_size: int,
    drop_last: bool = False,
    seed: int = 0,
) -> BatchPlan:
    """Deterministically group records into homogeneous, token-budgeted batches.

    Groups are keyed by (bucket, n_refs). Each group is shuffled with the seed and
    cut into chunks of ``batch_size``; a partial final chunk is dropped when
    ``drop_last``. A chunk that would exceed the capacity is split greedily in
    order. The resulting batch order is shuffled with the same seed.
    """
    if batch_size < 1:
        raise BucketError("batch_size must be >= 1")

    groups: dict[tuple[BucketSpec, int], list[SampleRecord]] = {}
    for record in records:
        bucket = select_bucket(record.all_dims(), table)
        tokens = sample_token_count(record.n_refs + 1, bucket, table.patch_size)
        if tokens > table.capacity:
            raise BucketError(
                f"sample {record.id!r} needs {tokens} tokens, over capacity {table.capacity}"
            )
        groups.setdefault((bucket, record.n_refs), []).append(record)

    rng = np.random.default_rng(seed)
    batches: list[Batch] = []
    dropped: list[str] = []
    for key in sorted(groups, key=lambda k: (k[1], k[0].height, k[0].width)):
        bucket, n_refs = key
        members = groups[key]
        order = rng.permutation(len(members))
        members = [members[i] for i in order]
        per_sample = sample_token_count(n_refs + 1, bucket, table.patch_size)
        per_batch = max(1, table.capacity // per_sample)
        for start in range(0, len(members), batch_size):
            chunk = members[start : start + batch_size]
            if len(chunk) < batch_size and drop_last:
                dropped.extend(r.id for r in chunk)
                continue
            for sub in range(0, len(chunk), per_batch):
                part = chunk[sub : sub + per_batch]
                batches.append(
                    Batch(bucket, n_refs, tuple(r.id for r in part), per_sample * len(part))
                )

    order = rng.permutation(len(batches))
    return BatchPlan([batches[i] for i in order], dropped)


def default_bucket_sizes(base: int = 1024, patch_size: int = 16) -> list[tuple[int, int]]:
    """Buckets near ``base``^2 pixels for the common layout ratios (2:1 ... 1:2)."""
    ratios = [(2, 1), (16, 9), (3, 2), (4, 3), (1, 1), (3, 4), (2, 3), (9, 16), (1, 2)]
    sizes = []
    for rw, rh in ratios:
        h = base * math.sqrt(rh / rw)
        w = base * math.sqrt(rw / rh)
        sizes.append(
            (
                max(patch_size, int(round(h / patch_size)) * patch_size),
                max(patch_size, int(round(w / patch_size)) * patch_size),
            )
        )
    return sizes
