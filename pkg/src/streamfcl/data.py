"""Datasets and temporally correlated client streams.

Labels travel with :class:`Sample` objects so that stream ordering and
evaluation can use them, but client streams hand out :class:`UnlabeledSample`
views only: buffer policies and local training never see a label.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from itertools import count
from typing import Iterable, Sequence

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class CifarFormatError(ValueError):
    pass


class CorruptRecordError(CifarFormatError):
    pass


class MissingLabelError(ValueError):
    pass


class EmptyStreamError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class UnlabeledSample:
    id: int
    pixels: np.ndarray


@dataclass(frozen=True, eq=False)
class Sample:
    id: int
    pixels: np.ndarray
    label: int | None = None

    def unlabeled(self) -> UnlabeledSample:
        return UnlabeledSample(self.id, self.pixels)


def stack_pixels(samples: Sequence) -> np.ndarray:
    return np.stack([s.pixels for s in samples])


def load_cifar10(path, max_records: int | None = None, id_start: int = 0) -> list[Sample]:
    """Parse a CIFAR-10 binary batch file.

    Each 3073-byte record is one label byte followed by the red, green and blue
    planes (1024 bytes each, row-major). Pixels are scaled into [0, 1].
    """
    raw = np.fromfile(os.fspath(path), dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD
        raise CifarFormatError(
            f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
            f"({raw.size - whole * CIFAR_RECORD} trailing bytes, expected {CIFAR_RECORD})"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    if max_records is not None:
        if max_records < 1:
            raise ValueError("max_records must be positive")
        records = records[:max_records]
    labels = records[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise CorruptRecordError(f"{path}: record {i} (byte offset {i * CIFAR_RECORD}) has label {labels[i]} > 9")
    pixels = records[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return [Sample(id_start + i, pixels[i], int(labels[i])) for i in range(len(records))]


def write_cifar10(samples: Iterable[Sample], path) -> None:
    """Write samples in CIFAR-10 binary layout (requires 3x32x32 pixels and labels 0-9)."""
    chunks = []
    for s in samples:
        if s.label is None or not 0 <= s.label <= 9:
            raise CorruptRecordError(f"sample {s.id}: label {s.label!r} not encodable in CIFAR-10 format")
        if s.pixels.shape != CIFAR_SHAPE:
            raise CifarFormatError(f"sample {s.id}: pixels {s.pixels.shape} are not {CIFAR_SHAPE}")
        body = np.rint(np.clip(s.pixels, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(-1)
        chunks.append(np.concatenate([np.array([s.label], dtype=np.uint8), body]))
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint8)
    blob.tofile(os.fspath(path))


def _templates(num_classes: int, channels: int, side: int, rng: np.random.Generator) -> np.ndarray:
    # Coarse random fields upsampled to full size, so class structure survives crops.
    coarse = max(2, side // 8)
    grid = rng.uniform(0.0, 1.0, size=(num_classes, channels, coarse, coarse))
    reps = -(-side // coarse)
    full = grid.repeat(reps, axis=2).repeat(reps, axis=3)
    return full[:, :, :side, :side]


def gen_synthetic(
    num_classes: int,
    per_class: int,
    side: int,
    noise_sigma: float,
    seed: int,
    channels: int = 3,
    noise_seed: int | None = None,
    id_start: int = 0,
) -> list[Sample]:
    """Class templates plus i.i.d. Gaussian noise, clamped to [0, 1].

    Templates depend on ``seed`` only; ``noise_seed`` (defaults to ``seed``)
    selects the noise draw, which allows a disjoint test split that shares the
    training templates.
    """
    if min(num_classes, per_class, side, channels) < 1:
        raise ValueError("num_classes, per_class, side and channels must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    templates = _templates(num_classes, channels, side, np.random.default_rng([seed, 0]))
    noise_rng = np.random.default_rng([seed if noise_seed is None else noise_seed, 1])
    samples = []
    ids = count(id_start)
    for c in range(num_classes):
        noise = noise_rng.normal(0.0, 1.0, size=(per_class, channels, side, side)) * noise_sigma
        imgs = np.clip(templates[c][None] + noise, 0.0, 1.0)
        samples.extend(Sample(next(ids), imgs[i], c) for i in range(per_class))
    return samples


@dataclass
class StreamConfig:
    stc: int = 500
    num_clients: int = 5
    segment_size: int = 128
    segments_per_round: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("stc", "num_clients", "segment_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.segments_per_round is not None and self.segments_per_round < 1:
            raise ValueError("segments_per_round must be >= 1")


def segments_for_samples(samples_per_round: int, segment_size: int) -> int:
    """Convert a per-round sample volume to a whole number of segments (at least one)."""
    return max(1, samples_per_round // segment_size)


@dataclass
class ClientStream:
    """One client's shard, served in order and wrapped cyclically."""

    samples: list[Sample]
    segment_size: int
    served: int = field(default=0)

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.samples]

    @property
    def cursor(self) -> int:
        return self.served % len(self.samples) if self.samples else 0

    def __len__(self) -> int:
        return len(self.samples)

    def next_segment(self) -> list[UnlabeledSample]:
        n = len(self.samples)
        if n == 0:
            raise EmptyStreamError("client stream has no samples")
        start = self.cursor
        idx = [(start + i) % n for i in range(self.segment_size)]
        self.served += self.segment_size
        return [self.samples[i].unlabeled() for i in idx]


def stc_order(samples: Sequence[Sample], stc: int, seed: int) -> list[Sample]:
    """Global stream order with single-class blocks of length ``stc``.

    Each class is shuffled and chopped into blocks (the last block of a class
    may be shorter); the pooled blocks are then shuffled. With ``stc == 1``
    this reduces to a uniform shuffle of the data.
    """
    if stc < 1:
        raise ValueError("stc must be >= 1")
    by_class: dict[int, list[Sample]] = {}
    for s in samples:
        if s.label is None:
            raise MissingLabelError(f"sample {s.id} has no label; stream ordering needs labels")
        by_class.setdefault(s.label, []).append(s)
    rng = np.random.default_rng([seed, 2])
    blocks = []
    for c in sorted(by_class):
        members = by_class[c]
        perm = rng.permutation(len(members))
        shuffled = [members[i] for i in perm]
        blocks.extend(shuffled[i:i + stc] for i in range(0, len(shuffled), stc))
    order = rng.permutation(len(blocks))
    return [s for b in order for s in blocks[b]]


def make_stc_stream(samples: Sequence[Sample], config: StreamConfig) -> list[ClientStream]:
    """Order the data by class blocks and split it into contiguous client shards."""
    ordered = stc_order(samples, config.stc, config.seed)
    k = config.num_clients
    if k > len(ordered):
        raise ValueError(f"cannot split {len(ordered)} samples across {k} clients")
    base, extra = divmod(len(ordered), k)
    bounds = np.cumsum([0] + [base + (i < extra) for i in range(k)])
    shards = [ordered[bounds[i]:bounds[i + 1]] for i in range(k)]
    assign = np.random.default_rng([config.seed, 3]).permutation(k)
    return [ClientStream(list(shards[j]), config.segment_size) for j in assign]


def next_segment(stream: ClientStream) -> list[UnlabeledSample]:
    return stream.next_segment()
