"""Replay buffers and the coreset selection policies that maintain them.

The importance-scoring policy keeps the ``N`` samples whose online and target
representations disagree most. Residents may be rescored lazily: a resident is
rescored only when ``age % T == 0``, otherwise its last score competes as is.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ndcore as nd
from .augment import WEAK_METHODS, weak_view
from .data import UnlabeledSample, stack_pixels

POLICY_ALIASES = {
    "is": "is",
    "importance_scoring": "is",
    "rr": "rr",
    "random_replacement": "rr",
    "fifo": "fifo",
    "kcenter": "kcenter",
    "k_center": "kcenter",
}


def canonical_policy(name: str) -> str:
    try:
        return POLICY_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown buffer policy {name!r}; expected one of {sorted(set(POLICY_ALIASES))}") from None


def importance_scores(model, pixels: np.ndarray, weak_method: str = "hflip") -> np.ndarray:
    """``1 - cos(g_o(f_o(x)), f_t(weak(x)))`` for each image in a batch, clipped to [0, 2]."""
    pixels = np.asarray(pixels, dtype=model.dtype)
    y = model.forward_online(pixels).data
    yw = model.forward_target(weak_view(pixels, weak_method).astype(model.dtype, copy=False)).data
    ny = np.sqrt(np.sum(y * y, axis=1))
    nw = np.sqrt(np.sum(yw * yw, axis=1))
    if np.any(ny < nd.NORM_EPS) or np.any(nw < nd.NORM_EPS):
        raise nd.DegenerateVectorError("representation with near-zero norm; importance score undefined")
    cos = np.sum(y * yw, axis=1) / (ny * nw)
    return np.clip(1.0 - cos, 0.0, 2.0)


def importance_score(model, x, weak_method: str = "hflip") -> float:
    pixels = x.pixels if hasattr(x, "pixels") else np.asarray(x)
    return float(importance_scores(model, pixels[None], weak_method)[0])


@dataclass
class ScoredEntry:
    sample: UnlabeledSample
    score: float | None = None
    age: int = 0
    last_scored_age: int = 0
    admitted_seq: int = 0

    @property
    def id(self) -> int:
        return self.sample.id


@dataclass
class AdmissionReport:
    iteration: int
    admitted: list[int]
    evicted: list[int]
    rejected: list[int]
    eviction_ratio: float
    rescored_count: int
    resident_count: int

    @property
    def rescoring_fraction(self) -> float:
        return self.rescored_count / self.resident_count if self.resident_count else 0.0


@dataclass
class ReplayBuffer:
    """Fixed-capacity store of samples for one client.

    Args:
        capacity: maximum number of residents ``N``.
        policy: ``is``, ``rr``, ``fifo`` or ``kcenter`` (long names accepted).
        lazy_interval: rescoring interval ``T`` for ``is``; ``None`` rescores
            every resident on every update.
        weak_method: deterministic augmentation used for scoring.
        rr_mode: ``union`` draws ``N`` uniformly from buffer plus segment;
            ``reservoir`` applies the classical per-sample reservoir rule.
        seed: seed of the buffer's own generator (random replacement only).
    """

    capacity: int
    policy: str = "is"
    lazy_interval: int | None = None
    weak_method: str = "hflip"
    rr_mode: str = "union"
    seed: int = 0
    entries: list[ScoredEntry] = field(default_factory=list)
    seen: int = 0
    iteration: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.policy = canonical_policy(self.policy)
        if self.lazy_interval is not None and self.lazy_interval < 1:
            raise ValueError("lazy_interval must be a positive integer or None")
        if self.weak_method not in WEAK_METHODS:
            raise ValueError(f"unknown weak augmentation {self.weak_method!r}")
        if self.rr_mode not in ("union", "reservoir"):
            raise ValueError(f"unknown rr_mode {self.rr_mode!r}")
        self.rng = np.random.default_rng(self.seed)
        self._seq = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [e.id for e in self.entries]

    def samples(self) -> list[UnlabeledSample]:
        return [e.sample for e in self.entries]

    def pixels(self) -> np.ndarray:
        return stack_pixels(self.samples())

    def scores(self) -> np.ndarray:
        return np.array([np.nan if e.score is None else e.score for e in self.entries])

    def update(self, new_batch: Sequence[UnlabeledSample], model=None) -> AdmissionReport:
        if self.policy == "is":
            return update_buffer_is(self, new_batch, model)
        if self.policy == "rr":
            return update_buffer_rr(self, new_batch)
        if self.policy == "fifo":
            return update_buffer_fifo(self, new_batch)
        return update_buffer_kcenter(self, new_batch, model)

    def _new_entry(self, sample, score=None) -> ScoredEntry:
        self._seq += 1
        return ScoredEntry(sample, score, 0, 0, self._seq)

    def _split_arrivals(self, new_batch) -> list[UnlabeledSample]:
        """Arrivals that are neither resident already nor repeated earlier in the batch."""
        taken = {e.id for e in self.entries}
        fresh = []
        for x in new_batch:
            if x.id not in taken:
                fresh.append(x)
                taken.add(x.id)
        return fresh

    def _finish(self, kept, candidates, new_batch, residents, rescored: int) -> AdmissionReport:
        kept_set = {id(e) for e in kept}
        admitted = [e.id for e in candidates if id(e) in kept_set]
        admitted_set = set(admitted)
        rejected = [x.id for x in new_batch if x.id not in admitted_set]
        evicted = [e.id for e in residents if id(e) not in kept_set]
        for e in kept:
            e.age += 1
        self.entries = list(kept)
        self.seen += len(new_batch)
        report = AdmissionReport(
            iteration=self.iteration,
            admitted=admitted,
            evicted=evicted,
            rejected=rejected,
            eviction_ratio=len(rejected) / len(new_batch) if len(new_batch) else 0.0,
            rescored_count=rescored,
            resident_count=len(residents),
        )
        self.iteration += 1
        return report


def _topn_key(entry: ScoredEntry, resident: bool):
    # Higher score first; ties favour residents, then older residents, then lower id.
    return (-entry.score, 0 if resident else 1, -entry.age, entry.id)


def update_buffer_is(buffer: ReplayBuffer, new_batch: Sequence[UnlabeledSample], model) -> AdmissionReport:
    """Score the segment (and due residents), then keep the top ``N`` of buffer and segment."""
    if model is None:
        raise ValueError("importance scoring needs a model")
    residents = list(buffer.entries)
    arrivals = buffer._split_arrivals(new_batch)
    T = buffer.lazy_interval
    due = [e for e in residents if T is None or e.age % T == 0]
    to_score = [e.sample for e in due] + arrivals
    scores = importance_scores(model, stack_pixels(to_score), buffer.weak_method) if to_score else np.zeros(0)
    for e, s in zip(due, scores[:len(due)]):
        e.score = float(s)
        e.last_scored_age = e.age
    fresh = [buffer._new_entry(x, float(s)) for x, s in zip(arrivals, scores[len(due):])]
    ranked = sorted(
        [(_topn_key(e, True), e) for e in residents] + [(_topn_key(e, False), e) for e in fresh],
        key=lambda pair: pair[0],
    )
    kept = [e for _, e in ranked[:buffer.capacity]]
    return buffer._finish(kept, fresh, new_batch, residents, len(due))


def update_buffer_rr(buffer: ReplayBuffer, new_batch: Sequence[UnlabeledSample], rng=None) -> AdmissionReport:
    """Random replacement, in ``union`` or classical ``reservoir`` form."""
    rng = buffer.rng if rng is None else rng
    residents = list(buffer.entries)
    fresh = [buffer._new_entry(x) for x in buffer._split_arrivals(new_batch)]
    if buffer.rr_mode == "union":
        pool = residents + fresh
        if len(pool) > buffer.capacity:
            pick = np.sort(rng.choice(len(pool), size=buffer.capacity, replace=False))
            kept = [pool[i] for i in pick]
        else:
            kept = pool
    else:
        kept = list(residents)
        seen = buffer.seen
        for e in fresh:
            seen += 1
            if len(kept) < buffer.capacity:
                kept.append(e)
            else:
                j = int(rng.integers(0, seen))
                if j < buffer.capacity:
                    kept[j] = e
    return buffer._finish(kept, fresh, new_batch, residents, 0)


def update_buffer_fifo(buffer: ReplayBuffer, new_batch: Sequence[UnlabeledSample]) -> AdmissionReport:
    """Append the segment and drop the oldest admissions beyond capacity.

    A sample that arrives while still resident moves to the back of the queue.
    """
    residents = list(buffer.entries)
    unique = list({x.id: x for x in reversed(new_batch)}.values())[::-1]
    incoming = {x.id for x in unique}
    fresh = [buffer._new_entry(x) for x in unique]
    queue = [e for e in residents if e.id not in incoming] + fresh
    kept = queue[max(0, len(queue) - buffer.capacity):]
    return buffer._finish(kept, fresh, new_batch, residents, 0)


def farthest_first(features: np.ndarray, k: int) -> list[int]:
    """Greedy k-center: start nearest the centroid, then repeatedly add the farthest point."""
    n = len(features)
    if k >= n:
        return list(range(n))
    centroid = features.mean(axis=0)
    first = int(np.argmin(np.sum((features - centroid) ** 2, axis=1)))
    chosen = [first]
    mind = np.sqrt(np.sum((features - features[first]) ** 2, axis=1))
    mind[first] = -1.0
    while len(chosen) < k:
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        d = np.sqrt(np.sum((features - features[nxt]) ** 2, axis=1))
        mind = np.minimum(mind, d)
        mind[chosen] = -1.0
    return chosen


def update_buffer_kcenter(buffer: ReplayBuffer, new_batch: Sequence[UnlabeledSample], model) -> AdmissionReport:
    """Keep ``N`` points of buffer plus segment chosen by farthest-first traversal of encoder features."""
    if model is None:
        raise ValueError("k-center selection needs a model")
    residents = list(buffer.entries)
    fresh = [buffer._new_entry(x) for x in buffer._split_arrivals(new_batch)]
    pool = residents + fresh
    if len(pool) > buffer.capacity:
        feats = model.encode(np.asarray(stack_pixels([e.sample for e in pool]), dtype=model.dtype)).data
        pick = sorted(farthest_first(feats, buffer.capacity))
        kept = [pool[i] for i in pick]
    else:
        kept = pool
    return buffer._finish(kept, fresh, new_batch, residents, 0)
