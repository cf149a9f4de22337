"""Linear-probe evaluation and run-level metrics."""
from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Sample, stack_pixels

ITERATION_COLUMNS = (
    "round", "client", "iteration", "loss", "eviction_ratio", "rescored_count", "resident_count",
    "buffer_mean_score", "buffer_min_score", "buffer_max_score",
)
ROUND_COLUMNS = (
    "round", "mean_loss", "mean_eviction_ratio", "probe_label_fraction", "probe_accuracy",
    "wall_clock_s", "seconds_per_segment",
)
PROBE_COLUMNS = ("label_fraction", "accuracy")
SCORE_COLUMNS = ("client", "round", "iteration", "sample_id", "score")


class StratificationError(ValueError):
    pass


def fmt(value) -> str:
    """CSV cell: 9 significant digits for floats, blank for missing values."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ""
    return f"{value:.9g}"


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])


@dataclass
class MetricsArchive:
    """Append-only record of a run.

    ``iterations`` holds one dict per client iteration (plus an in-memory
    ``seconds`` field that is never written to metrics.csv, so that file is
    reproducible byte for byte). ``scores`` holds per-resident score traces
    when score logging is enabled.
    """

    iterations: list[dict] = field(default_factory=list)
    rounds: list[dict] = field(default_factory=list)
    probes: list[dict] = field(default_factory=list)
    scores: list[dict] = field(default_factory=list)

    def add_iterations(self, rows: Iterable[dict]) -> None:
        last: dict[int, tuple[int, int]] = {}
        for r in self.iterations:
            last[r["client"]] = (r["round"], r["iteration"])
        for r in rows:
            key = (r["round"], r["iteration"])
            prev = last.get(r["client"])
            if prev is not None and key <= prev:
                raise ValueError(f"client {r['client']}: rows must be appended in (round, iteration) order")
            last[r["client"]] = key
            self.iterations.append(r)

    def series(self, column: str, client: int | None = None) -> np.ndarray:
        rows = self.iterations if client is None else [r for r in self.iterations if r["client"] == client]
        return np.array([np.nan if r.get(column) is None else r[column] for r in rows], dtype=float)

    def clients(self) -> list[int]:
        return sorted({r["client"] for r in self.iterations})

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "metrics.csv"), ITERATION_COLUMNS, self.iterations)
        write_csv(os.path.join(out_dir, "rounds.csv"), ROUND_COLUMNS, self.rounds)
        write_csv(os.path.join(out_dir, "probe.csv"), PROBE_COLUMNS, self.probes)
        if self.scores:
            write_csv(os.path.join(out_dir, "scores.csv"), SCORE_COLUMNS, self.scores)


@dataclass
class ProbeConfig:
    label_fraction: float = 0.1
    epochs: int = 50
    lr: float = 0.01
    batch_size: int = 128
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 are required")


def stratified_subsample(labels: Sequence[int], fraction: float, rng: np.random.Generator,
                         num_classes: int | None = None) -> np.ndarray:
    """Indices of a per-class subsample of size ``ceil(fraction * class size)`` (at least one)."""
    labels = np.asarray(labels)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    classes = np.unique(labels)
    if num_classes is not None:
        absent = sorted(set(range(num_classes)) - set(classes.tolist()))
        if absent:
            raise StratificationError(f"classes {absent} have no labelled samples")
    if fraction == 1.0:
        return np.arange(len(labels))
    picked = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        k = max(1, math.ceil(fraction * len(idx) - 1e-9))
        picked.append(np.sort(rng.choice(idx, size=k, replace=False)))
    return np.sort(np.concatenate(picked))


def encoder_features(params: dict[str, np.ndarray], cfg, batch_size: int = 512) -> Callable[[np.ndarray], np.ndarray]:
    """Frozen feature map from encoder parameters; runs without recording gradients."""
    from .model import encoder_forward
    from .ndcore import Tensor

    frozen = {k: Tensor(np.array(v, copy=True)) for k, v in params.items()}

    def features(pixels: np.ndarray) -> np.ndarray:
        out = [encoder_forward(frozen, Tensor(pixels[i:i + batch_size]), cfg).data
               for i in range(0, len(pixels), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, cfg.out_dim))

    return features


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(
    features: Callable[[np.ndarray], np.ndarray],
    train: Sequence[Sample],
    test: Sequence[Sample],
    cfg: ProbeConfig,
    num_classes: int | None = None,
) -> float:
    """Top-1 test accuracy of a softmax-regression classifier on frozen features.

    Features are standardized with statistics of the labelled subsample and the
    classifier is trained by minibatch SGD with momentum from a zero start.
    """
    labels = np.array([s.label for s in train])
    if num_classes is None:
        num_classes = int(max(labels.max(), max(s.label for s in test))) + 1
    rng = np.random.default_rng(cfg.seed)
    idx = stratified_subsample(labels, cfg.label_fraction, rng, num_classes)
    x_tr = np.asarray(features(stack_pixels([train[i] for i in idx])), dtype=np.float64)
    y_tr = labels[idx]
    x_te = np.asarray(features(stack_pixels(test)), dtype=np.float64)
    y_te = np.array([s.label for s in test])
    mu = x_tr.mean(axis=0)
    sd = np.maximum(x_tr.std(axis=0), 1e-8)
    x_tr = (x_tr - mu) / sd
    x_te = (x_te - mu) / sd

    w = np.zeros((x_tr.shape[1], num_classes))
    b = np.zeros(num_classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    onehot = np.eye(num_classes)[y_tr]
    n = len(x_tr)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            p = _softmax(x_tr[sel] @ w + b)
            g = (p - onehot[sel]) / len(sel)
            vw = cfg.momentum * vw + x_tr[sel].T @ g
            vb = cfg.momentum * vb + g.sum(axis=0)
            w -= cfg.lr * vw
            b -= cfg.lr * vb
    pred = np.argmax(x_te @ w + b, axis=1)
    return float(np.mean(pred == y_te))


def moving_average(series: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; windows are truncated (and renormalized) at the ends."""
    series = np.asarray(series, dtype=float)
    if window < 1:
        raise ValueError("window must be positive")
    if window > len(series):
        raise ValueError(f"smoothing window {window} exceeds series length {len(series)}")
    left = (window - 1) // 2
    padded = np.concatenate([np.full(left, np.nan), series, np.full(window - 1 - left, np.nan)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, window)
    return np.nanmean(windows, axis=1)


def eviction_trace(archive: MetricsArchive, smoothing_window: int) -> dict:
    """Smoothed eviction ratio per client (keyed by client id) and pooled across clients."""
    if not archive.iterations:
        raise ValueError("archive has no iteration rows")
    out: dict = {}
    pooled: dict[tuple[int, int], list[float]] = defaultdict(list)
    for c in archive.clients():
        rows = [r for r in archive.iterations if r["client"] == c]
        out[c] = moving_average([r["eviction_ratio"] for r in rows], smoothing_window)
        for r in rows:
            pooled[(r["round"], r["iteration"])].append(r["eviction_ratio"])
    out["pooled"] = moving_average([np.mean(pooled[k]) for k in sorted(pooled)], smoothing_window)
    return out


def score_trend(archive: MetricsArchive, sample_ids: Iterable[int] | None, window: int,
                start: int = 0, client: int = 0) -> dict:
    """Score series of samples resident during iterations ``start .. start + window - 1``.

    Only samples present in every iteration of the window are returned. The
    envelope holds the buffer's min, max and mean score per iteration.
    """
    its = list(range(start, start + window))
    wanted = None if sample_ids is None else set(sample_ids)
    by_sample: dict[int, dict[int, float]] = defaultdict(dict)
    for r in archive.scores:
        if r["client"] == client and start <= r["iteration"] < start + window:
            if wanted is None or r["sample_id"] in wanted:
                by_sample[r["sample_id"]][r["iteration"]] = r["score"]
    series = {
        sid: np.array([pts[i] for i in its])
        for sid, pts in sorted(by_sample.items())
        if all(i in pts for i in its)
    }
    rows = {r["iteration"]: r for r in archive.iterations if r["client"] == client}
    envelope = {
        key: np.array([rows[i][col] if i in rows else np.nan for i in its])
        for key, col in (("min", "buffer_min_score"), ("max", "buffer_max_score"), ("mean", "buffer_mean_score"))
    }
    return {"iterations": np.array(its), "series": series, "envelope": envelope}


def relative_batch_time(archive: MetricsArchive, baseline: MetricsArchive, skip: int = 0) -> float:
    """Mean per-iteration wall clock (buffer update + train step) relative to a baseline run."""
    a = archive.series("seconds")[skip:]
    b = baseline.series("seconds")[skip:]
    return float(np.mean(a) / np.mean(b))
