"""Round-driven federated orchestration.

Every round the server broadcasts the global online network, each client runs
local training over ``v`` fresh segments of its stream, and the server averages
the returned online networks. Clients own all of their state (model, buffer,
stream, generators), so results do not depend on how clients are scheduled.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentationPipeline
from .config import RunConfig, derive_seed
from .coreset import ReplayBuffer
from .data import ClientStream, Sample, StreamConfig, gen_synthetic, load_cifar10, make_stc_stream, segments_for_samples
from .eval import MetricsArchive, ProbeConfig, encoder_features, linear_probe
from .model import EncoderConfig, OptimConfig, SiameseModel, load_checkpoint, save_checkpoint, train_step
from .ndcore import ShapeError


class ClientError(RuntimeError):
    def __init__(self, client: int, iteration: int | None, cause: BaseException):
        where = f"client {client}" + ("" if iteration is None else f", iteration {iteration}")
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
        self.client = client
        self.iteration = iteration


@dataclass
class GlobalModel:
    encoder: dict[str, np.ndarray]
    predictor: dict[str, np.ndarray]
    round: int = 0

    def copy(self) -> GlobalModel:
        return GlobalModel({k: v.copy() for k, v in self.encoder.items()},
                           {k: v.copy() for k, v in self.predictor.items()}, self.round)


@dataclass
class ClientState:
    id: int
    model: SiameseModel
    buffer: ReplayBuffer
    stream: ClientStream
    rng: np.random.Generator
    iteration: int = 0


@dataclass
class LocalResult:
    encoder: dict[str, np.ndarray]
    predictor: dict[str, np.ndarray]
    rows: list[dict] = field(default_factory=list)
    scores: list[dict] = field(default_factory=list)


def _buffer_stats(buffer: ReplayBuffer) -> tuple:
    s = buffer.scores()
    if s.size == 0 or np.all(np.isnan(s)):
        return None, None, None
    return float(np.nanmean(s)), float(np.nanmin(s)), float(np.nanmax(s))


def local_train(
    client: ClientState,
    global_model: GlobalModel,
    v: int,
    opt: OptimConfig,
    pipeline: AugmentationPipeline,
    round_idx: int = 0,
    log_scores: bool = False,
) -> LocalResult:
    """Overwrite the online network from the global model, then run ``v`` buffer-update/train iterations."""
    try:
        client.model.set_online(global_model.encoder, global_model.predictor)
    except ShapeError as exc:
        raise ClientError(client.id, None, exc) from exc
    result = LocalResult({}, {})
    for _ in range(v):
        it = client.iteration
        try:
            segment = client.stream.next_segment()
            t0 = time.perf_counter()
            report = client.buffer.update(segment, client.model)
            loss = train_step(client.model, client.buffer.samples(), pipeline, client.rng, opt)
            seconds = time.perf_counter() - t0
        except Exception as exc:
            raise ClientError(client.id, it, exc) from exc
        mean_s, min_s, max_s = _buffer_stats(client.buffer)
        result.rows.append({
            "round": round_idx, "client": client.id, "iteration": it, "loss": loss,
            "eviction_ratio": report.eviction_ratio, "rescored_count": report.rescored_count,
            "resident_count": report.resident_count, "buffer_mean_score": mean_s,
            "buffer_min_score": min_s, "buffer_max_score": max_s, "seconds": seconds,
        })
        if log_scores:
            result.scores.extend(
                {"client": client.id, "round": round_idx, "iteration": it, "sample_id": e.id, "score": e.score}
                for e in client.buffer.entries
            )
        client.iteration += 1
    result.encoder, result.predictor = client.model.get_online()
    return result


def _weighted_mean(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    # Running form m += (x - m) * w / W: identical inputs come back bit-exact.
    mean = None
    total = 0.0
    for x, w in zip(arrays, weights):
        if w == 0:
            continue
        total += w
        if mean is None:
            mean = np.array(x, dtype=np.result_type(x, np.float32), copy=True)
        else:
            mean = mean + (x - mean) * (w / total)
    return mean


def aggregate(client_params: Sequence[tuple[dict, dict]], weights: Sequence[float] | None = None):
    """Elementwise (weighted) average of client ``(encoder, predictor)`` parameter dicts."""
    if not client_params:
        raise ValueError("aggregate needs at least one client")
    k = len(client_params)
    if weights is None:
        weights = [1.0 / k] * k
    weights = [float(w) for w in weights]
    if len(weights) != k or any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative, one per client, and sum to 1")
    ref_enc, ref_pred = client_params[0]
    for enc, pred in client_params[1:]:
        for ref, other in ((ref_enc, enc), (ref_pred, pred)):
            if ref.keys() != other.keys():
                raise ShapeError("clients disagree on parameter names")
            for name in ref:
                if np.shape(ref[name]) != np.shape(other[name]):
                    raise ShapeError(f"{name}: shape {list(np.shape(other[name]))} vs {list(np.shape(ref[name]))}")
    enc = {n: _weighted_mean([c[0][n] for c in client_params], weights) for n in ref_enc}
    pred = {n: _weighted_mean([c[1][n] for c in client_params], weights) for n in ref_pred}
    return enc, pred


@dataclass
class Federation:
    config: RunConfig
    global_model: GlobalModel
    clients: list[ClientState]
    train: list[Sample]
    test: list[Sample]
    encoder_cfg: EncoderConfig
    opt: OptimConfig
    pipeline: AugmentationPipeline
    segments_per_round: int
    archive: MetricsArchive = field(default_factory=MetricsArchive)


def load_dataset(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    d = cfg.dataset
    if d.source == "cifar10":
        train: list[Sample] = []
        for p in d.path:
            train.extend(load_cifar10(p, id_start=len(train)))
        if d.max_records is not None:
            train = train[:d.max_records]
        test: list[Sample] = []
        for p in d.test_path:
            test.extend(load_cifar10(p, id_start=len(train) + len(test)))
        return train, test
    data_seed = derive_seed(cfg.seed, "data")
    train = gen_synthetic(d.num_classes, d.per_class, d.side, d.noise_sigma, data_seed, channels=d.channels)
    test = gen_synthetic(d.num_classes, d.test_per_class, d.side, d.noise_sigma, data_seed, channels=d.channels,
                         noise_seed=derive_seed(cfg.seed, "data", "test"), id_start=len(train))
    if d.max_records is not None:
        train = train[:d.max_records]
    return train, test


def build_federation(cfg: RunConfig, datasets: tuple[list[Sample], list[Sample]] | None = None) -> Federation:
    train, test = datasets if datasets is not None else load_dataset(cfg)
    if not train:
        raise ValueError("training set is empty")
    dtype = np.float64 if cfg.training.precision == 64 else np.float32
    enc_cfg = EncoderConfig(cfg.encoder.kind, train[0].pixels.shape, tuple(cfg.encoder.hidden),
                            cfg.encoder.out_dim, cfg.encoder.predictor_hidden)
    t = cfg.training
    opt = OptimConfig(t.lr, t.weight_decay, t.loss, t.symmetrize_loss, t.temperature)
    pipeline = AugmentationPipeline(**cfg.augment.__dict__)
    scfg = StreamConfig(cfg.stream.stc, cfg.stream.num_clients, cfg.stream.segment_size,
                        cfg.stream.segments_per_round, derive_seed(cfg.seed, "stream"))
    streams = make_stc_stream(train, scfg)
    v = scfg.segments_per_round
    if v is None:
        v = segments_for_samples(len(train) // scfg.num_clients, scfg.segment_size)
    init_seed = derive_seed(cfg.seed, "global", "init")
    init = SiameseModel(enc_cfg, seed=init_seed, ema_tau=t.ema_tau, dtype=dtype)
    global_model = GlobalModel(*init.get_online(), round=0)
    clients = []
    for k, stream in enumerate(streams):
        model = SiameseModel(enc_cfg, seed=init_seed, ema_tau=t.ema_tau, dtype=dtype)
        buffer = ReplayBuffer(cfg.stream.segment_size, cfg.policy.name, cfg.policy.lazy_interval,
                              cfg.policy.weak_method, cfg.policy.rr_mode, seed=derive_seed(cfg.seed, "client", k, "buffer"))
        rng = np.random.default_rng(derive_seed(cfg.seed, "client", k, "augment"))
        clients.append(ClientState(k, model, buffer, stream, rng))
    return Federation(cfg, global_model, clients, train, test, enc_cfg, opt, pipeline, v)


def _participants(fed: Federation, round_idx: int) -> list[ClientState]:
    frac = fed.config.training.participation
    if frac >= 1.0:
        return list(fed.clients)
    m = max(1, int(round(frac * len(fed.clients))))
    rng = np.random.default_rng(derive_seed(fed.config.seed, "participation", round_idx))
    pick = np.sort(rng.choice(len(fed.clients), size=m, replace=False))
    return [fed.clients[i] for i in pick]


def probe_global(fed: Federation, fraction: float) -> float:
    p = fed.config.probe
    cfg = ProbeConfig(fraction, p.epochs, p.lr, p.batch_size, p.momentum, seed=derive_seed(fed.config.seed, "probe"))
    feats = encoder_features(fed.global_model.encoder, fed.encoder_cfg)
    return linear_probe(feats, fed.train, fed.test, cfg)


def run_round(fed: Federation, jobs: int = 1) -> dict:
    """One communication round; returns the round's summary row."""
    r = fed.global_model.round
    active = _participants(fed, r)
    snapshot = fed.global_model.copy()
    log = fed.config.log_scores
    t0 = time.perf_counter()

    def work(c: ClientState) -> LocalResult:
        return local_train(c, snapshot, fed.segments_per_round, fed.opt, fed.pipeline, r, log and c.id == 0)

    if jobs > 1 and len(active) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, active))
    else:
        results = [work(c) for c in active]
    if fed.config.training.aggregation == "volume":
        sizes = np.array([len(c.stream) for c in active], dtype=float)
        weights = list(sizes / sizes.sum())
        weights[-1] = 1.0 - sum(weights[:-1])
    else:
        weights = None
    enc, pred = aggregate([(res.encoder, res.predictor) for res in results], weights)
    fed.global_model = GlobalModel(enc, pred, r + 1)
    rows = [row for res in results for row in res.rows]
    fed.archive.add_iterations(rows)
    for res in results:
        fed.archive.scores.extend(res.scores)
    wall = time.perf_counter() - t0
    summary = {
        "round": r,
        "mean_loss": float(np.mean([x["loss"] for x in rows])) if rows else None,
        "mean_eviction_ratio": float(np.mean([x["eviction_ratio"] for x in rows])) if rows else None,
        "probe_label_fraction": None,
        "probe_accuracy": None,
        "wall_clock_s": wall,
        "seconds_per_segment": float(np.mean([x["seconds"] for x in rows])) if rows else None,
    }
    every = fed.config.probe.eval_every
    if every and (r + 1) % every == 0:
        summary["probe_label_fraction"] = fed.config.probe.eval_fraction
        summary["probe_accuracy"] = probe_global(fed, fed.config.probe.eval_fraction)
    fed.archive.rounds.append(summary)
    return summary


def run_rounds(fed: Federation, rounds: int, jobs: int = 1,
               on_round: Callable[[Federation, dict], None] | None = None) -> Federation:
    for _ in range(rounds):
        summary = run_round(fed, jobs)
        if on_round is not None:
            on_round(fed, summary)
    return fed


def final_probes(fed: Federation) -> list[dict]:
    rows = [{"label_fraction": f, "accuracy": probe_global(fed, f)} for f in fed.config.probe.label_fractions]
    fed.archive.probes = rows
    return rows


def run(cfg: RunConfig, datasets=None, jobs: int | None = None, probe: bool = True,
        on_round: Callable[[Federation, dict], None] | None = None, resume: str | None = None) -> Federation:
    """Build the federation from ``cfg`` and train for the configured number of rounds."""
    fed = build_federation(cfg, datasets)
    if resume is not None:
        restore_state(fed, resume)
    remaining = max(0, cfg.training.rounds - fed.global_model.round)
    run_rounds(fed, remaining, jobs if jobs is not None else cfg.jobs, on_round)
    if probe:
        final_probes(fed)
    return fed


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_state(fed: Federation, path) -> None:
    """Round-boundary checkpoint: global model, per-client targets, buffers, cursors and generator states."""
    tensors = {}
    for k, v in fed.global_model.encoder.items():
        tensors[f"global.encoder.{k}"] = v
    for k, v in fed.global_model.predictor.items():
        tensors[f"global.predictor.{k}"] = v
    clients = []
    for c in fed.clients:
        for k, t in c.model.target.items():
            tensors[f"client{c.id}.target.encoder.{k}"] = t.data
        clients.append({
            "id": c.id,
            "iteration": c.iteration,
            "served": c.stream.served,
            "aug_rng": _rng_state(c.rng),
            "buffer_rng": _rng_state(c.buffer.rng),
            "buffer_seen": c.buffer.seen,
            "buffer_iteration": c.buffer.iteration,
            "buffer_seq": c.buffer._seq,
            "entries": [[e.id, e.score, e.age, e.last_scored_age, e.admitted_seq] for e in c.buffer.entries],
        })
    meta = {"round": fed.global_model.round, "seed": fed.config.seed, "clients": clients}
    save_checkpoint(path, tensors, meta)


def restore_state(fed: Federation, path) -> None:
    from .coreset import ScoredEntry

    expected = {f"global.encoder.{k}": v.shape for k, v in fed.global_model.encoder.items()}
    expected.update({f"global.predictor.{k}": v.shape for k, v in fed.global_model.predictor.items()})
    for c in fed.clients:
        expected.update({f"client{c.id}.target.encoder.{k}": t.shape for k, t in c.model.target.items()})
    tensors, meta = load_checkpoint(path, expected)
    fed.global_model = GlobalModel(
        {k: tensors[f"global.encoder.{k}"] for k in fed.global_model.encoder},
        {k: tensors[f"global.predictor.{k}"] for k in fed.global_model.predictor},
        int(meta["round"]),
    )
    lookup = {s.id: s for s in fed.train}
    for c, state in zip(fed.clients, meta["clients"]):
        for k, t in c.model.target.items():
            t.data = np.array(tensors[f"client{c.id}.target.encoder.{k}"], dtype=c.model.dtype)
        c.iteration = state["iteration"]
        c.stream.served = state["served"]
        c.rng.bit_generator.state = state["aug_rng"]
        c.buffer.rng.bit_generator.state = state["buffer_rng"]
        c.buffer.seen = state["buffer_seen"]
        c.buffer.iteration = state["buffer_iteration"]
        c.buffer._seq = state["buffer_seq"]
        c.buffer.entries = [ScoredEntry(lookup[i].unlabeled(), score, age, last, seq)
                            for i, score, age, last, seq in state["entries"]]
