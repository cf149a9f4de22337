"""Siamese contrastive model: online encoder + predictor, EMA target encoder."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndcore as nd
from .augment import AugmentationPipeline, strong_views
from .ndcore import Tape, Tensor

CHECKPOINT_FORMAT = "streamfcl.checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderConfig:
    """Encoder architecture.

    ``hidden`` lists conv channel counts for ``smallconv`` (stride-2 3x3
    layers) or layer widths for ``mlp``. Pixels are shifted by
    ``-input_center`` before the first layer.
    """

    kind: str = "smallconv"
    input_shape: tuple[int, int, int] = (3, 16, 16)
    hidden: tuple[int, ...] = (16, 32)
    out_dim: int = 32
    predictor_hidden: int = 64
    input_center: float = 0.5

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.hidden = tuple(int(v) for v in self.hidden)
        if self.kind not in ("mlp", "smallconv"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError("input_shape must be three positive integers (C, H, W)")
        if self.out_dim < 2:
            raise ValueError("out_dim must be >= 2")
        if not self.hidden or min(self.hidden) < 1 or self.predictor_hidden < 1:
            raise ValueError("layer widths must be positive")


@dataclass
class OptimConfig:
    lr: float = 0.06
    weight_decay: float = 1e-4
    loss: str = "byol"
    symmetrize: bool = False
    temperature: float = 0.5

    def __post_init__(self):
        if self.loss not in ("byol", "infonce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be nonnegative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _conv_out(n: int) -> int:
    # 3x3 kernel, stride 2, padding 1
    return (n - 1) // 2 + 1


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    c, h, w = cfg.input_shape
    if cfg.kind == "smallconv":
        for i, width in enumerate(cfg.hidden, start=1):
            params[f"conv{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / (c * 9)), size=(3, 3, c, width))
            params[f"conv{i}.bias"] = np.zeros(width)
            c, h, w = width, _conv_out(h), _conv_out(w)
        fan_in = c * h * w
    else:
        fan_in = c * h * w
        for i, width in enumerate(cfg.hidden, start=1):
            params[f"fc{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width))
            params[f"fc{i}.bias"] = np.zeros(width)
            fan_in = width
    params["out.weight"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, cfg.out_dim))
    params["out.bias"] = np.zeros(cfg.out_dim)
    return {k: v.astype(dtype) for k, v in params.items()}


def init_predictor(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    d, hid = cfg.out_dim, cfg.predictor_hidden
    params = {
        "fc1.weight": rng.normal(0.0, np.sqrt(2.0 / d), size=(d, hid)),
        "fc1.bias": np.zeros(hid),
        "fc2.weight": rng.normal(0.0, np.sqrt(1.0 / hid), size=(hid, d)),
        "fc2.bias": np.zeros(d),
    }
    return {k: v.astype(dtype) for k, v in params.items()}


def _linear(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return nd.add_bias(nd.matmul(x, p[f"{name}.weight"]), p[f"{name}.bias"])


def encoder_forward(p: dict[str, Tensor], x: Tensor, cfg: EncoderConfig) -> Tensor:
    if tuple(x.shape[1:]) != cfg.input_shape:
        raise nd.ShapeError(f"encoder expects inputs of shape {list(cfg.input_shape)}, got {list(x.shape[1:])}")
    if cfg.kind == "smallconv":
        # Images arrive as [B, C, H, W]; the conv stack runs channels-last.
        if x.requires_grad:
            raise ValueError("smallconv encoder inputs must be constants")
        h = Tensor(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)) - cfg.input_center)
        for i in range(1, len(cfg.hidden) + 1):
            h = nd.relu(nd.add_bias(nd.conv2d(h, p[f"conv{i}.weight"], stride=2, pad=1), p[f"conv{i}.bias"]))
        h = nd.reshape(h, (h.shape[0], -1))
    else:
        h = nd.add(nd.reshape(x, (x.shape[0], -1)), -cfg.input_center)
        for i in range(1, len(cfg.hidden) + 1):
            h = nd.relu(_linear(h, p, f"fc{i}"))
    return _linear(h, p, "out")


def predictor_forward(p: dict[str, Tensor], y: Tensor) -> Tensor:
    return _linear(nd.relu(_linear(y, p, "fc1")), p, "fc2")


def _batch(x) -> tuple[Tensor, bool]:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    t = x if isinstance(x, Tensor) and not single else Tensor(arr)
    return t, single


def _unbatch(y: Tensor, single: bool) -> Tensor:
    return nd.reshape(y, (y.shape[1],)) if single else y


class SiameseModel:
    """Online network (encoder + predictor) and target encoder for one client."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, ema_tau: float = 0.99, dtype=np.float64):
        if not 0.0 <= ema_tau < 1.0:
            raise ValueError("ema_tau must lie in [0, 1)")
        self.cfg = cfg
        self.ema_tau = ema_tau
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        enc = init_encoder(cfg, rng, self.dtype)
        pred = init_predictor(cfg, rng, self.dtype)
        self.encoder = {k: Tensor(v, requires_grad=True, name=f"online.encoder.{k}") for k, v in enc.items()}
        self.predictor = {k: Tensor(v, requires_grad=True, name=f"online.predictor.{k}") for k, v in pred.items()}
        self.target = {k: Tensor(v.copy(), name=f"target.encoder.{k}") for k, v in enc.items()}

    def online_parameters(self) -> list[Tensor]:
        return list(self.encoder.values()) + list(self.predictor.values())

    def forward_online(self, x) -> Tensor:
        """``g_o(f_o(x))`` for one image ``[C,H,W]`` or a batch ``[B,C,H,W]``."""
        t, single = _batch(x)
        return _unbatch(predictor_forward(self.predictor, encoder_forward(self.encoder, t, self.cfg)), single)

    def encode(self, x) -> Tensor:
        t, single = _batch(x)
        return _unbatch(encoder_forward(self.encoder, t, self.cfg), single)

    def forward_target(self, x) -> Tensor:
        t, single = _batch(x)
        return _unbatch(encoder_forward(self.target, nd.detach(t), self.cfg), single)

    def get_online(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        return (
            {k: v.data.copy() for k, v in self.encoder.items()},
            {k: v.data.copy() for k, v in self.predictor.items()},
        )

    def set_online(self, encoder: dict[str, np.ndarray], predictor: dict[str, np.ndarray]) -> None:
        for mine, theirs in ((self.encoder, encoder), (self.predictor, predictor)):
            if mine.keys() != theirs.keys():
                raise nd.ShapeError("parameter names differ from the model's")
            for k, t in mine.items():
                if t.shape != np.shape(theirs[k]):
                    raise nd.ShapeError(f"{k}: shape {list(np.shape(theirs[k]))} vs model {list(t.shape)}")
                t.data = np.array(theirs[k], dtype=self.dtype, copy=True)
                t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for prefix, group in (("online.encoder", self.encoder), ("online.predictor", self.predictor),
                              ("target.encoder", self.target)):
            for k, t in group.items():
                state[f"{prefix}.{k}"] = t.data.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        _check_names_shapes(state, {k: v.shape for k, v in expected.items()})
        for prefix, group in (("online.encoder", self.encoder), ("online.predictor", self.predictor),
                              ("target.encoder", self.target)):
            for k, t in group.items():
                t.data = np.array(state[f"{prefix}.{k}"], dtype=self.dtype, copy=True)
                t.grad = None


def byol_loss_rows(y_o: Tensor, y_t: Tensor) -> Tensor:
    """Per-row ``2 - 2 cos(y_o, y_t)``; the target side is a constant."""
    if y_o.shape != y_t.shape:
        raise nd.ShapeError(f"byol_loss: shapes {list(y_o.shape)} and {list(y_t.shape)} differ")
    a = y_o if y_o.data.ndim == 2 else nd.reshape(y_o, (1, -1))
    b = nd.detach(y_t).data.reshape(a.shape)
    cos = nd.rowsum(nd.mul(nd.l2_normalize(a), nd.l2_normalize(Tensor(b))))
    return nd.add(nd.scale(cos, -2.0), 2.0)


def byol_loss(y_o: Tensor, y_t: Tensor) -> Tensor:
    """Normalized squared distance ``2 - 2 cos``, averaged over rows for batches."""
    return nd.mean(byol_loss_rows(y_o, y_t))


def infonce_loss(y_o: Tensor, y_t_pos: Tensor, negatives: Sequence[Tensor], temperature: float = 0.5) -> Tensor:
    """Cross-entropy of the positive among ``[positive] + negatives`` with cosine logits."""
    if not negatives:
        raise ValueError("infonce_loss needs at least one negative")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    keys = np.stack([nd.detach(y_t_pos).data] + [nd.detach(n).data for n in negatives])
    keys = nd.l2_normalize(Tensor(keys))
    q = nd.reshape(nd.l2_normalize(y_o), (-1, 1))
    logits = nd.scale(nd.matmul(keys, q), 1.0 / temperature)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[0, 0] = 1.0
    pos = nd.sum_all(nd.mul(logits, Tensor(onehot)))
    return nd.sub(nd.log(nd.sum_all(nd.exp(logits))), pos)


def infonce_batch(y_o: Tensor, y_t: Tensor, temperature: float = 0.5) -> Tensor:
    """Mean InfoNCE over a batch where the other rows' targets are the negatives."""
    if y_o.shape != y_t.shape or y_o.data.ndim != 2 or y_o.shape[0] < 2:
        raise nd.ShapeError("infonce_batch needs matching [B, D] inputs with B >= 2")
    q = nd.l2_normalize(y_o)
    k = nd.l2_normalize(nd.detach(y_t))
    logits = nd.scale(nd.matmul(q, Tensor(k.data.T)), 1.0 / temperature)
    lse = nd.log(nd.rowsum(nd.exp(logits)))
    pos = nd.scale(nd.rowsum(nd.mul(q, k)), 1.0 / temperature)
    return nd.mean(nd.sub(lse, pos))


def ema_update(model: SiameseModel, tau: float | None = None) -> None:
    """``target <- tau * target + (1 - tau) * online encoder``; the predictor has no target copy."""
    tau = model.ema_tau if tau is None else tau
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for k, t in model.target.items():
        t.data = tau * t.data + (1.0 - tau) * model.encoder[k].data


def contrastive_loss(model: SiameseModel, v1: np.ndarray, v2: np.ndarray, opt: OptimConfig) -> Tensor:
    def one_side(a, b):
        y_o = model.forward_online(a)
        y_t = model.forward_target(b)
        if opt.loss == "infonce":
            return infonce_batch(y_o, y_t, opt.temperature)
        return byol_loss(y_o, y_t)

    loss = one_side(v1, v2)
    if opt.symmetrize:
        loss = nd.add(loss, one_side(v2, v1))
    return loss


def train_step(
    model: SiameseModel,
    batch,
    pipeline: AugmentationPipeline,
    rng: np.random.Generator,
    opt: OptimConfig,
) -> float:
    """One SGD step of the online network on ``batch`` followed by one EMA update."""
    pixels = batch if isinstance(batch, np.ndarray) else np.stack([s.pixels for s in batch])
    if pixels.ndim == 3:
        pixels = pixels[None]
    if pixels.shape[0] == 0:
        raise ValueError("train_step needs a nonempty batch")
    v1, v2 = strong_views(pixels, pipeline, rng)
    params = model.online_parameters()
    nd.clear_grad(params)
    with Tape() as tape:
        loss = contrastive_loss(model, v1.astype(model.dtype, copy=False), v2.astype(model.dtype, copy=False), opt)
    tape.backward(loss)
    nd.sgd_step(params, opt.lr, opt.weight_decay)
    nd.clear_grad(params)
    ema_update(model)
    return loss.item()


def _check_names_shapes(tensors: dict, expected: dict) -> None:
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(np.shape(tensors[name])) != tuple(shape):
            raise CheckpointError(f"{name}: shape {list(np.shape(tensors[name]))} != expected {list(shape)}")


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [
            {"name": k, "dtype": str(v.dtype), "shape": list(v.shape), "values": np.asarray(v).ravel().tolist()}
            for k, v in tensors.items()
        ],
    }
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_checkpoint(path, expected: dict[str, tuple] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; with ``expected`` (name -> shape) reject any mismatch."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    tensors = {}
    for entry in payload["tensors"]:
        values = np.asarray(entry["values"], dtype=entry.get("dtype", "float64"))
        if values.size != int(np.prod(entry["shape"])):
            raise CheckpointError(f"{entry['name']}: {values.size} values do not fill shape {entry['shape']}")
        tensors[entry["name"]] = values.reshape(entry["shape"])
    if expected is not None:
        _check_names_shapes(tensors, expected)
    return tensors, payload.get("meta", {})
