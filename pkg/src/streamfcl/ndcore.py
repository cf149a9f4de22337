"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape nothing is recorded, which
is how inference-only paths (target network, scoring, probing) stay cheap and
gradient-free.

Example:
    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> x = Tensor([[3.0], [4.0]])
    >>> with Tape() as tape:
    ...     y = sum_all(matmul(w, x))
    >>> tape.backward(y)
    >>> w.grad.tolist()
    [[3.0, 4.0]]
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class NotBackpropagatedError(RuntimeError):
    pass


class Tensor:
    """A dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations for one forward pass.

    The tape is thread-local while active and single-use: ``backward`` may be
    called once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._used = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            raise TapeError("tape stack corrupted: exiting a tape that is not innermost")

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self._used:
            raise TapeError("cannot record on a tape that has already been backpropagated")
        self._records.append((out, inputs, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Propagate ``d loss`` back through the recorded operations.

        Gradients accumulate into ``.grad`` of leaf tensors with
        ``requires_grad``; intermediate gradients live only inside this call.
        """
        if self._used:
            raise TapeError("tape is single-use: backward already invoked")
        self._used = True
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss or explicit seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        if loss.is_leaf and loss.requires_grad:
            _accumulate(loss, grads[id(loss)])
        for out, inputs, rule in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = rule(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate(inp, gi)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        self._records.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.is_leaf = False
        tape.record(out, inputs, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: a constant copy sharing no tape history."""
    return Tensor(x.data, requires_grad=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.broadcast_to(np.asarray(b, dtype=a.dtype), a.shape))
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericalError("exp overflowed to a non-finite value")
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive entry")
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def rowsum(a: Tensor) -> Tensor:
    """Sum over the last axis of a 2-D tensor, giving shape (rows,)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"rowsum expects a 2-D tensor, got {list(a.shape)}")
    return _emit(a.data.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], a.shape[1], axis=1),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b`` along the last axis of ``x`` (features, or channels in channels-last maps)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {list(b.shape)} does not match the last axis of {list(x.shape)}")
    axes = tuple(range(x.data.ndim - 1))
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape 1-D tensors as rows of a 2-D tensor."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    data = np.stack([t.data for t in tensors])
    return _emit(data, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_rows of an empty sequence")
    cols = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != cols:
            raise ShapeError(f"concat_rows: trailing shapes differ {list(cols)} vs {list(t.shape[1:])}")
    bounds = np.cumsum([t.shape[0] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=0)
    return _emit(data, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=0)))


def l2_normalize(v: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    v = _as_tensor(v)
    if v.data.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize expects 1-D or 2-D input, got {list(v.shape)}")
    norms = np.sqrt(np.sum(v.data * v.data, axis=-1, keepdims=True))
    if np.any(norms < eps):
        raise DegenerateVectorError(f"cannot normalize a vector with norm below {eps:g}")
    y = v.data / norms

    def backward(g):
        return ((g - y * np.sum(y * g, axis=-1, keepdims=True)) / norms,)

    return _emit(y, (v,), backward)


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    b, h, w, c = x.shape
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    out[:, pad:pad + h, pad:pad + w] = x
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation in channels-last layout.

    ``x`` is ``[B, H, W, C]`` and ``w`` is ``[kh, kw, C, O]``; the result is
    ``[B, Ho, Wo, O]`` with zero padding ``pad`` and step ``stride``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {list(x.shape)} incompatible with kernel {list(w.shape)}")
    b, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = _pad_hw(x.data, pad)
    cols = np.concatenate(
        [xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for i in range(kh) for j in range(kw)],
        axis=3,
    ).reshape(b * ho * wo, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, o)
    out = (cols @ wmat).reshape(b, ho, wo, o)

    def backward(g):
        grows = g.reshape(b * ho * wo, o)
        gw = (cols.T @ grows).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = (grows @ wmat.T).reshape(b, ho, wo, kh, kw, c)
            gpad = np.zeros((b, h + 2 * pad, wd + 2 * pad, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = gpad[:, pad:pad + h, pad:pad + wd, :] if pad else gpad
        return gx, gw

    return _emit(out, (x, w), backward)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def clear_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """In-place ``p <- p - lr * grad - lr * weight_decay * p`` for every parameter."""
    if lr < 0 or weight_decay < 0:
        raise ValueError("lr and weight_decay must be nonnegative")
    params = list(params)
    for p in params:
        if p.grad is None:
            label = p.name or repr(p)
            raise NotBackpropagatedError(f"parameter {label} has no gradient; run backward first")
    for p in params:
        p.data -= lr * p.grad + (lr * weight_decay) * p.data
