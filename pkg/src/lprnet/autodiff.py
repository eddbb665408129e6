"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the network needs are provided.  Binary elementwise ops
broadcast numpy-style (used for bias vectors and batch dimensions); gradients
are summed back to each operand's shape.  Every forward result is checked for
NaN/Inf and a :class:`NumericalFault` names the op that produced it.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    IntegrityError,
    InvalidArgumentError,
    NumericalFault,
    ShapeError,
    UnsupportedVersionError,
)

DEFAULT_DTYPE = np.float32
_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference) in the current thread."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Callable | None = None

    shape = property(lambda self: self.data.shape)
    dtype = property(lambda self: self.data.dtype)
    ndim = property(lambda self: self.data.ndim)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalFault(op)
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    th = np.tanh(c * (x + k * x * x * x))
    half = x.dtype.type(0.5)

    def back(g):
        d = half * (1 + th) + half * x * (1 - th * th) * c * (1 + 3 * k * x * x)
        return (g * d,)

    return _make(half * x * (1 + th), (a,), back, "gelu")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), back, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


# ---------------------------------------------------------------- normalizing ops

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def layernorm(a: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Zero mean, unit variance along ``axis`` (no affine part; see LayerNorm)."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + x.dtype.type(eps))
    y = xc * inv

    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (a,), back, "layernorm")


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), back, "sum")


def mean_pool(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]
    inv = a.dtype.type(1.0 / count)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis)), (a,), back, "mean_pool")


def max_pool(a: Tensor, axis: int) -> Tensor:
    """Max over a set axis; the gradient goes to the first maximizer."""
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), back, "max_pool")


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """``take`` along ``axis``; repeated indices accumulate their gradients."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, list(range(axis, axis + idx.ndim)),
                                          list(range(idx.ndim))))
        return (full,)

    return _make(np.take(a.data, idx, axis=axis), (a,), back, "gather")


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = pg.astype(p.dtype, copy=False)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- optimizer

def cosine_lr(step: int, total_steps: int, base_lr: float, floor: float = 1e-6) -> float:
    """``base_lr * (1 + cos(pi * step / total)) / 2``, never below ``floor``."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return max(floor, 0.5 * base_lr * (1.0 + math.cos(math.pi * frac)))


@dataclass
class AdamW:
    """Decoupled weight decay Adam, operating in place on parameter tensors."""

    params: dict[str, Tensor]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step_count: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.exp_avg.setdefault(name, np.zeros_like(p.data))
            self.exp_avg_sq.setdefault(name, np.zeros_like(p.data))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"adamw: grad shape {g.shape} vs param shape {p.shape} for {name}")
            m, v = self.exp_avg[name], self.exp_avg_sq[name]
            dt = p.data.dtype.type
            p.data *= dt(1.0 - lr * self.weight_decay)
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * g * g
            denom = np.sqrt(v / dt(bc2)) + dt(self.eps)
            p.data -= dt(lr / bc1) * m / denom

    def state_records(self) -> dict[str, np.ndarray]:
        rec = {"__optim__/step": np.array([self.step_count], dtype=np.int64)}
        for name in self.params:
            rec[f"__optim__/m/{name}"] = self.exp_avg[name]
            rec[f"__optim__/v/{name}"] = self.exp_avg_sq[name]
        return rec

    def load_state_records(self, rec: dict[str, np.ndarray]) -> None:
        self.step_count = int(rec["__optim__/step"][0])
        for name in self.params:
            self.exp_avg[name] = rec[f"__optim__/m/{name}"].copy()
            self.exp_avg_sq[name] = rec[f"__optim__/v/{name}"].copy()


# ---------------------------------------------------------------- checkpoint format
#
# b"LPRN", u32 version, then records until EOF:
#   u32 name_len, name (utf-8), u8 dtype code, u32 rank, u64 dims[rank], payload (LE)

MAGIC = b"LPRN"
FORMAT_VERSION = 1
_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1", 4: "<i4"}
_CODE_OF = {np.dtype(v).str: k for k, v in _DTYPE_CODES.items()}


def encode_records(records: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        code = _CODE_OF.get(le.dtype.str)
        if code is None:
            raise InvalidArgumentError(f"record {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BI", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(le).tobytes())
    return b"".join(out)


def decode_records(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise UnsupportedVersionError("not an LPRN checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    pos, records = 8, {}
    while pos < len(blob):
        name = f"#{len(records)}"
        try:
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + nlen > len(blob):
                raise struct.error("name")
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BI", blob, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
        except (struct.error, UnicodeDecodeError):
            raise IntegrityError(f"truncated or corrupt header in record {name!r}", name) from None
        if code not in _DTYPE_CODES:
            raise IntegrityError(f"record {name!r}: unknown dtype code {code}", name)
        dtype = np.dtype(_DTYPE_CODES[code])
        nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise IntegrityError(f"record {name!r}: payload truncated", name)
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
        records[name] = arr.reshape(dims).astype(dtype.newbyteorder("="))
        pos += nbytes
    return records


def write_checkpoint(path, records: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_records(records))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_records(fh.read())


def text_record(obj) -> np.ndarray:
    """JSON-serialize ``obj`` into a uint8 record payload."""
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def read_text_record(arr: np.ndarray):
    return json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
