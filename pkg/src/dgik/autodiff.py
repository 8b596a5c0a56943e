"""Dense float64 arrays with reverse-mode automatic differentiation.

Define-by-run: every operation records its parents and a pullback closure on
the result tensor; `backward` walks the recorded graph once in reverse
topological order. Deliberately desk-scale: no views, no fusion, no GPU.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonScalarLossError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        raise TypeError("expected raw array, got Tensor")
    return np.asarray(x, dtype=float)


def _require_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """Array node. Leaves with requires_grad=True receive `.grad` after backward."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_pullback")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=float)
        _require_finite(self.data, "tensor construction")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._pullback = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _result(data: np.ndarray, op: str, parents, pullback) -> Tensor:
    data = np.asarray(data, dtype=float)
    _require_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out._parents = tuple(parents) if needs else ()
    out._pullback = pullback if needs else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _split(x):
    """(array, tensor-or-None): constants may be plain scalars/arrays."""
    if isinstance(x, Tensor):
        return x.data, x
    return np.asarray(x, dtype=float), None


def _binary(a, b, op_name, fwd, pull_a, pull_b):
    ad, at = _split(a)
    bd, bt = _split(b)
    data = fwd(ad, bd)
    parents = [t for t in (at, bt) if t is not None]
    if not parents:
        return Tensor(data)

    def pullback(g):
        out = []
        if at is not None:
            out.append(_unbroadcast(pull_a(g, ad, bd), ad.shape) if at.requires_grad else None)
        if bt is not None:
            out.append(_unbroadcast(pull_b(g, ad, bd), bd.shape) if bt.requires_grad else None)
        return out

    return _result(data, op_name, parents, pullback)


def add(a, b):
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(a):
    ad, at = _split(a)
    if at is None:
        return Tensor(-ad)
    return _result(-ad, "neg", (at,), lambda g: [-g if at.requires_grad else None])


def matmul(a, b):
    ad, at = _split(a)
    bd, bt = _split(b)
    if ad.ndim != 2 or bd.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    data = ad @ bd
    parents = [t for t in (at, bt) if t is not None]
    if not parents:
        return Tensor(data)

    def pullback(g):
        out = []
        if at is not None:
            out.append(g @ bd.T if at.requires_grad else None)
        if bt is not None:
            out.append(ad.T @ g if bt.requires_grad else None)
        return out

    return _result(data, "matmul", parents, pullback)


def _unary(a, op_name, fwd, pull):
    ad, at = _split(a)
    data = fwd(ad)
    if at is None:
        return Tensor(data)
    return _result(data, op_name, (at,),
                   lambda g: [pull(g, ad, data) if at.requires_grad else None])


def square(a):
    return _unary(a, "square", np.square, lambda g, x, y: 2.0 * x * g)


def sqrt(a):
    ad, _ = _split(a)
    if (ad <= 0).any():
        raise ValueError("sqrt requires strictly positive inputs")
    return _unary(a, "sqrt", np.sqrt, lambda g, x, y: g / (2.0 * y))


def exp(a):
    return _unary(a, "exp", np.exp, lambda g, x, y: g * y)


def log(a):
    ad, _ = _split(a)
    if (ad <= 0).any():
        raise ValueError("log requires strictly positive inputs")
    return _unary(a, "log", np.log, lambda g, x, y: g / x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a):
    def fwd(x):
        return x * _sigmoid(x)

    def pull(g, x, y):
        s = _sigmoid(x)
        return g * (s + x * s * (1.0 - s))

    return _unary(a, "silu", fwd, pull)


def softplus(a):
    def fwd(x):
        return np.logaddexp(0.0, x)

    def pull(g, x, y):
        return g * _sigmoid(x)

    return _unary(a, "softplus", fwd, pull)


def softmax(a):
    """Softmax over the last axis."""

    def fwd(x):
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=-1, keepdims=True)

    def pull(g, x, y):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _unary(a, "softmax", fwd, pull)


def tsum(a, axis=None, keepdims: bool = False):
    ad, at = _split(a)
    data = ad.sum(axis=axis, keepdims=keepdims)
    if at is None:
        return Tensor(data)

    def pull(g):
        if not at.requires_grad:
            return [None]
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return [np.broadcast_to(gg, ad.shape).copy() if axis is not None or keepdims
                else np.full(ad.shape, gg)]

    return _result(np.asarray(data), "sum", (at,), pull)


def tmean(a, axis=None, keepdims: bool = False):
    ad, _ = _split(a)
    count = ad.size if axis is None else ad.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    ad, at = _split(a)
    data = ad.reshape(shape)
    if at is None:
        return Tensor(data)
    return _result(data, "reshape", (at,),
                   lambda g: [g.reshape(ad.shape) if at.requires_grad else None])


def broadcast_to(a, shape):
    ad, at = _split(a)
    data = np.broadcast_to(ad, shape).copy()
    if at is None:
        return Tensor(data)
    return _result(data, "broadcast", (at,),
                   lambda g: [_unbroadcast(g, ad.shape) if at.requires_grad else None])


def concat(tensors, axis: int = -1):
    datas, ts = zip(*(_split(t) for t in tensors))
    data = np.concatenate(datas, axis=axis)
    parents = [t for t in ts if t is not None]
    if not parents:
        return Tensor(data)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def pullback(g):
        pieces = np.split(g, splits, axis=axis)
        out = []
        for piece, t in zip(pieces, ts):
            if t is not None:
                out.append(piece if t.requires_grad else None)
        return out

    return _result(data, "concat", parents, pullback)


def gather_rows(a, index):
    """Select rows by integer index; duplicate indices accumulate in reverse."""
    ad, at = _split(a)
    index = np.asarray(index, dtype=int)
    data = ad[index]
    if at is None:
        return Tensor(data)

    def pull(g):
        if not at.requires_grad:
            return [None]
        out = np.zeros_like(ad)
        np.add.at(out, index, g)
        return [out]

    return _result(data, "gather_rows", (at,), pull)


def scatter_add_rows(a, index, num_rows: int):
    """Accumulate rows of `a` into `num_rows` output rows by index."""
    ad, at = _split(a)
    index = np.asarray(index, dtype=int)
    data = np.zeros((num_rows,) + ad.shape[1:])
    np.add.at(data, index, ad)
    if at is None:
        return Tensor(data)
    return _result(data, "scatter_add_rows", (at,),
                   lambda g: [g[index] if at.requires_grad else None])


def logsumexp(a, axis: int = -1, keepdims: bool = False):
    """Stable log-sum-exp along `axis` (gradient is exact; the max shift is a
    constant under differentiation)."""
    ad, _ = _split(a)
    m = ad.max(axis=axis, keepdims=True)
    s = tsum(exp(sub(a, m)), axis=axis, keepdims=True)
    out = add(log(s), m)
    if keepdims:
        return out
    return reshape(out, np.squeeze(out.data, axis=axis).shape)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf with
    requires_grad=True. Leaves never touched by the loss keep grad=None;
    parameter stores report those as exact zeros."""
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    state: dict[int, int] = {}  # id -> 0 visiting, 1 done
    stack = [loss]
    while stack:
        node = stack.pop()
        sid = id(node)
        if sid in state:
            if state[sid] == 0:
                state[sid] = 1
                topo.append(node)
            continue
        state[sid] = 0
        stack.append(node)
        for p in node._parents:
            if id(p) not in state and p.requires_grad:
                stack.append(p)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._pullback is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._pullback(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg


# ---------------------------------------------------------------------------
# parameter store and optimizer
# ---------------------------------------------------------------------------

PARAMS_VERSION = "dgik-params-v1"


class ModelParams:
    """Named map from parameter path to leaf Tensor (all requiring grad)."""

    def __init__(self, version: str = PARAMS_VERSION):
        self.version = version
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._store:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=float).copy(), requires_grad=True)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def num_params(self) -> int:
        return sum(t.data.size for t in self._store.values())

    def zero_grads(self) -> None:
        for t in self._store.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter; exact zeros for parameters the loss never
        touched."""
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self._store.items()}

    def copy(self) -> "ModelParams":
        out = ModelParams(self.version)
        for k, t in self._store.items():
            out.add(k, t.data.copy())
        return out


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def fresh(params: ModelParams) -> "AdamState":
        return AdamState(m={k: np.zeros_like(p.data) for k, p in params.items()},
                         v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              state: AdamState | None = None) -> AdamState:
    """Standard Adam update with bias correction; mutates params in place."""
    if state is None:
        state = AdamState.fresh(params)
    b1, b2 = betas
    state.t += 1
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape} "
                             f"for {name!r}")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global norm bound; returns the raw norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"DGIKCKPT"
_CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParams, hyper: dict) -> None:
    """Binary container (name -> shape + raw little-endian float64) plus a
    JSON sidecar with the hyperparameters."""
    meta = {
        "container_version": _CKPT_VERSION,
        "params_version": params.version,
        "hyper": hyper,
        "entries": [{"name": k, "shape": list(t.data.shape)} for k, t in params.items()],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(hyper, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        version, meta_len = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        params = ModelParams(meta["params_version"])
        for entry in meta["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            arr = np.frombuffer(buf, dtype="<f8").astype(float).reshape(shape)
            params.add(entry["name"], arr)
    return params, meta["hyper"]
