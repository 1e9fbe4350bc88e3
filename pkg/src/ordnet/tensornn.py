"""Small float64 tensor library with tape-based reverse-mode differentiation.

Operations executed inside ``with Tape() as tape:`` are recorded in creation
order, so walking the record backwards is a valid reverse topological order.
Parameters live in a :class:`ParamStore`, keyed by slash-separated paths and
created lazily on first use (Glorot-uniform weights, zero biases).
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFinite, NotScalar, ShapeMismatch

_active_tapes: list["Tape"] = []
_corrupt = {"on": False}


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Records operations while active. Nested tapes all record."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False


def _record(out: Tensor, inputs: tuple, backward: Callable) -> Tensor:
    if _active_tapes and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(out, inputs, backward)
        for tape in _active_tapes:
            tape.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(
        Tensor(a.data + b.data),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(
        Tensor(a.data - b.data),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(
        Tensor(a.data * b.data),
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _record(
        Tensor(out),
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(Tensor(y), (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(Tensor(y), (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(Tensor(np.where(mask, x.data, 0.0)), (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(Tensor(y), (x,), lambda g: (g * s,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(Tensor(y), (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _record(Tensor(np.log(x.data)), (x,), lambda g: (g / x.data,))


def abs_(x: Tensor) -> Tensor:
    return _record(Tensor(np.abs(x.data)), (x,), lambda g: (g * np.sign(x.data),))


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "softplus": softplus, "identity": lambda x: x}


# --- structural -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ b.data.T if b.data.ndim == 2 else np.multiply.outer(g, b.data)
        if a.data.ndim == 1:
            gb = np.multiply.outer(a.data, g) if b.data.ndim == 2 else g * a.data
        else:
            gb = a.data.T @ g
        if _corrupt["on"]:
            gb = gb * 1.1
        return ga, gb

    return _record(Tensor(a.data @ b.data), (a, b), back)


def transpose(x: Tensor) -> Tensor:
    return _record(Tensor(x.data.T), (x,), lambda g: (g.T,))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {e}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record(Tensor(out), tuple(xs), lambda g: tuple(np.split(g, sizes, axis=axis)))


def take(x: Tensor, index) -> Tensor:
    """Rows of ``x`` (first axis) at ``index``; repeated indices accumulate gradient."""
    idx = np.asarray(index, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(Tensor(x.data[idx]), (x,), back)


def segment_sum(x: Tensor, segments, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` buckets; row i goes to bucket ``segments[i]``."""
    seg = np.asarray(segments, dtype=np.int64)
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    return _record(Tensor(out), (x,), lambda g: (g[seg],))


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(Tensor(x.data.sum(axis=axis)), (x,), back)


def mean(x: Tensor) -> Tensor:
    return reduce_sum(x) * (1.0 / x.data.size)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(Tensor(x.data.reshape(shape)), (x,), lambda g: (g.reshape(old),))


# --- parameters ---------------------------------------------------------------


class ParamStore:
    """Named parameters plus gradients and Adam moments."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def get(self, name: str, shape: tuple, init: str = "glorot") -> Tensor:
        p = self.params.get(name)
        if p is not None:
            if p.shape != tuple(shape):
                raise ShapeMismatch(f"parameter {name} has shape {p.shape}, requested {tuple(shape)}")
            return p
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "glorot":
            fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-limit, limit, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(data, requires_grad=True)
        self.params[name] = p
        return p

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if name in self.params:
            if self.params[name].shape != value.shape:
                raise ShapeMismatch(f"parameter {name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name].data = value.copy()
        else:
            self.params[name] = Tensor(value.copy(), requires_grad=True)

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.set(k, v)

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def to_json(self, meta: dict | None = None) -> dict:
        return {
            "meta": dict(meta or {}, seed=self.seed),
            "params": {k: [list(p.shape), p.data.ravel().tolist()] for k, p in sorted(self.params.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ParamStore":
        store = cls(obj.get("meta", {}).get("seed", 0))
        for k, (shape, vals) in obj["params"].items():
            store.set(k, np.asarray(vals, dtype=np.float64).reshape(shape))
        return store

    def save(self, path, meta: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(meta), fh)

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def backward(tape: Tape, loss: Tensor, params: ParamStore | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) into ``params.grads`` (zeros for unreachable ones)."""
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if isinstance(inp, Tensor) and inp.requires_grad:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    if params is None:
        return {}
    for name, p in params.params.items():
        g = grads.get(id(p))
        acc = params.grads.get(name)
        if acc is None or acc.shape != p.shape:
            acc = np.zeros_like(p.data)
        params.grads[name] = acc + g if g is not None else acc
    return params.grads


def input_grads(tape: Tape, loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients with respect to arbitrary leaf tensors (created with requires_grad)."""
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if isinstance(inp, Tensor) and inp.requires_grad:
                grads[id(inp)] = grads.get(id(inp), 0) + gi
    return [np.broadcast_to(grads.get(id(x), np.zeros_like(x.data)), x.shape).copy() for x in inputs]


def adam_step(
    params: ParamStore,
    grads: dict[str, np.ndarray] | None = None,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    grads = params.grads if grads is None else grads
    params.step += 1
    t = params.step
    for name, p in params.params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = params.m.get(name, np.zeros_like(g))
        v = params.v.get(name, np.zeros_like(g))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        params.m[name], params.v[name] = m, v
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


# --- layers -----------------------------------------------------------------


def linear(params: ParamStore, name: str, x: Tensor, out_features: int, bias: bool = True) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape [in] or [N, in]; W is [out, in]."""
    x = as_tensor(x)
    w = params.get(f"{name}/W", (out_features, x.shape[-1]))
    if w.shape[1] != x.shape[-1]:
        raise ShapeMismatch(f"{name}: input width {x.shape[-1]} != {w.shape[1]}")
    y = matmul(x, transpose(w))
    if bias:
        y = add(y, params.get(f"{name}/b", (out_features,), init="zeros"))
    return y


def mlp(
    params: ParamStore,
    name: str,
    layer_sizes: Sequence[int],
    x: Tensor,
    activation: str = "relu",
) -> Tensor:
    """Stack of linear layers with ``activation`` between them; the last is linear."""
    if not layer_sizes:
        raise ShapeMismatch(f"{name}: layer_sizes must be nonempty")
    act = ACTIVATIONS[activation]
    for i, width in enumerate(layer_sizes):
        x = linear(params, f"{name}/{i}", x, width)
        if i < len(layer_sizes) - 1:
            x = act(x)
    return x


def gru_step(params: ParamStore, name: str, x: Tensor, h: Tensor) -> Tensor:
    """One gated-recurrent update of hidden state ``h`` given input ``x``."""
    x, h = as_tensor(x), as_tensor(h)
    hid = h.shape[-1]
    if x.data.ndim != h.data.ndim or (x.data.ndim == 2 and x.shape[0] != h.shape[0]):
        raise ShapeMismatch(f"{name}: input {x.shape} and state {h.shape} disagree")

    def gate(g, hh):
        return add(linear(params, f"{name}/W{g}", x, hid, bias=False), linear(params, f"{name}/U{g}", hh, hid))

    z = sigmoid(gate("z", h))
    r = sigmoid(gate("r", h))
    cand = tanh(gate("h", mul(r, h)))
    return add(mul(sub(1.0, z), h), mul(z, cand))


def gru_sequence(params: ParamStore, name: str, xs: Sequence[Tensor], h: Tensor) -> list[Tensor]:
    states = []
    for x in xs:
        h = gru_step(params, name, x, h)
        states.append(h)
    return states


# --- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_coords: int
    passed: bool
    tol: float
    worst: tuple = ()
    per_param: dict = field(default_factory=dict)


REL_ERR_FLOOR = 1e-6


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_ERR_FLOOR)


def grad_check(
    model_fn: Callable[[ParamStore, object], Tensor],
    params: ParamStore,
    inputs=None,
    tol: float = 1e-4,
    max_coords: int = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients with central differences on sampled coordinates."""
    with Tape() as tape:
        loss = model_fn(params, inputs)
    if not np.isfinite(loss.data).all():
        raise NonFinite("model output is not finite")
    params.zero_grad()
    backward(tape, loss, params)
    analytic = {k: g.copy() for k, g in params.grads.items()}
    coords = [(k, i) for k in sorted(params.params) for i in range(params.params[k].data.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst, worst_at, per_param = 0.0, (), {}
    for name, i in coords:
        flat = params.params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = float(model_fn(params, inputs).data)
        flat[i] = orig - h
        down = float(model_fn(params, inputs).data)
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NonFinite(f"non-finite loss while perturbing {name}[{i}]")
        numeric = (up - down) / (2 * h)
        err = rel_err(float(analytic[name].reshape(-1)[i]), numeric)
        per_param[name] = max(per_param.get(name, 0.0), err)
        if err > worst:
            worst, worst_at = err, (name, i)
    return GradCheckReport(worst, len(coords), worst <= tol, tol, worst_at, per_param)


@contextlib.contextmanager
def corrupted_backward():
    """Test hook: perturb matmul gradients so gradient checks must fail."""
    _corrupt["on"] = True
    try:
        yield
    finally:
        _corrupt["on"] = False
