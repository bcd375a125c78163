"""Reverse-mode differentiation over dense numpy arrays.

Ops record themselves on the active :class:`Tape`. With no tape active they
run as plain numpy and keep nothing alive, which is how inference runs.
Only the operations the caption model needs are provided.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


_local = threading.local()
_config = {"dtype": np.float32, "debug": False}


def default_dtype():
    return _config["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors and parameters are created in."""
    prev = _config["dtype"]
    _config["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _config["dtype"] = prev


def set_debug(flag: bool) -> None:
    """When on, every recorded op checks its output for NaN/Inf."""
    _config["debug"] = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or _config["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self._op = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only division by a constant is supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


class Parameter(Tensor):
    """A named, trainable leaf. ``decay`` marks whether L2 weight loss applies."""

    __slots__ = ("name", "decay")

    def __init__(self, name: str, data, decay: bool = True):
        super().__init__(np.array(data, dtype=_config["dtype"]), requires_grad=True)
        self.name = name
        self.decay = decay
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParameterSet:
    """Ordered, name-unique collection of parameters."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, p: Parameter) -> Parameter:
        if p.name in self._params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for p in self:
            p.zero_grad()

    def num_elements(self) -> int:
        return sum(p.size for p in self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in self._params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


class Tape:
    """Records ops issued inside ``with Tape() as tape:`` for one backward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self.stochastic = False
        self._outputs: set[int] = set()

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out: Tensor, parents: tuple, backward: Callable) -> None:
        self.nodes.append((out, parents, backward))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if not self.nodes:
            raise StateError("backward() called before any forward op was recorded")
        if loss.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise StateError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._op is None:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                    p.grad += pg
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, e.g. for evaluation inside a training loop."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _config["dtype"]
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    out._op = op
    if _config["debug"] and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, "mul", (a, b), backward)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., i) and a 2-D ``b`` of shape (i, j)."""
    a, b = _lift(a), _lift(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T, "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(y, "reshape", (a,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat(axis={axis}): incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(y, "concat", tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"stack: incompatible shapes {shapes}") from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(y, "stack", tuple(tensors), backward)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not sum to {a.shape[axis]} along axis {axis}")
    out = []
    start = 0
    for n in sizes:
        out.append(_slice(a, axis, start, start + n))
        start += n
    return out


def _slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index], "slice", (a,), backward)


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """``exp(x / temperature)`` normalised along ``axis``."""
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)) / temperature,)

    return _make(y, "softmax", (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, "log_softmax", (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``.

    ``gain``/``bias`` broadcast against the trailing dims of ``x``; a (heads, d)
    gain on an (..., heads, d) input gives per-head affine parameters.
    """
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd, bd = gain.data, bias.data
    try:
        y = xhat * gd + bd
    except ValueError:
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not fit {x.shape}") from None

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return (
            gx,
            _unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None,
            _unbroadcast(g, bd.shape) if bias.requires_grad else None,
        )

    return _make(y, "layer_norm", (x, gain, bias), backward)


# ---------------------------------------------------------------- stochastic / indexing


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not train or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    tape = current_tape()
    if tape is not None:
        tape.stochastic = True
    return _make(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


def embedding_lookup(matrix: Tensor, ids) -> Tensor:
    """Columns of an (m, V) embedding matrix for integer ``ids``: output ``ids.shape + (m,)``."""
    ids = np.asarray(ids)
    V = matrix.shape[1]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding_lookup: id out of range [0, {V})")
    table = matrix.data.T

    def backward(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt.T,)

    return _make(table[ids], "embedding", (matrix,), backward)


def gather_last(x: Tensor, ids) -> Tensor:
    """``x[..., ids[...]]``: pick one entry of the last axis per leading position."""
    ids = np.asarray(ids)[..., None]
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, ids, g[..., None], axis=-1)
        return (full,)

    return _make(np.take_along_axis(x.data, ids, axis=-1)[..., 0], "gather", (x,), backward)


# ---------------------------------------------------------------- gradient checking


def grad_check(
    model_fn: Callable[[], Tensor],
    params: ParameterSet | Sequence[Parameter],
    eps: float = 1e-5,
    max_per_tensor: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    Tensors with more than ``max_per_tensor`` elements are checked on a random
    subset of that many elements.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise StateError(f"grad_check needs 64-bit parameters; {p.name} is {p.data.dtype}")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = model_fn()
    if tape.stochastic:
        raise StateError("grad_check rejected: dropout is active, disable it for a deterministic loss")
    tape.backward(loss)

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        if flat.size > max_per_tensor:
            idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
        else:
            idx = np.arange(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(model_fn().data)
            flat[i] = orig - eps
            fm = float(model_fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(analytic[i])
            if not (np.isfinite(num) and np.isfinite(a)):
                raise NumericError(f"non-finite gradient for {p.name}[{i}]")
            worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst


# ---------------------------------------------------------------- rng


class Rng:
    """Seedable generator that splits deterministically by integer keys.

    ``Rng(7).split(epoch, batch)`` always yields the same stream, independent
    of how much any other split has been consumed.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(k) for k in path)

    def split(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.path + keys)

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=self.path))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


# ---------------------------------------------------------------- initialisation


def xavier_init(shape, rng: np.random.Generator, dtype=None) -> np.ndarray:
    """Glorot-uniform sample in +-sqrt(6 / (fan_in + fan_out)).

    For a (out, in) matrix fan_out = shape[0], fan_in = shape[1]; higher ranks
    use the product of the trailing dims as fan_in. Vectors use their length
    for both.
    """
    shape = tuple(shape)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype or _config["dtype"])


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "permute", (a,), lambda g: (np.transpose(g, inverse),))
