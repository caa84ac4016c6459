"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient. Outside a tape every op is a plain numpy call, so
inference pays no bookkeeping cost.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)[x].data
    array([2., 4.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DegenerateVectorError, DimensionError, NumericalDomainError

_state = threading.local()

_SIGMOID_CLAMP = 700.0
_GELU_C = np.sqrt(2.0 / np.pi)


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus the bookkeeping needed for differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise DimensionError("tensors must have at least one element")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable operations for one training step.

    Use as a context manager; nested tapes are allowed and only the
    innermost one records. Call :meth:`reset` (or open a new tape) between
    steps, graphs are never retained across steps.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def reset(self) -> None:
        self.nodes.clear()

    def record(self, out: Tensor, parents, backward) -> None:
        node = _Node(out, tuple(parents), backward)
        out._node = node
        out.requires_grad = True
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> "GradientMap":
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._node is None:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if loss._node is None and loss.requires_grad:
            leaves[id(loss)] = loss
        return GradientMap({k: (leaves[k], grads[k]) for k in leaves if k in grads})


class GradientMap(Mapping):
    """Leaf tensor -> gradient. Leaves that were never reached map to zeros."""

    def __init__(self, entries: dict[int, tuple[Tensor, np.ndarray]]):
        self._entries = entries

    def __getitem__(self, leaf: Tensor) -> Tensor:
        hit = self._entries.get(id(leaf))
        if hit is None:
            return Tensor(np.zeros_like(leaf.data))
        return Tensor(hit[1])

    def __contains__(self, leaf) -> bool:
        return isinstance(leaf, Tensor) and id(leaf) in self._entries

    def __iter__(self):
        return (t for t, _ in self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def array(self, leaf: Tensor) -> np.ndarray:
        hit = self._entries.get(id(leaf))
        return np.zeros_like(leaf.data) if hit is None else hit[1]

    def __add__(self, other: "GradientMap") -> "GradientMap":
        merged = dict(self._entries)
        for key, (leaf, g) in other._entries.items():
            if key in merged:
                merged[key] = (leaf, merged[key][1] + g)
            else:
                merged[key] = (leaf, g)
        return GradientMap(merged)


def backward(loss: Tensor) -> GradientMap:
    """Differentiate ``loss`` using the tape that recorded it."""
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward() called outside a Tape context")
    return tape.backward(loss)


def _make(data: np.ndarray, parents: Iterable[Tensor], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out._node = None
    parents = tuple(parents)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericalDomainError("log of a non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    z = np.clip(a.data, -_SIGMOID_CLAMP, _SIGMOID_CLAMP)
    out = 1.0 / (1.0 + np.exp(-z))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (odd part is exactly the identity)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), grad)


# ------------------------------------------------------------------ reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), grad)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------------- structure


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swap_last(a: Tensor) -> Tensor:
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, index) -> Tensor:
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _make(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


# --------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules.

    1-D operands are promoted the way ``np.matmul`` promotes them.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[0 if bd.ndim == 1 else -2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def grad(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if ad.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if bd.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), grad)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T (+ bias)`` with weight stored as [out, in]."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {xd.shape} vs weight {wd.shape}")
    out = xd @ wd.T

    def grad(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        return gx, gw

    y = _make(out, (x, weight), grad)
    return y if bias is None else add(y, bias)


# ------------------------------------------------------------- normalizations


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def grad(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), grad)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def grad(g):
        n = xd.shape[-1]
        gxhat = g * gd
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        ggamma = (flat_g * xhat.reshape(-1, n)).sum(0)
        gbeta = flat_g.sum(0)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), grad)


# ----------------------------------------------------------- lookups & losses


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]

    def grad(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ContractError(f"embedding id out of range [0, {vocab})")
    return _make(table.data[ids], (table,), grad)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over rows.

    ``logits`` is [..., V]; ``targets`` has the leading shape. Rows with zero
    weight do not contribute; the mean divides by the total weight.
    """
    ld = logits.data
    V = ld.shape[-1]
    flat = ld.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ContractError(f"{t.shape[0]} targets for {flat.shape[0]} logit rows")
    w = np.ones(t.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy needs at least one weighted row")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(t.shape[0])
    nll = lse - z[rows, t]
    out = np.asarray((w * nll).sum() / total)

    def grad(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        p *= (w / total)[:, None] * g
        return (p.reshape(ld.shape),)

    return _make(out, (logits,), grad)


def mean_pool(x: Tensor, mask=None) -> Tensor:
    """Average over the sequence axis (-2), optionally restricted by a 0/1 mask."""
    if mask is None:
        return mean(x, axis=-2)
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("mean_pool mask selects no positions")
    weights = Tensor((m / counts)[..., None])
    return sum_(mul(x, weights), axis=-2)


def cosine_similarity(u: Tensor, v: Tensor, eps: float = 0.0) -> Tensor:
    """Cosine similarity along the last axis."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u.data, axis=-1)
    nv = np.linalg.norm(v.data, axis=-1)
    if np.any(nu <= eps) or np.any(nv <= eps):
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    dot = sum_(mul(u, v), axis=-1)
    norms = mul(sqrt(sum_(mul(u, u), axis=-1)), sqrt(sum_(mul(v, v), axis=-1)))
    return mul(dot, reciprocal(norms))


# ----------------------------------------------------------------- grad check


@dataclass
class CheckReport:
    errors: dict[str, float]
    tol: float
    worst: str | None = None
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if e > self.tol]


def grad_check(
    scalar_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    analytic: Mapping[str, np.ndarray] | None = None,
    floor: float = 1e-6,
) -> CheckReport:
    """Compare tape gradients with central differences.

    The error for a parameter is ``max|g_tape - g_fd| / max(|g_tape|, |g_fd|, floor)``
    over the checked coordinates. ``max_coords`` samples that many coordinates
    per parameter (all of them when None). ``analytic`` replaces the tape
    gradient, which lets callers audit an externally computed gradient.
    """
    if analytic is None:
        with Tape() as tape:
            loss = scalar_fn()
            if not np.isfinite(loss.data).all():
                raise NumericalDomainError("scalar_fn returned a non-finite value")
            gmap = tape.backward(loss)
        analytic = {name: gmap.array(p) for name, p in params.items()}

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    checked: dict[str, int] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or max_coords >= n else rng.choice(n, max_coords, replace=False)
        ga = np.asarray(analytic[name]).reshape(-1)[coords]
        gn = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            fp = scalar_fn().item()
            flat[c] = orig - h
            fm = scalar_fn().item()
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalDomainError(f"non-finite function value while perturbing {name}")
            gn[j] = (fp - fm) / (2 * h)
        denom = max(np.abs(ga).max(), np.abs(gn).max(), floor)
        errors[name] = float(np.abs(ga - gn).max() / denom)
        checked[name] = len(coords)
    report = CheckReport(errors=errors, tol=tol, checked=checked)
    if errors:
        report.worst = max(errors, key=errors.get)
    return report
