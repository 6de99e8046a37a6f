"""Dense tensors with tape-based reverse-mode autodiff.

Values live in numpy arrays; every op records its parents and a closure that
maps the output gradient to parent gradients. ``Tensor.backward`` replays the
recorded graph in reverse topological order.

The op set is deliberately small: it covers exactly what the mask predictor,
the diffusion objectives and the router auxiliary losses need.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float precision (``float32``/``float64``)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; the graph of a deep model can exceed the recursion limit
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _index_add(shape, idx: np.ndarray, g: np.ndarray, dtype) -> np.ndarray:
    """zeros(shape) with g[j] added into row idx[j]; fixed (sorted) summation order."""
    out = np.zeros(shape, dtype=dtype)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    s = idx[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    out[s[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return out


def _flat_add(shape, flat_idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    size = int(np.prod(shape))
    out = np.bincount(flat_idx.reshape(-1), weights=g.reshape(-1), minlength=size)
    return out.astype(g.dtype, copy=False).reshape(shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return _make(x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] = ()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics (leading dims broadcast)."""
    if a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # collapse batch dims into one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), back)


# ---------------------------------------------------------------------------
# normalisation / probability ops
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), back)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    if x.shape[axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    soft = np.exp(x - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out, (a,), back)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to unit root-mean-square, then scale by ``gain``."""
    xd, gd = x.data, gain.data
    if xd.shape[-1] != gd.shape[-1]:
        raise ValueError(f"rms_norm gain size {gd.shape} does not match input {xd.shape}")
    n = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv

    def back(g):
        gx = gg = None
        if gain.requires_grad:
            gg = (g * normed).reshape(-1, n).sum(axis=0).reshape(gd.shape)
        if x.requires_grad:
            gn = g * gd
            gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / n)
        return gx, gg

    return _make(normed * gd, (x, gain), back)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent pairs (x[2j], x[2j+1]) of the last axis by fixed angles.

    ``cos``/``sin`` hold one entry per pair and broadcast against ``x[..., ::2]``.
    """
    xd = x.data
    if xd.shape[-1] % 2:
        raise ValueError("rotary embedding needs an even last dimension")
    c = cos.astype(xd.dtype, copy=False)
    s = sin.astype(xd.dtype, copy=False)

    def rotate(v, sign):
        even, odd = v[..., 0::2], v[..., 1::2]
        out = np.empty(np.broadcast_shapes(v.shape, c.shape[:-1] + (v.shape[-1],)), dtype=v.dtype)
        out[..., 0::2] = even * c - sign * odd * s
        out[..., 1::2] = even * sign * s + odd * c
        return out

    return _make(rotate(xd, 1.0), (x,), lambda g: (rotate(g, -1.0),))


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    w = weight.data

    def back(g):
        return (_index_add(w.shape, ids.reshape(-1), g.reshape(-1, w.shape[1]), w.dtype),)

    return _make(w[ids], (weight,), back)


def take_rows(a: Tensor, rows: np.ndarray, unique: bool = False) -> Tensor:
    """Select rows of a 2-D tensor; repeated indices accumulate in backward.

    ``unique=True`` promises no repeats and skips the accumulation.
    """
    rows = np.asarray(rows)
    shape = a.shape

    def back(g):
        if not unique:
            return (_index_add(shape, rows, g, g.dtype),)
        ga = np.zeros(shape, dtype=g.dtype)
        ga[rows] = g
        return (ga,)

    return _make(a.data[rows], (a,), back)


def scatter_add_rows(base: Tensor, rows: np.ndarray, src: Tensor, unique: bool = False) -> Tensor:
    """Return ``base`` with ``src[j]`` added into row ``rows[j]`` for every j."""
    rows = np.asarray(rows)
    out = base.data.copy()
    if unique:
        out[rows] += src.data
    else:
        out += _index_add(out.shape, rows, src.data, out.dtype)
    return _make(out, (base, src), lambda g: (g, g[rows]))


def take_along(a: Tensor, idx: np.ndarray, axis: int = -1) -> Tensor:
    idx = np.asarray(idx)
    shape = a.shape

    def back(g):
        full_idx = list(np.indices(idx.shape, sparse=True))
        full_idx[axis] = idx
        flat = np.ravel_multi_index(tuple(np.broadcast_arrays(*full_idx)), shape)
        return (_flat_add(shape, flat, g),)

    return _make(np.take_along_axis(a.data, idx, axis=axis), (a,), back)


def gather_elements(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """1-D tensor of ``a[rows[j], cols[j]]``."""
    rows, cols = np.asarray(rows), np.asarray(cols)
    shape = a.shape

    def back(g):
        return (_flat_add(shape, np.ravel_multi_index((rows, cols), shape), g),)

    return _make(a.data[rows, cols], (a,), back)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum over rows of ``-log softmax(logits)[target]`` (scalar)."""
    x = logits.data
    targets = np.asarray(targets)
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise ValueError(f"cross_entropy expects (n, K) logits and (n,) targets, got {x.shape}, {targets.shape}")
    w = np.ones(x.shape[0], dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype)
    rows = np.arange(x.shape[0])
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    nll = (np.log(z) + m)[:, 0] - x[rows, targets]

    def back(g):
        p = e / z
        p[rows, targets] -= 1.0
        return (p * (w * g)[:, None],)

    return _make(np.asarray((w * nll).sum()), (logits,), back)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def check_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in {what}")


class _Straddle(Exception):
    pass


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-5,
    stencil: int = 5,
    piece: Callable[[], object] | None = None,
) -> float:
    """Worst relative error between autodiff and central finite differences.

    ``f`` recomputes a scalar loss from the current values of ``params``. Each
    parameter is perturbed in place, one coordinate at a time. With
    ``max_coords`` set, that many coordinates per parameter are sampled instead
    of sweeping all of them.

    ``stencil`` is 3 (error O(eps^2)) or 5 (error O(eps^4)). The five-point
    rule allows a larger step, which keeps the rounding noise of the loss
    (about ulp(f) / eps) well below the tolerance on near-zero gradients.

    The relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    coordinates whose true gradient is ~0 from dividing rounding noise by zero.

    For piecewise-smooth losses (hard top-k routing), ``piece`` is called after
    every evaluation of ``f`` and returns a comparable label of the active
    piece. A stencil that straddles a piece boundary is retried with the step
    shrunk 10x, at most three times; a coordinate that still straddles is skipped.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
        p.requires_grad = True
    loss = f()
    check_finite(loss, "loss")
    loss.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0

    base_piece = None
    if piece is not None:
        f()
        base_piece = piece()

    def at(flat, i, orig, delta):
        flat[i] = orig + delta
        v = f().item()
        if not math.isfinite(v):
            raise NonFiniteError("non-finite loss during finite differences")
        if piece is not None and piece() != base_piece:
            raise _Straddle
        return v

    def derivative(flat, i, orig, h):
        if stencil == 3:
            return (at(flat, i, orig, h) - at(flat, i, orig, -h)) / (2 * h)
        return (
            -at(flat, i, orig, 2 * h) + 8 * at(flat, i, orig, h)
            - 8 * at(flat, i, orig, -h) + at(flat, i, orig, -2 * h)
        ) / (12 * h)

    with no_grad():
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                numeric = None
                h = eps
                for _ in range(4):
                    try:
                        numeric = derivative(flat, i, orig, h)
                        break
                    except _Straddle:
                        h /= 10
                    finally:
                        flat[i] = orig
                if numeric is None:
                    continue
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
