"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays; every differentiable operation records a backward
closure on the tensors it produces.  ``Tensor.backward`` replays those
closures in reverse topological order.  Training runs in float32; gradient
checking builds float64 graphs (see ``grad_check``).

All sequence operations accept an optional leading batch dimension: a
"vector" argument may be shaped ``(n,)`` or ``(B, n)``, an ``L x C`` matrix
may be ``(L, C)`` or ``(B, L, C)``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, DomainError, GeometryError, NumericError

DEFAULT_DTYPE = np.float32
WIDE_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        data = np.asarray(data)
        if dtype is not None:
            if data.dtype != dtype:
                data = data.astype(dtype)
        elif not np.issubdtype(data.dtype, np.floating):
            data = data.astype(DEFAULT_DTYPE)
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- graph bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate gradients of ``self`` into every reachable leaf."""
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        _accumulate(self, grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_lift(other, self.dtype))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), -self)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _topo_order(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    if not (t.requires_grad or t._parents):
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)  # copy: g may alias another buffer
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- pointwise and structural ops -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # exp overflow for very negative inputs yields inf and a correct 0.0
    with np.errstate(over="ignore"):
        data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(data, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _make(data, tuple(tensors), backward)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward)


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Repeat each row of axis 0 ``n`` times consecutively."""
    data = np.repeat(a.data, n, axis=0)

    def backward(g):
        _accumulate(a, g.reshape((a.data.shape[0], n) + a.data.shape[1:]).sum(axis=1))

    return _make(data, (a,), backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``; gradient adds in place into ``a.grad``."""
    data = a.data[..., start:stop]

    def backward(g):
        if not (a.requires_grad or a._parents):
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[..., start:stop] += g

    return _make(data, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(x: Tensor, W: Tensor) -> Tensor:
    """``x[..., Din] @ W[Din, Dout]``."""
    if W.data.ndim != 2 or x.data.shape[-1] != W.data.shape[0]:
        raise DimensionError(f"matmul: shapes {x.shape} and {W.shape} do not conform")
    din, dout = W.data.shape
    # collapse leading axes so BLAS sees one large gemm instead of a batch loop
    x2 = np.ascontiguousarray(x.data).reshape(-1, din)
    data = (x2 @ W.data).reshape(x.data.shape[:-1] + (dout,))

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, dout)
        if x.requires_grad or x._parents:
            _accumulate(x, (g2 @ W.data.T).reshape(x.data.shape))
        if W.requires_grad or W._parents:
            _accumulate(W, x2.T @ g2)

    return _make(data, (x, W), backward)


def affine(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W (+ b)`` with shape validation naming both operands."""
    y = matmul(x, W)
    if b is not None:
        if b.data.shape != (W.data.shape[1],):
            raise DimensionError(f"affine: bias shape {b.shape} does not match output width {W.data.shape[1]}")
        y = add(y, b)
    return y


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of ``table[V, E]`` selected by integer ``ids``."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(g):
        if not (table.requires_grad or table._parents):
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))

    return _make(data, (table,), backward)


def select_index(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick ``x[..., idx]`` along the last axis, one index per leading row."""
    idx = np.asarray(idx)
    if x.data.ndim == 1:
        data = x.data[idx]

        def backward(g):
            gx = np.zeros_like(x.data)
            gx[idx] = g
            _accumulate(x, gx)

    else:
        rows = np.arange(x.data.shape[0])
        data = x.data[rows, idx]

        def backward(g):
            gx = np.zeros_like(x.data)
            gx[rows, idx] = g
            _accumulate(x, gx)

    return _make(data, (x,), backward)


# -- reductions with stability ----------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0 or x.data.shape[axis] == 0:
        raise GeometryError(f"softmax: empty axis {axis} for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - dot) * data)

    return _make(data, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0 or x.data.shape[axis] == 0:
        raise GeometryError(f"logsumexp: empty axis {axis} for shape {x.shape}")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def backward(g):
        _accumulate(x, np.expand_dims(g, axis) * soft)

    return _make(data, (x,), backward)


# -- temporal ops -------------------------------------------------------------


def _check_seq(x: Tensor, name: str):
    if x.data.ndim not in (2, 3):
        raise DimensionError(f"{name}: expected (L, C) or (B, L, C), got {x.shape}")


def conv1d_temporal(x: Tensor, K: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """1-d convolution over the temporal axis with zero padding on both edges.

    ``x``: (..., L, Cin), ``K``: (k, Cin, Cout) -> (..., L', Cout) with
    ``L' = (L + 2 pad - k) // stride + 1``.
    """
    _check_seq(x, "conv1d_temporal")
    if K.data.ndim != 3:
        raise DimensionError(f"conv1d_temporal: kernel must be (k, Cin, Cout), got {K.shape}")
    k, cin, cout = K.data.shape
    if x.data.shape[-1] != cin:
        raise DimensionError(f"conv1d_temporal: input channels {x.shape} vs kernel {K.shape}")
    L = x.data.shape[-2]
    lout = (L + 2 * pad - k) // stride + 1
    if L + 2 * pad < k or lout < 1:
        raise GeometryError(f"conv1d_temporal: L={L}, pad={pad}, k={k}, stride={stride} gives empty output")

    pad_spec = [(0, 0)] * x.data.ndim
    pad_spec[-2] = (pad, pad)
    xp = np.pad(x.data, pad_spec) if pad else x.data
    span = stride * (lout - 1) + 1
    # im2col: gather the k taps into one contiguous block, then a single gemm
    cols = np.empty(xp.shape[:-2] + (lout, k * cin), dtype=xp.dtype)
    for r in range(k):
        cols[..., r * cin : (r + 1) * cin] = xp[..., r : r + span : stride, :]
    cols2 = cols.reshape(-1, k * cin)
    k2 = K.data.reshape(k * cin, cout)
    data = (cols2 @ k2).reshape(xp.shape[:-2] + (lout, cout))

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, cout)
        if K.requires_grad or K._parents:
            _accumulate(K, (cols2.T @ g2).reshape(k, cin, cout))
        if x.requires_grad or x._parents:
            gcols = (g2 @ k2.T).reshape(cols.shape)
            gxp = np.zeros_like(xp)
            for r in range(k):
                gxp[..., r : r + span : stride, :] += gcols[..., r * cin : (r + 1) * cin]
            if pad:
                gxp = gxp[..., pad : pad + L, :]
            _accumulate(x, gxp)

    return _make(data, (x, K), backward)


def deconv1d_temporal(x: Tensor, K: Tensor, target_len: int) -> Tensor:
    """Stride-2 transposed convolution over time, right-trimmed to ``target_len``.

    Scatter form of the adjoint of ``conv1d_temporal(stride=2)``:
    ``y[2i + r] += x[i] @ K[r]``.  ``target_len`` must be ``2L - 1`` or ``2L``.
    """
    _check_seq(x, "deconv1d_temporal")
    if K.data.ndim != 3:
        raise DimensionError(f"deconv1d_temporal: kernel must be (k, Cin, Cout), got {K.shape}")
    k, cin, cout = K.data.shape
    if x.data.shape[-1] != cin:
        raise DimensionError(f"deconv1d_temporal: input channels {x.shape} vs kernel {K.shape}")
    L = x.data.shape[-2]
    raw_len = (L - 1) * 2 + k
    if target_len not in (2 * L - 1, 2 * L) or target_len > raw_len:
        raise GeometryError(
            f"deconv1d_temporal: target_len={target_len} not reachable from L={L}, k={k} (admissible {2*L-1} or {2*L}, raw {raw_len})"
        )
    shape = x.data.shape[:-2] + (raw_len, cout)
    x2 = np.ascontiguousarray(x.data).reshape(-1, cin)
    kt = K.data.transpose(1, 0, 2).reshape(cin, k * cout)
    # one gemm produces every tap's contribution; scatter-add into the output
    taps = (x2 @ kt).reshape(x.data.shape[:-1] + (k, cout))
    data = np.zeros(shape, dtype=x.data.dtype)
    for r in range(k):
        data[..., r : r + 2 * L : 2, :] += taps[..., r, :]
    data = data[..., :target_len, :].copy()

    def backward(g):
        g_raw = np.zeros(shape, dtype=g.dtype)
        g_raw[..., :target_len, :] = g
        g_taps = np.empty(x.data.shape[:-1] + (k, cout), dtype=g.dtype)
        for r in range(k):
            g_taps[..., r, :] = g_raw[..., r : r + 2 * L : 2, :]
        g2 = g_taps.reshape(-1, k * cout)
        if x.requires_grad or x._parents:
            _accumulate(x, (g2 @ kt.T).reshape(x.data.shape))
        if K.requires_grad or K._parents:
            _accumulate(K, (x2.T @ g2).reshape(cin, k, cout).transpose(1, 0, 2))

    return _make(data, (x, K), backward)


def maxpool1d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Temporal max pooling; odd tails pool a single element.

    Gradient routes to the argmax; ties break to the earliest index.
    """
    _check_seq(x, "maxpool1d")
    if window != 2 or stride != 2:
        raise GeometryError("maxpool1d: only window=2, stride=2 is supported")
    L, C = x.data.shape[-2], x.data.shape[-1]
    lout = (L + 1) // 2
    if L % 2:
        pad_spec = [(0, 0)] * x.data.ndim
        pad_spec[-2] = (0, 1)
        xp = np.pad(x.data, pad_spec, constant_values=-np.inf)
    else:
        xp = x.data
    xr = xp.reshape(xp.shape[:-2] + (lout, 2, C))
    idx = xr.argmax(axis=-2)
    data = np.take_along_axis(xr, idx[..., None, :], axis=-2).squeeze(-2)

    def backward(g):
        gp = np.zeros_like(xr)
        np.put_along_axis(gp, idx[..., None, :], g[..., None, :], axis=-2)
        gp = gp.reshape(xp.shape)[..., :L, :]
        _accumulate(x, gp)

    return _make(data, (x,), backward)


# -- parameters ----------------------------------------------------------------


class ParameterStore:
    """Named, ordered collection of learnable tensors.

    Insertion order is the canonical order for optimizer updates and
    checkpoint layout; it must be deterministic for a given model config.
    """

    def __init__(self, seed: int = 0, dtype=DEFAULT_DTYPE):
        self._params: dict[str, Tensor] = {}
        self.dtype = dtype
        self._rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))

    def add(self, name: str, shape, init: str = "auto") -> Tensor:
        if name in self._params:
            raise DomainError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "zeros" or (init == "auto" and len(shape) < 2):
            data = np.zeros(shape, dtype=self.dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            fan_out = shape[-1] if len(shape) == 2 else shape[0] * shape[-1]
            s = np.sqrt(6.0 / (fan_in + fan_out))
            data = self._rng.uniform(-s, s, size=shape).astype(self.dtype)
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return list(self._params.items())

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def load_values(self, values: dict[str, np.ndarray]):
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise DomainError(f"parameter name mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, t in self._params.items():
            v = np.asarray(values[name])
            if v.shape != t.data.shape:
                raise DimensionError(f"parameter {name!r}: stored shape {v.shape} vs expected {t.data.shape}")
            t.data = v.astype(t.data.dtype)


# -- verification ---------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    tensors: Iterable[Tensor],
    eps: float = 1e-4,
    max_coords: int = 10,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` must be a deterministic scalar-valued function of the given
    tensors (re-evaluated several times).  Relative error per coordinate is
    ``|analytic - fd| / max(1, |analytic|, |fd|)``.  Works best on float64
    tensors.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    loss = f()
    if loss.data.size != 1:
        raise DomainError(f"grad_check: f must be scalar-valued, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: f evaluated to a non-finite value")
    loss.backward()
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))

    def eval_scalar() -> float:
        with no_grad():
            v = f()
        val = float(v.data)
        if not np.isfinite(val):
            raise NumericError("grad_check: f evaluated to a non-finite value")
        return val

    worst = 0.0
    for t in tensors:
        n = t.data.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = eval_scalar()
            flat[c] = orig - eps
            f_minus = eval_scalar()
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = float(aflat[c])
            rel = abs(a - fd) / max(1.0, abs(a), abs(fd))
            worst = max(worst, rel)
    return worst
