"""Minimal reverse-mode automatic differentiation over float64 numpy arrays
(extended precision on request, for finite-difference checks).

Graphs are built define-by-run: every differentiable op returns a new
:class:`Tensor` that remembers its parents and a closure mapping the output
gradient to parent gradients. :meth:`Tensor.backward` sweeps the graph in
reverse topological order and accumulates into the ``grad`` of every leaf
that has ``requires_grad=True``.

Implicit broadcasting is limited to scalar-with-tensor; anything else goes
through the explicit :func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DeterminismError, DimensionError, StaleGraphError

_grad_enabled = True
_tape = None
_dtype = np.float64


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def working_precision(dtype):
    """Build every tensor created inside the block with ``dtype`` (e.g. ``np.longdouble``)."""
    global _dtype
    prev = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


def _stale_backward(g):
    raise StaleGraphError("graph already consumed by a previous backward(); run the forward pass again")


class Tensor:
    """n-dimensional float64 array with optional gradient tracking."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- graph -------------------------------------------------------------

    def graph(self):
        """Nodes reachable from this tensor, inputs before the ops that use them."""
        order, seen = [], set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        if self._backward is _stale_backward:
            _stale_backward(None)
        order = self.graph()
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if not node.is_leaf:
                node._backward = _stale_backward

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    out._op = op
    return out


# -- selection freezing ------------------------------------------------------


class _SelectionTape:
    def __init__(self):
        self.items = []
        self.pos = 0
        self.replay = False


def select(compute: Callable[[], np.ndarray]) -> np.ndarray:
    """Evaluate a discrete choice (argmax, peak location), honouring frozen mode.

    While :func:`frozen_selections` records, each choice is stored in call
    order; on replay the stored choice is returned instead of recomputed, so
    finite-difference probes see the same piecewise branch as the analytic
    gradient.
    """
    tape = _tape
    if tape is None:
        return compute()
    if tape.replay:
        value = tape.items[tape.pos]
        tape.pos += 1
        return value
    value = compute()
    tape.items.append(value)
    return value


@contextlib.contextmanager
def frozen_selections(tape=None):
    global _tape
    prev = _tape
    _tape = tape if tape is not None else _SelectionTape()
    try:
        yield _tape
    finally:
        _tape = prev


# -- elementwise -------------------------------------------------------------


def _is_scalar(t: Tensor):
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _unbroadcast(g, t: Tensor):
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def _pair(a, b, opname):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = select(lambda: x.data > 0)
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _result(y, (x,), lambda g: (g / x.data,), "log")


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    y = x.data**p
    return _result(y, (x,), lambda g: (g * p * x.data ** (p - 1.0),), "power")


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    keep = select(lambda: x.data >= floor)
    return _result(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,), "clamp_min")


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "square": square,
    "add": add,
    "mul": mul,
    "sub": sub,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- shape ops ---------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _result(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 dims, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim
    stretched = tuple(i + lead for i, n in enumerate(x.shape) if n == 1 and shape[i + lead] != 1)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if stretched:
            g = g.sum(axis=tuple(a - lead for a in stretched), keepdims=True)
        return (g.reshape(x.shape),)

    return _result(y, (x,), backward, "broadcast_to")


def concat(xs: Sequence[Tensor], axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(y, xs, backward, "concat")


def index(x, key) -> Tensor:
    x = as_tensor(x)
    y = np.array(x.data[key])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _result(y, (x,), backward, "index")


def gather(x, idx: np.ndarray, axis: int) -> Tensor:
    """``out[..., i, ...] = x[..., idx[..., i, ...], ...]`` along ``axis``."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    axis = axis % x.ndim
    y = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        full = list(np.indices(idx.shape, sparse=True))
        full[axis] = idx
        np.add.at(gx, tuple(full), g)
        return (gx,)

    return _result(y, (x,), backward, "gather")


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared across the batch) or carry the same leading
    batch shape as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes differ for {a.shape} and {b.shape}")
    y = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(y, (a, b), backward, "matmul")


def conv2d(x, kernels, bias=None, stride=1, padding=0) -> Tensor:
    """Zero-padded cross-correlation.

    ``x`` is ``Cin×H×W`` or batched ``B×Cin×H×W``; ``kernels`` is
    ``Cout×Cin×k×k``; ``bias`` (optional) has length ``Cout``.
    """
    x, w = as_tensor(x), as_tensor(kernels)
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected input (B,)Cin×H×W and 4-D kernels, got {x.shape}, {w.shape}")
    B, cin, H, W = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin or kh != kw:
        raise DimensionError(f"conv2d: kernels {w.shape} do not fit input {x.shape}")
    k, s, p = kh, stride, padding
    if k > H + 2 * p or k > W + 2 * p:
        raise DimensionError(f"conv2d: kernel {k}×{k} larger than padded input {H + 2 * p}×{W + 2 * p}")
    Ho, Wo = (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, cin * k * k)
    wm = w.data.reshape(cout, cin * k * k)
    y = (cols @ wm.T).reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)
    parents = [x, w]
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")
        y = y + b.data[None, :, None, None]
        parents.append(b)
    y = np.ascontiguousarray(y)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(w.shape)
        gcols = (gm @ wm).reshape(B, Ho, Wo, cin, k, k)
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + H, p : p + W]
        out = [gx, gw]
        if bias is not None:
            out.append(g.sum(axis=(0, 2, 3)))
        return out

    out = _result(y, parents, backward, "conv2d")
    return reshape(out, out.shape[1:]) if single else out


# -- reductions ----------------------------------------------------------------


def _axes(x: Tensor, axis):
    if axis is None:
        return tuple(range(x.ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    try:
        axes = tuple(a % x.ndim if x.ndim else a for a in axes)
    except ZeroDivisionError:
        raise DimensionError("cannot reduce a 0-d tensor along an axis") from None
    for a in axes:
        if not 0 <= a < x.ndim:
            raise DimensionError(f"axis {a} out of range for shape {x.shape}")
        if x.shape[a] == 0:
            raise DimensionError(f"empty reduction axis {a} in shape {x.shape}")
    return axes


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(x, axis)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(y), (x,), backward, "sum")


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(x, axis)
    if x.size == 0:
        raise DimensionError("mean of an empty tensor")
    count = math.prod(x.shape[a] for a in axes)
    return scale(reduce_sum(x, axes, keepdims), 1.0 / count)


def max_with_argmax(x, axis=None):
    """Maximum along ``axis`` (or over everything) and its first row-major index.

    The index is a plain integer array and is not differentiable; the value
    gradient flows only to the selected entry.
    """
    x = as_tensor(x)
    if axis is None:
        flat = reshape(x, (-1,))
        if flat.size == 0:
            raise DimensionError("max of an empty tensor")
        value, idx = max_with_argmax(flat, 0)
        return value, idx
    axis = _axes(x, axis)[0]
    idx = select(lambda: np.argmax(x.data, axis=axis))
    picked = gather(x, np.expand_dims(idx, axis), axis)
    return reshape(picked, idx.shape), idx


def reduce(op: str, x, axis=None):
    if op == "sum":
        return reduce_sum(x, axis)
    if op == "mean":
        return reduce_mean(x, axis)
    if op == "max_with_argmax":
        return max_with_argmax(x, axis)
    raise ContractError(f"unknown reduction {op!r}")


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    axis = _axes(x, axis)[0]
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


# -- validation ----------------------------------------------------------------


def check_finite(t, what="tensor"):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return t


# -- gradient checking -----------------------------------------------------------


NUMERIC_DTYPE = np.longdouble


def _components(value):
    parts = list(value) if isinstance(value, (list, tuple)) else [value]
    for part in parts:
        if part.size != 1:
            raise ContractError(f"grad_check needs scalar outputs, got shape {part.shape}")
    return parts


def _total(parts):
    out = parts[0]
    for part in parts[1:]:
        out = out + part
    return out


def gradient_errors(f: Callable, params, eps=1e-4, max_entries=None, seed=0):
    """Per-parameter worst relative error between analytic and central-difference gradients.

    ``f`` returns a scalar tensor, or a tuple of scalar terms whose sum is the
    function checked; each term is differenced separately, which keeps a large
    term from swamping the probes of parameters it does not depend on.
    ``params`` is a sequence of leaf tensors or a ``{name: tensor}`` mapping.
    Discrete selections made inside ``f`` (argmax, peak location, ReLU branch)
    are frozen at their values from the analytic pass. With ``max_entries``
    set, at most that many randomly chosen entries of each parameter are probed.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    named = dict(params) if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}
    for p in named.values():
        p.grad = None
    with frozen_selections() as tape:
        parts = _components(f())
    base = [t.item() for t in parts]
    loss = _total(parts)
    if loss.requires_grad:
        loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}

    with no_grad(), frozen_selections() as check_tape:
        again = [t.item() for t in _components(f())]
    if again != base or any(not np.array_equal(a, b) for a, b in zip(tape.items, check_tape.items)):
        raise DeterminismError(f"f returned {base!r} then {again!r} for identical parameters")

    tape.replay = True
    rng = np.random.default_rng(seed)

    def probe():
        tape.pos = 0
        return np.array([t.data.reshape(-1)[0] for t in _components(f())], dtype=NUMERIC_DTYPE)

    errors = {}
    saved = {k: p.data for k, p in named.items()}
    try:
        # differences are taken in extended precision so that roundoff in f
        # stays well below the 1e-8 floor of the relative error
        with no_grad(), frozen_selections(tape), working_precision(NUMERIC_DTYPE):
            for p in named.values():
                p.data = p.data.astype(NUMERIC_DTYPE)
            for name, p in named.items():
                flat = p.data.reshape(-1)
                entries = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
                worst = 0.0
                grad = analytic[name].reshape(-1)
                for i in entries:
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = probe()
                    flat[i] = orig - eps
                    down = probe()
                    flat[i] = orig
                    numeric = float(((up - down) / (2 * NUMERIC_DTYPE(eps))).sum())
                    denom = max(abs(grad[i]), abs(numeric), 1e-8)
                    worst = max(worst, abs(grad[i] - numeric) / denom)
                errors[name] = worst
    finally:
        for k, p in named.items():
            p.data = saved[k]
    return errors


def grad_check(f: Callable, params, eps=1e-4, max_entries=None, seed=0) -> float:
    """Worst relative error over every probed parameter entry."""
    errs = gradient_errors(f, params, eps, max_entries, seed)
    return max(errs.values(), default=0.0)


def custom_op(fn_forward: Callable, fn_backward: Callable, *inputs: Tensor, name="custom") -> Tensor:
    """Wrap a numpy forward/backward pair as a graph node.

    ``fn_backward(g, *input_arrays)`` must return one gradient per input.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    arrays = [t.data for t in inputs]
    y = np.asarray(fn_forward(*arrays), dtype=_dtype)
    return _result(y, inputs, lambda g: tuple(fn_backward(g, *arrays)), name)


def parameters_checksum(tensors: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
