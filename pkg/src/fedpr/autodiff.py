"""Dense float64 tensors with reverse-mode autodiff and momentum SGD.

Every higher layer builds on this module.  Values live in C-contiguous
(row-major) float64 buffers; gradients are accumulated in float64 as well.
Each operation records its parents and a vector-Jacobian product so that
:func:`backward` can sweep the graph in reverse topological order.

All operations are deterministic: identical inputs produce bitwise
identical outputs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, OptimizerError, RankError, ShapeError

Array = np.ndarray


class Tensor:
    """N-dimensional float64 array with optional gradient tracking.

    ``grad`` is populated only on leaf tensors (those created directly
    rather than by an operation) and accumulates across calls to
    :func:`backward`; it is cleared by :func:`sgd_step` or
    :func:`zero_grads`, never by ``backward`` itself.
    """

    __slots__ = ("data", "grad", "track_grad", "_parents", "_vjp")

    def __init__(self, data, track_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor values must be finite")
        self.data = arr
        self.grad: Array | None = None
        self.track_grad = bool(track_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, track_grad={self.track_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return multiply(self, other)


def _result(data: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Build an op result wired into the graph when any parent tracks grads."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.track_grad for p in parents):
        out.track_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.track_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("subtract", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("multiply", a, b)
    ad, bd = a.data, b.data
    need_a, need_b = a.track_grad, b.track_grad
    return _result(
        ad * bd,
        (a, b),
        lambda g: (g * bd if need_a else None, g * ad if need_b else None),
    )


def divide(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("divide", a, b)
    out = a.data / b.data
    bd = b.data
    need_a, need_b = a.track_grad, b.track_grad
    return _result(
        out,
        (a, b),
        lambda g: (g / bd if need_a else None, -g * out / bd if need_b else None),
    )


def sqrt(t: Tensor) -> Tensor:
    if np.any(t.data < 0.0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(t.data)
    return _result(out, (t,), lambda g: (g * (0.5 / out),))


def scale(t: Tensor, factor: float) -> Tensor:
    f = float(factor)
    return _result(t.data * f, (t,), lambda g: (g * f,))


def add_scalar(t: Tensor, value: float) -> Tensor:
    return _result(t.data + float(value), (t,), lambda g: (g,))


def relu(t: Tensor) -> Tensor:
    data = t.data
    return _result(np.maximum(data, 0.0), (t,), lambda g: (g * (data > 0.0),))


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = t.data.shape
    try:
        out = np.reshape(t.data, shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _result(np.ascontiguousarray(out), (t,), lambda g: (np.reshape(g, old),))


def detach(t: Tensor) -> Tensor:
    """Copy of ``t`` cut out of the autodiff graph."""
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.grad = None
    out.track_grad = False
    out._parents = ()
    out._vjp = None
    return out


# ---------------------------------------------------------------------------
# reductions and structural ops


def mean_all(t: Tensor) -> Tensor:
    n = t.data.size
    out = np.asarray(np.mean(t.data))
    shape = t.data.shape
    return _result(out, (t,), lambda g: (np.full(shape, float(g) / n),))


def global_average_pool(t: Tensor) -> Tensor:
    """Spatial mean of a (B, C, H, W) map; result has shape (B, C)."""
    if t.data.ndim != 4:
        raise ShapeError(f"global_average_pool: expected 4-d input, got {t.data.shape}")
    b, c, h, w = t.data.shape
    if h * w == 0:
        raise ShapeError(f"global_average_pool: empty spatial extent in {t.data.shape}")
    out = t.data.mean(axis=(2, 3))

    def vjp(g: Array):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)),)

    return _result(out, (t,), vjp)


def broadcast_channels(t: Tensor, spatial: tuple[int, int]) -> Tensor:
    """Expand per-channel values (B, C) to a constant (B, C, H, W) map."""
    if t.data.ndim != 2:
        raise ShapeError(f"broadcast_channels: expected 2-d input, got {t.data.shape}")
    h, w = spatial
    b, c = t.data.shape
    # Read-only broadcast view; every consumer only reads its inputs.
    out = np.broadcast_to(t.data[:, :, None, None], (b, c, h, w))
    return _result(out, (t,), lambda g: (g.sum(axis=(2, 3)),))


def gather_rows(t: Tensor, index: Array) -> Tensor:
    """Pick one column per row: out[i] = t[i, index[i]]."""
    if t.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-d input, got {t.data.shape}")
    b, n = t.data.shape
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (b,) or idx.min(initial=0) < 0 or idx.max(initial=-1) >= n:
        raise ShapeError(f"gather_rows: bad index for shape {t.data.shape}")
    rows = np.arange(b)
    out = t.data[rows, idx]

    def vjp(g: Array):
        dz = np.zeros((b, n))
        dz[rows, idx] = g
        return (dz,)

    return _result(out, (t,), vjp)


def permute_rows(t: Tensor, index: Array) -> Tensor:
    """Reorder the leading axis by a permutation; out[i] = t[index[i]]."""
    idx = np.asarray(index, dtype=np.int64)
    b = t.data.shape[0]
    if sorted(idx.tolist()) != list(range(b)):
        raise ShapeError(f"permute_rows: index is not a permutation of [0, {b})")
    out = t.data[idx]

    def vjp(g: Array):
        dz = np.empty_like(t.data)
        dz[idx] = g
        return (dz,)

    return _result(out, (t,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and network layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    ad, bd = a.data, b.data
    need_a, need_b = a.track_grad, b.track_grad
    return _result(
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T if need_a else None, ad.T @ g if need_b else None),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight + bias for x:(B,F), weight:(F,N), bias:(N,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(f"linear: shapes {x.data.shape} and {weight.data.shape} do not conform")
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.data.shape} does not match {weight.data.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data
    needs = (x.track_grad, weight.track_grad, bias.track_grad)

    def vjp(g: Array):
        return (
            g @ wd.T if needs[0] else None,
            xd.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return _result(out, (x, weight, bias), vjp)


_COL_INDEX_CACHE: dict[tuple[int, int, int, int, int], Array] = {}


def _col_index(c_in: int, h: int, w: int, kh: int, kw: int) -> Array:
    """Gather indices turning a padded (C, Hp, Wp) buffer into im2col rows."""
    key = (c_in, h, w, kh, kw)
    idx = _COL_INDEX_CACHE.get(key)
    if idx is None:
        wp = w + 2 * (kw // 2)
        hp = h + 2 * (kh // 2)
        pos = (np.repeat(np.arange(h), w) * wp + np.tile(np.arange(w), h)).astype(np.intp)
        within = (
            np.arange(c_in)[:, None, None] * (hp * wp)
            + np.arange(kh)[None, :, None] * wp
            + np.arange(kw)[None, None, :]
        ).reshape(-1)
        idx = pos[:, None] + within[None, :]
        _COL_INDEX_CACHE[key] = idx
    return idx


def _conv_same(x: Array, w: Array) -> tuple[Array, Array]:
    """Stride-1 zero-padded correlation preserving H and W; returns (out, patches)."""
    b, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    # np.take keeps the gather C-contiguous; fancy indexing here would not.
    patches = np.take(xp.reshape(b, -1), _col_index(c_in, h, wd, kh, kw), axis=1)
    out = patches.reshape(b * h * wd, -1) @ w.reshape(c_out, -1).T
    return np.ascontiguousarray(out.reshape(b, h, wd, c_out).transpose(0, 3, 1, 2)), patches


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2-d convolution, stride 1, zero padding preserving the spatial size.

    Kernel sides must be odd so that same-padding is exact.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-d input and kernel, got {x.data.shape} and {weight.data.shape}"
        )
    c_out, c_in, kh, kw = weight.data.shape
    if x.data.shape[1] != c_in:
        raise ShapeError(f"conv2d: shapes {x.data.shape} and {weight.data.shape} do not conform")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sides must be odd, got {weight.data.shape}")
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} does not match {weight.data.shape}")

    out, patches = _conv_same(x.data, weight.data)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    b, _, h, wd = x.data.shape
    need_x, need_w = x.track_grad, weight.track_grad

    def vjp(g: Array):
        d_weight = None
        if need_w:
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * h * wd, c_out)
            d_weight = (gmat.T @ patches.reshape(b * h * wd, -1)).reshape(weight.data.shape)
        d_x = None
        if need_x:
            # dX is the correlation of g with the flipped, axis-swapped kernel.
            w_flip = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            d_x, _ = _conv_same(np.ascontiguousarray(g), w_flip)
        if bias is not None:
            return d_x, d_weight, g.sum(axis=(0, 2, 3)) if bias.track_grad else None
        return d_x, d_weight

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, vjp)


def log_softmax(t: Tensor) -> Tensor:
    """Row-wise log-softmax of a (B, N) matrix."""
    if t.data.ndim != 2:
        raise ShapeError(f"log_softmax: expected 2-d input, got {t.data.shape}")
    shifted = t.data - t.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def vjp(g: Array):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _result(out, (t,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable tracked leaf.

    Repeated calls add up; gradients are only cleared by :func:`sgd_step`
    or :func:`zero_grads`.
    """
    if loss.data.size != 1:
        raise RankError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.track_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.track_grad and id(parent) not in visited:
                stack.append((parent, False))

    adjoint: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.track_grad:
                continue
            cur = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if cur is None else cur + pg


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamTensor:
    """Named trainable tensor with a momentum buffer.

    The gradient buffer starts at zero so parameters untouched by a
    backward pass step as if their gradient were zero.
    """

    __slots__ = ("name", "value", "velocity")

    def __init__(self, name: str, value: Tensor):
        value.track_grad = True
        if value.grad is None:
            value.grad = np.zeros_like(value.data)
        self.name = name
        self.value = value
        self.velocity = np.zeros_like(value.data)

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


def sgd_step(params: Iterable[ParamTensor], lr: float, momentum: float) -> None:
    """v <- momentum*v + grad; value <- value - lr*v; then clear grads.

    ``lr == 0`` is allowed and leaves values bitwise unchanged (used to
    freeze training while still exercising the round plumbing).
    """
    if lr < 0.0:
        raise OptimizerError(f"learning rate must be >= 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise OptimizerError(f"momentum must lie in [0, 1), got {momentum}")
    for p in params:
        g = p.value.grad
        if g is None:
            raise OptimizerError(f"parameter {p.name!r} has no gradient")
        p.velocity *= momentum
        p.velocity += g
        p.value.data -= lr * p.velocity
        g[...] = 0.0


def zero_grads(params: Iterable[ParamTensor]) -> None:
    for p in params:
        if p.value.grad is None:
            p.value.grad = np.zeros_like(p.value.data)
        else:
            p.value.grad[...] = 0.0


def parameters_as_arrays(params: Sequence[ParamTensor]) -> dict[str, Array]:
    """Copy parameter values into a plain name -> array mapping."""
    return {p.name: p.value.data.copy() for p in params}
