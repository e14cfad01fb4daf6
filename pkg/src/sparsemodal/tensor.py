"""Dense float64 tensors with reverse-mode differentiation on a recorded tape.

Every value is a numpy float64 array wrapped in a :class:`Tensor`.  Operations
build a define-by-run graph; calling ``backward()`` on a scalar result walks
the tape in reverse topological order and accumulates gradients into every
tensor created with ``requires_grad=True``.  The graph is ordinary Python
object references, so it is freed as soon as the result goes out of scope.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "Adam",
    "ShapeMismatch",
    "NumericFailure",
    "GradCheckReport",
    "tensor",
    "affine",
    "matmul",
    "conv2d",
    "maxpool2",
    "relu",
    "tanh",
    "pointwise",
    "softmax",
    "layer_norm",
    "embedding",
    "take_rows",
    "concat",
    "weighted_bce_with_logits",
    "grad_check",
    "fan_in_uniform",
    "save_tensors",
    "load_tensors",
]


class ShapeMismatch(ValueError):
    """Raised when operand extents are inconsistent; message names the dims."""


class NumericFailure(RuntimeError):
    """Raised when a computation produces non-finite values."""


class Tensor:
    """A float64 array plus optional tape bookkeeping.

    ``data`` is treated as immutable once the tensor participates in a
    computation; trainable leaves are re-bound (``t.data = new_array``) by the
    optimizer rather than mutated in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericFailure(f"non-finite values in tensor (op={op})")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode sweep seeding d(self)/d(self) = 1 (scalar outputs)."""
        if self.data.size != 1:
            raise ShapeMismatch(
                f"backward() needs a scalar, got shape {self.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        out = _node(self.data + other.data, (self, other), "add")

        def bwd(g):
            _accum(self, _unbroadcast(g, self.shape))
            _accum(other, _unbroadcast(g, other.shape))

        return _finish(out, bwd)

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,), "neg")

        def bwd(g):
            _accum(self, -g)

        return _finish(out, bwd)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _node(self.data * other.data, (self, other), "mul")

        def bwd(g):
            _accum(self, _unbroadcast(g * other.data, self.shape))
            _accum(other, _unbroadcast(g * self.data, other.shape))

        return _finish(out, bwd)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float):
        return self * (1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops -----------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        out = _node(self.data.reshape(shape), (self,), "reshape")

        def bwd(g):
            _accum(self, g.reshape(src))

        return _finish(out, bwd)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = _node(np.transpose(self.data, axes), (self,), "transpose")

        def bwd(g):
            _accum(self, np.transpose(g, inv))

        return _finish(out, bwd)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        src = self.shape
        ax = _norm_axes(axes, self.data.ndim)
        out = _node(self.data.sum(axis=ax, keepdims=keepdims), (self,), "sum")

        def bwd(g):
            gg = g
            if not keepdims and ax is not None:
                gg = np.expand_dims(g, ax)
            _accum(self, np.broadcast_to(gg, src).copy())

        return _finish(out, bwd)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        ax = _norm_axes(axes, self.data.ndim)
        if ax is None:
            n = self.data.size
        else:
            n = int(np.prod([self.shape[a] for a in ax]))
        return self.sum(axes=axes, keepdims=keepdims) / n


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# ----------------------------------------------------------------------
# tape plumbing
# ----------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.op = op
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    out.requires_grad = bool(tracked)
    out._parents = tracked
    out._backward = None
    return out


def _finish(out: Tensor, bwd: Callable[[np.ndarray], None]) -> Tensor:
    if out.requires_grad:
        out._backward = bwd
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _norm_axes(axes, ndim: int):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def first_nonfinite(root: Tensor) -> str | None:
    """Name of the earliest op in the tape that produced non-finite values."""
    for node in _toposort(root):
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None


# ----------------------------------------------------------------------
# operations
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, supporting equal stacked leading dims (np.matmul rules)."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(np.matmul(a.data, b.data), (a, b), "matmul")

    def bwd(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _finish(out, bwd)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ weight.T + bias over the trailing axis of ``x``.

    ``weight`` is (out, in); ``bias`` is (out,).
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    n_out, n_in = weight.shape
    if x.shape[-1] != n_in:
        raise ShapeMismatch(
            f"affine: x trailing extent in={x.shape[-1]} does not match "
            f"weight in={n_in} (weight is out={n_out} by in={n_in})"
        )
    if bias.shape != (n_out,):
        raise ShapeMismatch(
            f"affine: bias extent {bias.shape} does not match out={n_out}"
        )
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, n_in)
    out = _node((x2 @ weight.data.T + bias.data).reshape(*lead, n_out),
                (x, weight, bias), "affine")

    def bwd(g):
        g2 = g.reshape(-1, n_out)
        _accum(x, (g2 @ weight.data).reshape(x.shape))
        _accum(weight, g2.T @ x2)
        _accum(bias, g2.sum(axis=0))

    return _finish(out, bwd)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, pad: int | None = None,
           ledger=None, layer: str = "conv2d") -> Tensor:
    """Dense 2-D cross-correlation with zero padding.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``kernel`` is
    (C_out, C_in, z, z) with odd z; ``pad`` defaults to (z-1)//2 (same-size
    output).  When a ledger is given, records z^2 * C_in * C_out
    multiply-accumulates per output location under ``layer``.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n_out, n_in, z, z2 = kernel.shape
    if z != z2 or z % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernel must be odd and square, got {z}x{z2}")
    if xd.shape[1] != n_in:
        raise ShapeMismatch(
            f"conv2d: input channels C_in={xd.shape[1]} do not match "
            f"kernel C_in={n_in}"
        )
    if pad is None:
        pad = (z - 1) // 2
    b, _, h, w = xd.shape
    ho, wo = h + 2 * pad - z + 1, w + 2 * pad - z + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"conv2d: output extent {ho}x{wo} is empty")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # im2col: one GEMM instead of per-tap products
    windows = np.lib.stride_tricks.sliding_window_view(xp, (z, z), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo,
                                                       n_in * z * z)
    kmat = kernel.data.reshape(n_out, n_in * z * z)
    out = (cols @ kmat.T + bias.data).reshape(b, ho, wo, n_out)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if ledger is not None:
        ledger.add(layer, dense=z * z * n_in * n_out * b * ho * wo,
                   executed=z * z * n_in * n_out * b * ho * wo)
    node = _node(out[0] if squeeze else out, (x, kernel, bias), "conv2d")

    def bwd(g):
        gd = g[None] if squeeze else g
        g2 = gd.transpose(0, 2, 3, 1).reshape(b * ho * wo, n_out)
        _accum(kernel, (g2.T @ cols).reshape(kernel.data.shape))
        _accum(bias, g2.sum(axis=0))
        dwin = (g2 @ kmat).reshape(b, ho, wo, n_in, z, z)
        dwin = dwin.transpose(4, 5, 0, 3, 1, 2)  # (z, z, b, c, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(z):
            for j in range(z):
                dxp[:, :, i:i + ho, j:j + wo] += dwin[i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        _accum(x, dx[0] if squeeze else dx)

    return _finish(node, bwd)


def maxpool2(x: Tensor) -> Tensor:
    """Dense 2x2 stride-2 max pool; odd extents are padded high with -inf."""
    x = _as_tensor(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    b, c, h, w = xd.shape
    hp, wp = (h + 1) // 2 * 2, (w + 1) // 2 * 2
    xpad = np.full((b, c, hp, wp), -np.inf)
    xpad[:, :, :h, :w] = xd
    windows = xpad.reshape(b, c, hp // 2, 2, wp // 2, 2)
    flat = windows.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hp // 2, wp // 2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    node = _node(out[0] if squeeze else out, (x,), "maxpool2")

    def bwd(g):
        gd = g[None] if squeeze else g
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], gd[..., None], axis=-1)
        dpad = dflat.reshape(b, c, hp // 2, wp // 2, 2, 2).transpose(
            0, 1, 2, 4, 3, 5).reshape(b, c, hp, wp)
        dx = dpad[:, :, :h, :w]
        _accum(x, dx[0] if squeeze else dx)

    return _finish(node, bwd)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = _node(np.where(mask, x.data, 0.0), (x,), "relu")

    def bwd(g):
        _accum(x, g * mask)

    return _finish(out, bwd)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    out = _node(y, (x,), "tanh")

    def bwd(g):
        _accum(x, g * (1.0 - y * y))

    return _finish(out, bwd)


_POINTWISE = {"tanh": tanh, "relu": relu}


def pointwise(x: Tensor, fn: str) -> Tensor:
    """Elementwise nonlinearity, fn in {"tanh", "relu"}."""
    try:
        return _POINTWISE[fn](x)
    except KeyError:
        raise ValueError(f"pointwise: unknown function {fn!r}") from None


def softmax(x: Tensor, axes, valid: np.ndarray | None = None) -> Tensor:
    """Joint softmax over ``axes``, max-stabilized.

    ``valid`` is an optional boolean array (broadcastable to x) marking
    positions that may receive mass; excluded positions get exactly 0 and pass
    no gradient.  Each slice must contain at least one valid position.
    """
    x = _as_tensor(x)
    ax = _norm_axes(axes, x.data.ndim)
    if not ax:
        raise ValueError("softmax: axes must be a nonempty axis set")
    if valid is None:
        xm = x.data
    else:
        xm = np.where(valid, x.data, -np.inf)
    m = xm.max(axis=ax, keepdims=True)
    e = np.exp(xm - m)
    if valid is not None:
        e = np.where(valid, e, 0.0)
    y = e / e.sum(axis=ax, keepdims=True)
    out = _node(y, (x,), "softmax")

    def bwd(g):
        inner = (g * y).sum(axis=ax, keepdims=True)
        _accum(x, y * (g - inner))

    return _finish(out, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the trailing axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    nrm = (x.data - mu) * inv
    out = _node(nrm * gain.data + bias.data, (x, gain, bias), "layer_norm")

    def bwd(g):
        dn = g * gain.data
        dx = (dn - dn.mean(axis=-1, keepdims=True)
              - nrm * (dn * nrm).mean(axis=-1, keepdims=True)) * inv
        _accum(x, dx)
        red = tuple(range(g.ndim - 1))
        _accum(gain, (g * nrm).sum(axis=red))
        _accum(bias, g.sum(axis=red))

    return _finish(out, bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; gradient scatter-adds back into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    out = _node(table.data[ids], (table,), "embedding")

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _finish(out, bwd) if table.requires_grad else out


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0; indices may repeat."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = _node(x.data[idx], (x,), "take_rows")

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _accum(x, dx)

    return _finish(out, bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out = _node(np.concatenate([p.data for p in parts], axis=axis),
                tuple(parts), "concat")

    def bwd(g):
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            _accum(p, g[tuple(sl)])
            offset += n

    return _finish(out, bwd)


def weighted_bce_with_logits(logits: Tensor, targets: np.ndarray,
                             pos_weight: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from logits with per-class positive weights.

    Per element: pos_weight * y * softplus(-l) + (1 - y) * softplus(l),
    averaged over all elements.  ``pos_weight`` broadcasts over the class
    (trailing) axis.
    """
    logits = _as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    w = np.broadcast_to(np.asarray(pos_weight, dtype=np.float64),
                        logits.shape)
    if y.shape != logits.shape:
        raise ShapeMismatch(
            f"bce: targets shape {y.shape} does not match logits {logits.shape}"
        )
    ld = logits.data
    softplus = np.maximum(ld, 0.0) + np.log1p(np.exp(-np.abs(ld)))  # softplus(l)
    softplus_neg = softplus - ld                                    # softplus(-l)
    per = w * y * softplus_neg + (1.0 - y) * softplus
    n = per.size
    out = _node(per.sum() / n, (logits,), "weighted_bce")

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-ld))
        _accum(logits, g * ((1.0 - y) * sig - w * y * (1.0 - sig)) / n)

    return _finish(out, bwd)


# ----------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------

def fan_in_uniform(shape: Sequence[int], fan_in: int,
                   rng: np.random.Generator) -> np.ndarray:
    """uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) initial weights."""
    bound = (1.0 / fan_in) ** 0.5
    return rng.uniform(-bound, bound, size=tuple(shape))


def _name_rng(seed: int, name: str) -> np.random.Generator:
    # Per-name stream: init order and optional parameter groups never shift it.
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


class ParamStore:
    """Named trainable tensors with per-parameter gradient accumulators."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape: Sequence[int],
            init: str = "zeros", fan_in: int | None = None) -> Tensor:
        """Register a parameter; ``init`` is "zeros", "ones" or "fan_in"."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "fan_in":
            if fan_in is None:
                raise ValueError("fan_in init needs a fan_in value")
            data = fan_in_uniform(shape, fan_in, _name_rng(self.seed, name))
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, op=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def save(self, path) -> None:
        save_tensors(path, {n: t.data for n, t in self.items()})

    def load(self, path) -> None:
        """Load values into existing parameters (shapes must match)."""
        blobs, _ = load_tensors(path)
        for name, t in self.items():
            if name not in blobs:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if blobs[name].shape != t.shape:
                raise ShapeMismatch(
                    f"checkpoint shape {blobs[name].shape} for {name!r} "
                    f"does not match {t.shape}")
            t.data = blobs[name]

    @classmethod
    def from_file(cls, path) -> "ParamStore":
        store = cls()
        blobs, _ = load_tensors(path)
        for name in sorted(blobs):
            t = Tensor(blobs[name], requires_grad=True, op=name)
            store._params[name] = t
        return store


def save_tensors(path, arrays: dict[str, np.ndarray],
                 meta: dict | None = None) -> None:
    """Write named arrays: one JSON header line, then little-endian float64.

    Header maps name -> {shape, offset}; offsets are bytes into the data
    section that follows the newline after the header.  Entries are laid out
    in sorted-name order.
    """
    header: dict = {"tensors": {}, "meta": meta or {}}
    offset = 0
    names = sorted(arrays)
    for name in names:
        arr = arrays[name]
        header["tensors"][name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size * 8
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    data = raw[nl + 1:]
    out: dict[str, np.ndarray] = {}
    for name, rec in header["tensors"].items():
        shape = tuple(rec["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = rec["offset"]
        arr = np.frombuffer(data[start:start + n * 8], dtype="<f8").astype(
            np.float64).reshape(shape)
        out[name] = arr
    return out, header.get("meta", {})


class Adam:
    """Adam with bias correction; state is serializable next to the params."""

    def __init__(self, store: ParamStore, lr: float = 5e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self._v = {n: np.zeros_like(t.data) for n, t in store.items()}

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, t in self.store.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data = t.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def save(self, path) -> None:
        arrays = {f"m/{n}": a for n, a in self._m.items()}
        arrays.update({f"v/{n}": a for n, a in self._v.items()})
        save_tensors(path, arrays, meta={"step": self.step_count,
                                         "lr": self.lr})

    def load(self, path) -> None:
        blobs, meta = load_tensors(path)
        self.step_count = int(meta.get("step", 0))
        for n in self._m:
            self._m[n] = blobs[f"m/{n}"].copy()
            self._v[n] = blobs[f"v/{n}"].copy()


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    max_rel_error: float
    worst_param: str
    checked: int
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(f: Callable[[], Tensor], params: ParamStore,
               eps: float = 1e-5, tol: float = 1e-4,
               entries_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` to central differences.

    For every parameter entry (or a seeded sample of ``entries_per_param`` per
    parameter), evaluates (f(t+eps) - f(t-eps)) / (2 eps) and reports the
    relative error |a - n| / max(1, |a|, |n|).  A non-finite evaluation is a
    reported failure, never a silent pass.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must be in [1e-6, 1e-4], got {eps}")
    if rng is None:
        rng = np.random.default_rng(0)
    failures: list[str] = []
    params.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        return GradCheckReport(np.inf, "<forward>", 0, ["non-finite objective"])
    out.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in params.items()}

    max_err, worst, checked = 0.0, "", 0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if entries_per_param is not None and n > entries_per_param:
            idxs = rng.choice(n, size=entries_per_param, replace=False)
        else:
            idxs = np.arange(n)
        ana = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                failures.append(f"{name}[{i}]: non-finite probe")
                continue
            num = (hi - lo) / (2.0 * eps)
            rel = abs(ana[i] - num) / max(1.0, abs(ana[i]), abs(num))
            checked += 1
            if rel > max_err:
                max_err, worst = rel, f"{name}[{i}]"
            if rel > tol:
                failures.append(
                    f"{name}[{i}]: analytic {ana[i]:.6g} vs numeric {num:.6g}")
    return GradCheckReport(max_err, worst, checked, failures)
