"""Dense tensors with reverse-mode differentiation.

Only the operator set the attention network needs is provided. Every op
builds a graph node holding the saved activations for its backward rule;
``Tensor.backward`` walks the graph once in reverse topological order and
sums gradients over all consumers of a tensor.
"""

from __future__ import annotations

import contextlib
import contextvars
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf shows up in a computation."""

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
# when set, piecewise ops append which branch each element took (relu sign, pool argmax)
_branch_log: contextvars.ContextVar[list | None] = contextvars.ContextVar("branch_log", default=None)


@contextlib.contextmanager
def record_branches():
    """Collect the branch pattern of every relu and maxpool evaluated inside."""
    log: list[np.ndarray] = []
    token = _branch_log.set(log)
    try:
        yield log
    finally:
        _branch_log.reset(token)


def _log_branch(pattern: np.ndarray) -> None:
    log = _branch_log.get()
    if log is not None:
        log.append(pattern.copy())


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """N-dimensional real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return add(self, -np.asarray(other))
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate across backward calls
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children (iterative DFS)."""
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


def first_nonfinite(root: Tensor) -> Tensor | None:
    """The earliest node (in evaluation order) whose value is not finite."""
    for node in topological_order(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def check_finite(root: Tensor) -> None:
    if np.all(np.isfinite(root.data)):
        return
    bad = first_nonfinite(root)
    op = bad.op if bad is not None else root.op
    raise NonFiniteError(f"non-finite values first produced by op '{op}'", op=op)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    # constants follow the dtype of the tensor they combine with
    return Tensor(np.asarray(x, dtype=None if like is None else like.dtype))


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    return as_tensor(a, like=b), b


def make_op(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` as the result of ``op``; record the graph edge if needed.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    t = Tensor(out, op=op)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op("add", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op("mul", out, (a, b), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    # keep the gate strictly inside (0, 1) even where exp under/overflows
    info = np.finfo(x.dtype)
    return np.clip(s, info.tiny, 1.0 - info.epsneg)


ACTIVATIONS = ("relu", "sigmoid", "tanh")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        _log_branch(mask)
        out = x.data * mask
        return make_op("relu", out, (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(x.data)
        return make_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))
    if kind == "tanh":
        t = np.tanh(x.data)
        return make_op("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))
    raise ValueError(f"unknown activation kind {kind!r}; expected one of {ACTIVATIONS}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


# ------------------------------------------------------------------ reshaping

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return make_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op("concat", out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_op("stack", out, tensors, backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return make_op("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean())
    return make_op("mean", out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


# ---------------------------------------------------------------- layers

def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape [N, d_in]."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense expects a 2-D input, got shape {x.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"dense: input width {x.shape[1]} does not match weight rows {weight.shape[0]}"
        )
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_op("dense", out, (x, weight, bias), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns [N, C*kh*kw, ho*wo] built from kh*kw strided slice copies."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    dxp = np.zeros(shape, dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [N,C,H,W] with kernel [F,C,kh,kw]."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D [N,C,H,W], got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D [F,C,kh,kw], got {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: channel dimension C mismatch, input {c} vs kernel {kc}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias dimension F mismatch, expected ({f},) got {bias.shape}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded height H={hp}")
    if kw > wp:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded width W={wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == kw == 1 and stride == 1:
        cols = xp.reshape(n, c, hp * wp)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = np.matmul(wmat, cols)
    out += bias.data[None, :, None]
    out = out.reshape(n, f, ho, wo)

    def backward(g):
        g = g.reshape(n, f, ho * wo)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g)
            if kh == kw == 1 and stride == 1:
                gxp = dcols.reshape(n, c, hp, wp)
            else:
                gxp = _col2im(dcols, (n, c, hp, wp), kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gk, gb

    return make_op("conv2d", out, (x, kernel, bias), backward)


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Windowed max; ties send the gradient to the first position in row-major scan."""
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{w}")
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    flat = win.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    _log_branch(idx)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        rows = np.arange(ho)[:, None] * stride + idx // window
        cols = np.arange(wo)[None, :] * stride + idx % window
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        gx = np.zeros(x.shape, dtype=g.dtype)
        if stride >= window:
            gx[nn, cc, rows, cols] = g
        else:
            np.add.at(gx, (nn, cc, rows, cols), g)
        return (gx,)

    return make_op("maxpool2d", out, (x,), backward)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Align-corners linear interpolation weights, shape [n_out, n_in]."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    a[rows, lo] = 1.0 - frac
    a[rows, lo + 1] += frac
    return a


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear: input must be 4-D, got {x.shape}")
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample_bilinear: cannot downsample {h}x{w} to {out_h}x{out_w}")
    ah = _interp_matrix(h, out_h, x.dtype)
    aw = _interp_matrix(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T
    return make_op("upsample_bilinear", out, (x,), lambda g: (ah.T @ g @ aw,))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return make_op("global_avg_pool", out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", s, (x,), backward)


def softmax_vec(x: Tensor) -> Tensor:
    if x.data.ndim != 1 or x.shape[0] < 1:
        raise ShapeError(f"softmax_vec expects a non-empty vector, got {x.shape}")
    return softmax(x, axis=0)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy for integer class labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean())

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_op("cross_entropy", out, (logits,), backward)


# ---------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    step: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_error <= tol

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            line = f"{name}: max rel err {err:.3e} over {self.checked[name]} entries"
            if self.skipped.get(name):
                line += f" ({self.skipped[name]} at kinks skipped)"
            out.append(line)
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    step: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``f`` is re-evaluated with each parameter entry nudged in place, so it must
    read the parameter tensors rather than copies. ``max_elements`` caps how many
    entries per parameter are probed (chosen at random with ``seed``).

    With ``skip_kinks``, an entry whose +/- nudge flips any relu sign or moves
    any max-pool winner is left out: the central difference then straddles a
    non-differentiable point and says nothing about the derivative. Skipped
    counts are reported.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    named = params.items() if isinstance(params, dict) else ((f"param{i}", p) for i, p in enumerate(params))
    named = list(named)
    for _, p in named:
        p.grad = None
        p.requires_grad = True
    with record_branches() as base_branches:
        loss = f()
    check_finite(loss)
    loss.backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(step=step)

    def evaluate() -> tuple[float, bool]:
        with no_grad(), record_branches() as branches:
            val = f()
        check_finite(val)
        return float(val.data), _same_branches(branches, base_branches)

    for name, p in named:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"parameter {name} is not contiguous")
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(idx.size)
        smooth = np.ones(idx.size, dtype=bool)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up, same_up = evaluate()
            flat[i] = orig - step
            down, same_down = evaluate()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * step)
            smooth[j] = same_up and same_down
        keep = smooth if skip_kinks else np.ones_like(smooth)
        err = relative_error(analytic.reshape(-1)[idx][keep], numeric[keep], floor)
        report.errors[name] = float(err.max(initial=0.0))
        report.checked[name] = int(keep.sum())
        report.skipped[name] = int((~keep).sum())
    return report


# ---------------------------------------------------------------- persistence

MAGIC = b"TWOATT-TENSORS\x00\x01"


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays as: magic, u64 header length, JSON header, raw bytes.

    Arrays are stored little-endian in C order so a load/save cycle reproduces
    the file byte for byte.
    """
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a tensor file (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    base = pos + hlen
    out: dict[str, np.ndarray] = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ValueError(f"{path}: truncated data for tensor {e['name']}")
        out[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return out, header["meta"]


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
