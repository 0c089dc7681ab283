"""Define-by-run reverse-mode differentiation over dense 2-D float64 matrices.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
vector-Jacobian closure. :func:`backward` topologically sorts the recorded
graph and replays it in reverse, accumulating ``grad`` on leaf tensors that
have ``requires_grad=True``.

All values are 2-D. Scalars are ``(1, 1)`` tensors and 1-D inputs are treated
as row vectors. Broadcasting is limited to a ``(1, n)`` row vector over an
``(m, n)`` matrix.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

STD_FLOOR = 1e-8


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        joined = " and ".join(str(s) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad, out._parents, out._vjp = True, tuple(parents), vjp
    else:
        out.requires_grad, out._parents, out._vjp = False, (), None
    return out


# ---------------------------------------------------------------------------
# operation counting


@dataclass
class OpCounter:
    """Multiply-accumulate tally, split by the innermost active tag."""

    total: int = 0
    by_tag: dict[str, int] = field(default_factory=dict)
    _tags: list[str] = field(default_factory=list)

    def add(self, n: int) -> None:
        self.total += n
        tag = self._tags[-1] if self._tags else "untagged"
        self.by_tag[tag] = self.by_tag.get(tag, 0) + n

    def get(self, tag: str) -> int:
        return self.by_tag.get(tag, 0)


_counters: list[OpCounter] = []


@contextlib.contextmanager
def count_ops():
    counter = OpCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


@contextlib.contextmanager
def op_tag(name: str):
    for c in _counters:
        c._tags.append(name)
    try:
        yield
    finally:
        for c in _counters:
            c._tags.pop()


def record_ops(n: int) -> None:
    for c in _counters:
        c.add(int(n))


# relu sign patterns, recorded only while a gradient check is probing
_kink_trace: list[np.ndarray] | None = None


@contextlib.contextmanager
def trace_kinks():
    global _kink_trace
    prev, _kink_trace = _kink_trace, []
    try:
        yield _kink_trace
    finally:
        _kink_trace = prev


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    record_ops(a.shape[0] * a.shape[1] * b.shape[1])
    out = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(out, (a, b), vjp, "matmul")


def _broadcast_pair(name: str, a: Tensor, b: Tensor) -> bool:
    """Returns True when b is a row vector broadcast over a."""
    if a.shape == b.shape:
        return False
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return True
    raise ShapeError(name, a.shape, b.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape[0] == 1 and b.shape[0] != 1:
        a, b = b, a
    row = _broadcast_pair("add", a, b)

    def vjp(g):
        gb = g.sum(axis=0, keepdims=True) if row else g
        return g, gb

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    """Element-wise product; b may be a row vector."""
    a, b = as_tensor(a), as_tensor(b)
    row = _broadcast_pair("mul", a, b)

    def vjp(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            if row:
                gb = gb.sum(axis=0, keepdims=True)
        return ga, gb

    return _make(a.data * b.data, (a, b), vjp, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def scale_by(a, s) -> Tensor:
    """Multiplies every entry of ``a`` by the (1, 1) tensor ``s``."""
    a, s = as_tensor(a), as_tensor(s)
    if s.shape != (1, 1):
        raise ShapeError("scale_by", a.shape, s.shape)
    c = s.data[0, 0]

    def vjp(g):
        return g * c, np.array([[np.sum(g * a.data)]])

    return _make(a.data * c, (a, s), vjp, "scale_by")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    if _kink_trace is not None:
        _kink_trace.append(mask)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def total(a) -> Tensor:
    """Sum of all entries as a (1, 1) tensor."""
    a = as_tensor(a)
    return _make(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _make(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(a.shape, g[0, 0] / n),), "mean")


def row_sum(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.sum(axis=1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),), "row_sum")


def frobenius_sq(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.array([[np.sum(a.data ** 2)]]), (a,), lambda g: (2.0 * g[0, 0] * a.data,), "frobenius_sq")


def hstack(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError("hstack", *(p.shape for p in parts))
    cuts = np.cumsum([p.shape[1] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=1))

    return _make(np.hstack([p.data for p in parts]), parts, vjp, "hstack")


def _normalize_rows(x: np.ndarray, floor: float):
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    active = norm > floor
    denom = np.where(active, norm, floor)
    return x / denom, denom, active


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine similarity between ``a`` (n, d) and ``b`` ((n, d) or (1, d)).

    Zero-norm rows raise ``ZeroDivisionError`` with the offending row index.
    """
    a, b = as_tensor(a), as_tensor(b)
    row = _broadcast_pair("cosine_similarity", a, b)
    na = np.sqrt(np.sum(a.data ** 2, axis=1, keepdims=True))
    nb = np.sqrt(np.sum(b.data ** 2, axis=1, keepdims=True))
    if np.any(na == 0):
        raise ZeroDivisionError(f"cosine_similarity: zero-norm row {int(np.argmax(na == 0))} in first operand")
    if np.any(nb == 0):
        raise ZeroDivisionError(f"cosine_similarity: zero-norm row {int(np.argmax(nb == 0))} in second operand")
    ua, ub = a.data / na, b.data / nb
    cos = np.sum(ua * ub, axis=1, keepdims=True)

    def vjp(g):
        ga = g * (ub - cos * ua) / na if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * (ua - cos * ub) / nb
            if row:
                gb = gb.sum(axis=0, keepdims=True)
        return ga, gb

    return _make(cos, (a, b), vjp, "cosine_similarity")


def logsumexp(a) -> Tensor:
    """Row-wise log-sum-exp, shape (n, 1)."""
    a = as_tensor(a)
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    soft = e / s
    return _make(m + np.log(s), (a,), lambda g: (g * soft,), "logsumexp")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g[0, 0] / n),)

    return _make(np.array([[loss]]), (logits,), vjp, "softmax_cross_entropy")


def row_standardize(a, floor: float = STD_FLOOR) -> Tensor:
    """(x - row mean) / max(row std, floor), population std."""
    a = as_tensor(a)
    d = a.shape[1]
    c = a.data - a.data.mean(axis=1, keepdims=True)
    std = np.sqrt(np.mean(c * c, axis=1, keepdims=True))
    active = std > floor
    denom = np.where(active, std, floor)
    z = c / denom

    def vjp(g):
        # floored rows behave as a plain centring divided by a constant
        gz = g / denom
        proj = np.where(active, np.mean(g * z, axis=1, keepdims=True), 0.0)
        gc = gz - proj * z / denom
        return (gc - gc.mean(axis=1, keepdims=True),)

    return _make(z, (a,), vjp, "row_standardize")


def row_normalize(a, floor: float = STD_FLOOR) -> Tensor:
    """x / max(||x||, floor) per row."""
    a = as_tensor(a)
    u, denom, active = _normalize_rows(a.data, floor)

    def vjp(g):
        proj = np.where(active, np.sum(g * u, axis=1, keepdims=True), 0.0)
        return ((g - proj * u) / denom,)

    return _make(u, (a,), vjp, "row_normalize")


def neighbor_sum(h, src: np.ndarray, dst: np.ndarray) -> Tensor:
    """out[i] = sum of h[j] over directed edges j -> i."""
    h = as_tensor(h)
    n = h.shape[0]
    if len(src) and (src.max() >= n or dst.max() >= n or src.min() < 0 or dst.min() < 0):
        raise IndexError(f"neighbor_sum: edge index out of range for {n} nodes")
    record_ops(len(src) * h.shape[1])
    out = np.zeros_like(h.data)
    np.add.at(out, dst, h.data[src])

    def vjp(g):
        gh = np.zeros_like(g)
        np.add.at(gh, src, g[dst])
        return (gh,)

    return _make(out, (h,), vjp, "neighbor_sum")


def segment_mean(h, offsets: np.ndarray) -> Tensor:
    """Mean of contiguous row blocks ``h[offsets[i]:offsets[i+1]]``."""
    h = as_tensor(h)
    offsets = np.asarray(offsets)
    counts = np.diff(offsets)
    if np.any(counts <= 0):
        raise ValueError("segment_mean: empty segment")
    if offsets[-1] != h.shape[0]:
        raise ShapeError("segment_mean", h.shape, (int(offsets[-1]),))
    record_ops(h.data.size)
    out = np.add.reduceat(h.data, offsets[:-1], axis=0) / counts[:, None]

    def vjp(g):
        return (np.repeat(g / counts[:, None], counts, axis=0),)

    return _make(out, (h,), vjp, "segment_mean")


def segment_sum(h, offsets: np.ndarray) -> Tensor:
    h = as_tensor(h)
    offsets = np.asarray(offsets)
    counts = np.diff(offsets)
    if np.any(counts <= 0):
        raise ValueError("segment_sum: empty segment")
    if offsets[-1] != h.shape[0]:
        raise ShapeError("segment_sum", h.shape, (int(offsets[-1]),))
    out = np.add.reduceat(h.data, offsets[:-1], axis=0)
    return _make(out, (h,), lambda g: (np.repeat(g, counts, axis=0),), "segment_sum")


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.shape != (1, 1):
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p <- p - lr * grad``; clears grads afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise RuntimeError(f"sgd_step: parameter {p!r} has no gradient")
    for p in params:
        if lr != 0.0:
            p.data = p.data - lr * p.grad
        p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescales grads in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = [p for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(np.sum(p.grad * p.grad) for p in params)))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad = p.grad * factor
    return norm


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    errors: list[np.ndarray]
    tolerance: float
    probed: int = 0
    skipped: int = 0    # entries whose difference stencil crossed a relu kink

    @property
    def per_param_max(self) -> list[float]:
        return [float(e.max()) if e.size else 0.0 for e in self.errors]

    @property
    def max_error(self) -> float:
        return max(self.per_param_max, default=0.0)

    @property
    def flagged(self) -> list[int]:
        return [i for i, m in enumerate(self.per_param_max) if m > self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.flagged


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                      tolerance: float = 1e-4, max_entries: int | None = None,
                      rng: np.random.Generator | None = None, abs_floor: float = 1e-8,
                      skip_kinks: bool = False, points: int = 3) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` is re-evaluated from scratch for every perturbation, so it must read
    the current ``.data`` of ``params``. With ``max_entries`` only that many
    randomly chosen entries per parameter are probed. With ``skip_kinks`` an
    entry is left out (and counted in ``skipped``) when some relu changes sign
    between any perturbed evaluation and the unperturbed one, because the
    loss is not differentiable inside that stencil. ``points=5`` switches from
    the 3-point central difference to the fourth-order 5-point stencil.
    """
    if points not in (3, 5):
        raise ValueError(f"finite_diff_check: points must be 3 or 5, got {points}")
    if points == 3:
        offsets, weights = (1, -1), (0.5, -0.5)
    else:
        offsets, weights = (2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    with trace_kinks() as base_pattern:
        loss = f()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    def probe():
        with trace_kinks() as pattern:
            v = f().item()
        return v, pattern

    errors, probed, skipped = [], 0, 0
    for p, ga in zip(params, analytic):
        flat = np.arange(p.data.size)
        if max_entries is not None and flat.size > max_entries:
            flat = rng.choice(flat, size=max_entries, replace=False)
        errs = np.zeros(flat.size)
        for j, idx in enumerate(flat):
            r, c = np.unravel_index(idx, p.shape)
            orig = p.data[r, c]
            values, smooth = [], True
            for k in offsets:
                p.data[r, c] = orig + k * step
                v, pat = probe()
                values.append(v)
                smooth = smooth and _same_pattern(pat, base_pattern)
            p.data[r, c] = orig
            probed += 1
            if skip_kinks and not smooth:
                skipped += 1
                continue
            num = sum(w * v for w, v in zip(weights, values)) / step
            a = ga[r, c]
            errs[j] = abs(a - num) / max(abs(a), abs(num), abs_floor)
        errors.append(errs)
    return GradCheckReport(errors, tolerance, probed, skipped)
