"""Dense rank-2 tensors with define-by-run reverse-mode differentiation.

Every value in the model is a :class:`Tensor` wrapping a 2-D ``float64``
array. Operations record their parents and a local gradient rule on the
output tensor; :func:`backward` walks that record in reverse topological
order. The record is rebuilt on every forward pass, so graph topology may
change between calls (e.g. a different sparsity mask each step).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "concat_features",
    "finite_diff_check",
    "leaky_relu",
    "mask_entries",
    "matmul",
    "mul",
    "nll_log_softmax",
    "normalized_gram",
    "pairwise_absdiff",
    "reshape",
    "row_normalize",
    "row_softmax",
    "scale",
    "sub",
    "take_cols",
    "take_rows",
    "total_sum",
    "transpose",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


GradRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A dense ``rows x cols`` array of doubles with optional gradient.

    Parameters
    ----------
    values : array-like
        Scalars become ``1x1``, vectors become a single row.
    trainable : bool, default False
        Leaf tensors marked trainable get a zero-initialised ``grad`` that
        :func:`backward` accumulates into.
    """

    def __init__(self, values, trainable: bool = False, *, _parents: tuple = (),
                 _rule: Optional[GradRule] = None, _op: str = "leaf"):
        data = np.array(values, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        elif data.ndim != 2:
            raise ShapeError(f"tensors are rank 2, got array of shape {data.shape}")
        self.data = data
        self.trainable = bool(trainable)
        self.requires_grad = self.trainable or any(p.requires_grad for p in _parents)
        self.grad: Optional[np.ndarray] = np.zeros_like(data) if self.trainable else None
        self._parents = _parents
        self._rule = _rule
        self._op = _op

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self.trainable:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", trainable" if self.trainable else ""
        return f"Tensor({self.rows}x{self.cols}{flag}, op={self._op})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __radd__(self, other):
        return add(_as_tensor(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.shape == self.shape and self.shape != (1, 1):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


def _result(data: np.ndarray, parents: tuple, rule: GradRule, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.trainable = False
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = parents if out.requires_grad else ()
    out._rule = rule if out.requires_grad else None
    out._op = op
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a ``1 x cols`` row broadcast over rows."""
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.rows == 1 and b.cols == a.cols:
        return _result(a.data + b.data, (a, b),
                       lambda g: (g, g.sum(axis=0, keepdims=True)), "add_row")
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of equal shapes."""
    if a.shape != b.shape:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape} elementwise")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s) -> Tensor:
    """Multiply ``a`` by a scalar; ``s`` is a float or a ``1x1`` tensor."""
    if not isinstance(s, Tensor):
        c = float(s)
        return _result(a.data * c, (a,), lambda g: (g * c,), "scale")
    if s.shape != (1, 1):
        raise ShapeError(f"scale factor must be 1x1, got {s.shape}")
    ad, c = a.data, s.data[0, 0]
    return _result(ad * c, (a, s),
                   lambda g: (g * c, np.array([[np.sum(g * ad)]])), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; backward gives ``dA = dC B^T`` and ``dB = A^T dC``."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {(rows, cols)}")
    shp = a.shape
    return _result(a.data.reshape(rows, cols).copy(), (a,),
                   lambda g: (g.reshape(shp),), "reshape")


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Per-row concatenation ``[a, b]`` along the feature axis."""
    if a.rows != b.rows:
        raise ShapeError(f"concat needs equal row counts, got {a.shape} and {b.shape}")
    q1 = a.cols
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :q1], g[:, q1:]), "concat")


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    shp = a.shape

    def rule(g):
        out = np.zeros(shp)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), rule, "take_rows")


def take_cols(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    shp = a.shape

    def rule(g):
        out = np.zeros(shp)
        np.add.at(out.T, idx, g.T)
        return (out,)

    return _result(a.data[:, idx], (a,), rule, "take_cols")


def total_sum(a: Tensor) -> Tensor:
    shp = a.shape
    return _result(np.array([[a.data.sum()]]), (a,),
                   lambda g: (np.full(shp, g[0, 0]),), "sum")


def mask_entries(a: Tensor, mask: np.ndarray) -> Tensor:
    """Zero the entries where ``mask`` is False; gradient flows only through kept entries."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ShapeError(f"mask shape {m.shape} does not match tensor {a.shape}")
    keep = m.astype(np.float64)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "mask")


# ---------------------------------------------------------------------------
# nonlinearities and normalisers
# ---------------------------------------------------------------------------

def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """``x if x > 0 else slope * x``; the derivative at exactly 0 is ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = a.data > 0.0
    d = np.where(pos, 1.0, slope)
    return _result(np.where(pos, a.data, slope * a.data), (a,), lambda g: (g * d,), "leaky_relu")


def row_softmax(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax, optionally restricted to the True entries of ``mask``.

    Masked-out entries are exactly zero. A row with no admissible entry has
    no defined normalisation and raises ``ValueError``.
    """
    v = a.data
    if mask is None:
        z = v - v.max(axis=1, keepdims=True)
        e = np.exp(z)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != a.shape:
            raise ShapeError(f"mask shape {m.shape} does not match tensor {a.shape}")
        empty = ~m.any(axis=1)
        if empty.any():
            raise ValueError(f"row_softmax mask leaves row(s) {np.flatnonzero(empty).tolist()} empty")
        rowmax = np.where(m, v, -np.inf).max(axis=1, keepdims=True)
        e = np.where(m, np.exp(np.where(m, v - rowmax, 0.0)), 0.0)
    y = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return _result(y, (a,), rule, "row_softmax")


def row_normalize(a: Tensor) -> Tensor:
    """Divide each row by its sum; all-zero rows are left at zero."""
    s = a.data.sum(axis=1, keepdims=True)
    s = np.where(s == 0.0, 1.0, s)
    ad = a.data

    def rule(g):
        return (g / s - np.sum(g * ad, axis=1, keepdims=True) / s**2,)

    return _result(ad / s, (a,), rule, "row_normalize")


def normalized_gram(a: Tensor, eps: float = 1e-12) -> Tensor:
    """``P(i, j) = <x_i, x_j> / (|x_i| |x_j| + eps)`` for the rows of ``a``."""
    x = a.data
    n = np.sqrt(np.sum(x * x, axis=1))
    gram = x @ x.T
    denom = np.outer(n, n) + eps
    p = gram / denom

    def rule(g):
        dgram = g / denom
        ddenom = -g * gram / denom**2
        dn = (ddenom + ddenom.T) @ n
        safe = np.where(n > 0.0, n, 1.0)
        dx = (dgram + dgram.T) @ x + np.where(n > 0.0, dn / safe, 0.0)[:, None] * x
        return (dx,)

    return _result(p, (a,), rule, "normalized_gram")


def pairwise_absdiff(a: Tensor) -> Tensor:
    """Stack ``|x_i - x_j|`` into a ``(V*V) x d`` matrix, row ``i*V + j``."""
    x = a.data
    v, d = x.shape
    diff = x[:, None, :] - x[None, :, :]
    sgn = np.sign(diff)

    def rule(g):
        s = sgn * g.reshape(v, v, d)
        return (s.sum(axis=1) - s.sum(axis=0),)

    return _result(np.abs(diff).reshape(v * v, d), (a,), rule, "pairwise_absdiff")


def nll_log_softmax(logits: Tensor, targets) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under row-softmax of ``logits``."""
    t = np.asarray(targets, dtype=np.intp).reshape(-1)
    q, n = logits.shape
    if t.shape[0] != q:
        raise ShapeError(f"{t.shape[0]} targets for {q} logit rows")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise ValueError(f"target class out of range [0, {n}): {t.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    rows = np.arange(q)
    loss = -logp[rows, t].sum()

    def rule(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        return (d * g[0, 0],)

    return _result(np.array([[loss]]), (logits,), rule, "nll")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every tensor upstream of the scalar ``root``.

    Trainable leaves accumulate across calls; intermediate tensors hold the
    gradient of the most recent pass only.
    """
    if root.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 root, got {root.shape}")
    if not root.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.trainable:
            node.grad += g
        else:
            node.grad = g
        if node._rule is None:
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The per-coordinate error is ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base, trainable=True)
    backward(f(probe))
    analytic = probe.grad

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        flat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(err.max()) if err.size else 0.0


def parameters_zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
