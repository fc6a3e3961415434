"""Reverse-mode automatic differentiation over dense float64 arrays.

The op vocabulary is deliberately small and never broadcasts implicitly:
every binary op requires identical shapes, and the one row-vector case the
network needs is spelled out as :func:`add_bias`.

Example:
    >>> w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    >>> y = sum_squares(matmul(w, Tensor([[1.0], [1.0]])))
    >>> y.backward()
    >>> w.grad
    array([[ 6.,  6.],
           [14., 14.]])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmbeddingLookupError, NonFiniteError, ShapeError

LOG_CLAMP = 1e-12


class Tensor:
    """A dense array node in a differentiable graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def backward(self, grad: np.ndarray | None = None) -> "Tape":
        tape = Tape(self)
        tape.backward(grad)
        return tape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


def _not_scalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.parents = parents if out.requires_grad else ()
    out.backward_fn = None
    out.op = op
    out.name = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Nodes reachable from a root, in topological order (inputs first)."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def backward(self, grad: np.ndarray | None = None) -> None:
        root = self.root
        if grad is None:
            if root.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar root, got {root.shape}")
            grad = np.ones_like(root.data)
        root._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(self.nodes):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def check_finite(self) -> None:
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.data)):
                raise NonFiniteError(f"non-finite value in node {i} (op={node.op}, name={node.name})")
            if node.grad is not None and not np.all(np.isfinite(node.grad)):
                raise NonFiniteError(f"non-finite gradient in node {i} (op={node.op}, name={node.name})")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = _node(a.data @ b.data, "matmul", (a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        out.backward_fn = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = _node(a.data * b.data, "mul", (a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)
        out.backward_fn = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = _node(a.data + b.data, "add", (a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)
        out.backward_fn = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = _node(a.data - b.data, "sub", (a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(-g)
        out.backward_fn = backward
    return out


_ELEMENTWISE = {"mul": mul, "add": add, "sub": sub}


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = float(c)
    out = _node(x.data * c, "scale", (x,))
    if out.requires_grad:
        out.backward_fn = lambda g: x._accumulate(g * c)
    return out


def one_minus(x: Tensor) -> Tensor:
    out = _node(1.0 - x.data, "one_minus", (x,))
    if out.requires_grad:
        out.backward_fn = lambda g: x._accumulate(-g)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of an (n, d) matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to rows of {x.shape}")
    out = _node(x.data + b.data, "add_bias", (x, b))
    if out.requires_grad:
        def backward(g):
            if x.requires_grad:
                x._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.sum(axis=0))
        out.backward_fn = backward
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = _node(np.where(mask, x.data, 0.0), "relu", (x,))
    if out.requires_grad:
        out.backward_fn = lambda g: x._accumulate(g * mask)
    return out


_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    # float64 rounds |v| > ~36.7 onto 0 or 1; keep the open interval
    return np.clip(out, _SIG_LO, _SIG_HI, out=out)


def _sigmoid_backward(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * s * (1.0 - s)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = _node(s, "sigmoid", (x,))
    if out.requires_grad:
        # looked up at call time so a test can patch the derivative
        out.backward_fn = lambda g: x._accumulate(_sigmoid_backward(s, g))
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: no parts")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].data.ndim
    for p in parts:
        if p.data.ndim != ndim:
            raise ShapeError(f"concat: mixed ranks {[q.shape for q in parts]}")
        rest = [s for i, s in enumerate(p.shape) if i != axis % ndim]
        ref = [s for i, s in enumerate(parts[0].shape) if i != axis % ndim]
        if rest != ref:
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]} along axis {axis}")
    out = _node(np.concatenate([p.data for p in parts], axis=axis), "concat", tuple(parts))
    if out.requires_grad:
        bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

        def backward(g):
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * ndim
                    idx[axis] = slice(lo, hi)
                    p._accumulate(g[tuple(idx)])
        out.backward_fn = backward
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")
    out = _node(x.data.T, "transpose", (x,))
    if out.requires_grad:
        out.backward_fn = lambda g: x._accumulate(g.T)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    out = _node(data, "reshape", (x,))
    if out.requires_grad:
        src = x.shape
        out.backward_fn = lambda g: x._accumulate(g.reshape(src))
    return out


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a table; backward scatter-adds into the touched rows only."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = table.shape[0]
    if idx.size:
        lo, hi = int(idx.min()), int(idx.max())
        if lo < 0 or hi >= n:
            bad = lo if lo < 0 else hi
            raise EmbeddingLookupError(f"row index {bad} out of range for table with {n} rows")
    out = _node(table.data[idx], "gather_rows", (table,))
    if out.requires_grad:
        def backward(g):
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accumulate(full)
        out.backward_fn = backward
    return out


def sum_squares(x: Tensor) -> Tensor:
    out = _node(np.array(np.sum(x.data * x.data)), "sum_squares", (x,))
    if out.requires_grad:
        out.backward_fn = lambda g: x._accumulate(2.0 * x.data * g)
    return out


def add_scalars(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def binary_cross_entropy(p: Tensor, labels) -> Tensor:
    """Mean log loss; log arguments are clamped at ``LOG_CLAMP``."""
    y = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    n = y.size
    if n == 0:
        raise ValueError("binary_cross_entropy: empty batch")
    pc = np.clip(p.data, LOG_CLAMP, None)
    qc = np.clip(1.0 - p.data, LOG_CLAMP, None)
    value = -np.sum(y * np.log(pc) + (1.0 - y) * np.log(qc)) / n
    out = _node(np.array(value), "bce", (p,))
    if out.requires_grad:
        def backward(g):
            d = -(y / pc) * (p.data >= LOG_CLAMP) + ((1.0 - y) / qc) * (1.0 - p.data >= LOG_CLAMP)
            p._accumulate(g * d / n)
        out.backward_fn = backward
    return out


# ---------------------------------------------------------------- gradient checks


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, int] | None = None
    entries_checked: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relu_margin(root: Tensor) -> float:
    """Smallest |pre-activation| feeding any relu reachable from ``root``."""
    margin = np.inf
    for node in Tape(root).nodes:
        if node.op == "relu" and node.parents:
            margin = min(margin, float(np.min(np.abs(node.parents[0].data))))
    return margin


def nudge_from_kinks(f: Callable[[], Tensor], biases: Sequence[Tensor], margin: float = 1e-3,
                     max_tries: int = 20) -> float:
    """Shift relu-feeding biases by +margin until no pre-activation lies within margin of 0."""
    current = relu_margin(f())
    tries = 0
    while current < margin and tries < max_tries:
        for b in biases:
            b.data = b.data + margin
        current = relu_margin(f())
        tries += 1
    return current


def check_gradients(f: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
                    tol: float = 1e-4, max_entries: int | None = None,
                    rng: np.random.Generator | None = None,
                    grad_f: Callable[[], Tensor] | None = None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` must rebuild its graph from the current parameter values on every call.
    Relative error is ``|a - n| / max(1, |a|, |n|)``. With ``max_entries`` set, a
    random subset of each parameter's entries is checked. ``grad_f``, when given,
    supplies the analytic gradient instead of ``f`` (for graphs with stop-gradients,
    whose values must agree with ``f``).
    """
    for p in params.values():
        p.zero_grad()
    root = (grad_f or f)()
    tape = Tape(root)
    tape.backward()
    tape.check_finite()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    for p in params.values():
        p.zero_grad()

    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst_here = 0.0
        for j in entries:
            orig = flat[j]
            flat[j] = orig + eps
            up = f().item()
            flat[j] = orig - eps
            down = f().item()
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{j}]")
            numeric = (up - down) / (2.0 * eps)
            a = analytic[name].reshape(-1)[j]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst_here:
                worst_here = err
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, int(j))
        report.per_param[name] = worst_here
        report.entries_checked += len(entries)
    return report
