"""Dense tensors with reverse-mode automatic differentiation.

Deliberately minimal: exactly the primitives the NLOS network needs, all
2-D (matrices) or scalar. The only broadcast allowed is adding a row
vector (a bias) to a matrix; every other shape mismatch is an error, so
a bad wiring fails loudly instead of silently broadcasting.

A computation graph is built eagerly as ops run. `backward` replays the
ops reachable from a scalar loss in reverse topological order (creation
order is already topological, so no recursion is needed). Distinct graphs
are independent; parameters are shared leaves between them.
"""

from __future__ import annotations

import itertools

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DegenerateMaskError(ValueError):
    """A softmax row has no unmasked entry."""


class ContractError(RuntimeError):
    """An autodiff API contract was violated (non-scalar loss, repeated backward)."""


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """A constant copy sharing the value but cut from the graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


class Tape:
    """Ordered record of the ops reachable from a root tensor.

    Creation ids are assigned monotonically, so sorting the reachable nodes
    by id yields a valid topological order; backward walks it once, in
    reverse.
    """

    def __init__(self, root: Tensor):
        nodes = []
        seen = set()
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._backward is not None:
                nodes.append(node)
                stack.extend(node._parents)
        nodes.sort(key=lambda n: n._id)
        self.nodes = nodes


def backward(loss: Tensor):
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    `loss` must be scalar (a single element). Calling backward twice on the
    same loss is an error; gradients accumulate across separate graphs until
    cleared, which is what a training step wants.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward_done:
        raise ContractError("backward already ran for this loss; rebuild the graph")
    loss._backward_done = True
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(Tape(loss).nodes):
        if node.grad is None:
            continue
        node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    """Elementwise addition; also (matrix + row vector) for bias terms."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias_rows = None
    if a.data.shape != b.data.shape:
        if a.data.ndim == 2 and b.data.ndim == 2 and b.data.shape == (1, a.data.shape[1]):
            bias_rows = "b"
        elif a.data.ndim == 2 and b.data.ndim == 2 and a.data.shape == (1, b.data.shape[1]):
            bias_rows = "a"
        else:
            raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g.sum(axis=0, keepdims=True) if bias_rows == "a" else g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0, keepdims=True) if bias_rows == "b" else g)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: {a.data.shape} vs {b.data.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product, same shapes only."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: {a.data.shape} vs {b.data.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    c = float(c)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * c)

    return _make(a.data * c, (a,), back)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    return _make(a.data.T.copy(), (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate matrices along rows (axis 0) or columns (axis 1)."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    for t in ts:
        if t.data.ndim != 2:
            raise ShapeError(f"concat expects matrices, got shape {t.data.shape}")
    other = 1 - axis
    width = ts[0].data.shape[other]
    for t in ts[1:]:
        if t.data.shape[other] != width:
            raise ShapeError(
                f"concat: mismatched shapes {[t.data.shape for t in ts]} along axis {axis}"
            )
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accumulate(t, g[lo:hi, :] if axis == 0 else g[:, lo:hi])

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice of a matrix along rows or columns."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"slice_axis: shape {a.data.shape}, axis {axis}")
    n = a.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for size {n}")

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            if axis == 0:
                full[start:stop, :] = g
            else:
                full[:, start:stop] = g
            _accumulate(a, full)

    data = a.data[start:stop, :] if axis == 0 else a.data[:, start:stop]
    return _make(data.copy(), (a,), back)


def gather_rows(a, indices) -> Tensor:
    """Select matrix rows by index; the non-contiguous cousin of slice_axis."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {a.data.shape}")
    idx = np.asarray(indices, dtype=int)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.data.shape[0]} rows")

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    return _make(a.data[idx, :].copy(), (a,), back)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), back)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), back)


def relu(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0.0))

    return _make(np.maximum(a.data, 0.0), (a,), back)


def masked_softmax(a, mask, axis: int = 1) -> Tensor:
    """Softmax over `axis` restricted to entries where `mask` is True.

    Masked entries come out exactly 0 and receive no gradient. Every reduced
    row must contain at least one unmasked entry. Max-subtraction keeps the
    exponentials stable.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"masked_softmax: shape {a.data.shape}, axis {axis}")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    if (~m.any(axis=axis)).any():
        raise DegenerateMaskError(f"fully masked row in softmax over axis {axis}")
    neg = np.where(m, a.data, -np.inf)
    mx = neg.max(axis=axis, keepdims=True)
    e = np.exp(neg - mx)
    e = np.where(m, e, 0.0)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        if a.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            _accumulate(a, out_data * (g - inner))

    return _make(out_data, (a,), back)


def sum(a) -> Tensor:  # noqa: A001 - mirrors the primitive's conventional name
    a = _as_tensor(a)

    def back(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), back)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")

    def back(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, float(g) / n))

    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), back)


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over all entries."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse_loss: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = pred.data.size

    def back(g):
        c = 2.0 * float(g) / n
        if pred.requires_grad:
            _accumulate(pred, c * diff)
        if target.requires_grad:
            _accumulate(target, -c * diff)

    return _make(np.asarray(np.mean(diff * diff), dtype=pred.data.dtype), (pred, target), back)


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error; gradient w.r.t. pred is sign(pred - target) / n."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"l1_loss: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = pred.data.size

    def back(g):
        c = float(g) / n
        s = np.sign(diff)
        if pred.requires_grad:
            _accumulate(pred, c * s)
        if target.requires_grad:
            _accumulate(target, -c * s)

    return _make(np.asarray(np.mean(np.abs(diff)), dtype=pred.data.dtype), (pred, target), back)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckEntry:
    """Finite-difference comparison for one named parameter."""

    __slots__ = ("path", "max_rel_error", "worst_index", "analytic", "numeric")

    def __init__(self, path, max_rel_error, worst_index, analytic, numeric):
        self.path = path
        self.max_rel_error = max_rel_error
        self.worst_index = worst_index
        self.analytic = analytic
        self.numeric = numeric

    def __repr__(self):
        return (
            f"GradCheckEntry({self.path}: rel={self.max_rel_error:.3e} at {self.worst_index}, "
            f"ad={self.analytic:.6e}, fd={self.numeric:.6e})"
        )


class GradCheckReport:
    """Per-parameter max relative error between analytic and numeric gradients."""

    def __init__(self, entries: dict):
        self.entries = entries

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries.values()), default=0.0)

    @property
    def worst(self) -> GradCheckEntry | None:
        if not self.entries:
            return None
        return max(self.entries.values(), key=lambda e: e.max_rel_error)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def __repr__(self):
        w = self.worst
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, worst={w and w.path})"


def grad_check(f, params: dict, eps: float = 1e-5, rel_floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of `f` against central finite differences.

    `f` is a zero-argument deterministic callable returning a scalar Tensor
    built from the tensors in `params` (path -> Tensor). Relative error per
    element is |g_ad - g_fd| / max(|g_ad|, |g_fd|, rel_floor); the report
    names the worst element of each parameter.
    """
    for t in params.values():
        t.zero_grad()
    loss = f()
    backward(loss)
    analytic = {path: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for path, t in params.items()}

    entries = {}
    for path, t in params.items():
        flat = t.data.reshape(-1)
        g_fd = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(f().data)
            flat[i] = keep - eps
            down = float(f().data)
            flat[i] = keep
            g_fd[i] = (up - down) / (2.0 * eps)
        g_ad = analytic[path].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), rel_floor)
        rel = np.abs(g_ad - g_fd) / denom
        worst = int(np.argmax(rel)) if rel.size else 0
        entries[path] = GradCheckEntry(
            path=path,
            max_rel_error=float(rel[worst]) if rel.size else 0.0,
            worst_index=np.unravel_index(worst, t.data.shape) if rel.size else (),
            analytic=float(g_ad[worst]) if rel.size else 0.0,
            numeric=float(g_fd[worst]) if rel.size else 0.0,
        )
    return GradCheckReport(entries)
