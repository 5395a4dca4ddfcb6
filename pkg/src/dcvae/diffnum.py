"""Differentiable numerics core.

Dense float64 tensors on numpy storage, a recorded computation graph with
reverse-mode gradient accumulation, an Adam optimizer with per-group learning
rates, and a finite-difference gradient verifier.

The graph is built freshly on every forward pass: operations create new nodes
that reference their parents, so dropping the output releases the whole graph.
Leaf tensors created with :func:`param` persist across graphs and are the only
tensors an optimizer mutates. Node values are treated as immutable once
recorded; everything here is single-threaded.

Supported shapes are scalars (0-d), vectors and matrices. Elementwise
arithmetic requires matching shapes, with two documented exceptions: a 0-d
scalar combines with anything, and a length-n vector combines row-wise with an
(m, n) matrix. ``matmul`` covers matrix @ matrix and matrix @ vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractViolationError, NumericError, PreconditionError

Array = np.ndarray


def _as_array(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A graph node holding a float64 array.

    Leaves are created with :func:`param` (trainable) or :func:`const`;
    interior nodes are created by the operations below and carry a vjp
    closure used during :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, name=None, op=None,
                 parents=(), vjp=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = self.name or self.op or "tensor"
        return f"Tensor({tag}, shape={self.data.shape})"

    def label(self):
        return self.name or self.op or "tensor"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def param(data, name=None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def const(data, name=None) -> Tensor:
    """A non-trainable leaf tensor."""
    if isinstance(data, Tensor):
        return data
    return Tensor(data, requires_grad=False, name=name)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: Array, shape) -> Array:
    """Reduce ``grad`` back to ``shape`` after the documented broadcasts."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    if len(shape) == 1 and grad.ndim == 2 and grad.shape[1] == shape[0]:
        return grad.sum(axis=0)
    raise ContractViolationError(
        f"cannot reduce gradient of shape {grad.shape} to {shape}")


def _check_binary_shapes(a: Tensor, b: Tensor, opname: str):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sa == () or sb == ():
        return
    # row-vector against matrix is the one non-trivial broadcast we allow
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ContractViolationError(f"{opname}: incompatible shapes {sa} and {sb}")


def _node(data, op, parents, vjp) -> Tensor:
    return Tensor(data, op=op, parents=parents, vjp=vjp)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary_shapes(a, b, "add")
    out = a.data + b.data
    return _node(out, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape),
                            _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary_shapes(a, b, "sub")
    out = a.data - b.data
    return _node(out, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape),
                            _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary_shapes(a, b, "mul")
    out = a.data * b.data
    return _node(out, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def neg(a) -> Tensor:
    a = _coerce(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    da, db = a.data, b.data
    if da.ndim == 2 and db.ndim == 2:
        if da.shape[1] != db.shape[0]:
            raise ContractViolationError(
                f"matmul: inner dimensions {da.shape} @ {db.shape}")
        out = da @ db
        return _node(out, "matmul", (a, b),
                     lambda g: (g @ db.T, da.T @ g))
    if da.ndim == 2 and db.ndim == 1:
        if da.shape[1] != db.shape[0]:
            raise ContractViolationError(
                f"matmul: inner dimensions {da.shape} @ {db.shape}")
        out = da @ db
        return _node(out, "matvec", (a, b),
                     lambda g: (np.outer(g, db), da.T @ g))
    raise ContractViolationError(
        f"matmul supports matrix@matrix and matrix@vector, got {da.shape} @ {db.shape}")


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _coerce(a)
    out = np.log(a.data)
    return _node(out, "log", (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = _coerce(a)
    return _node(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    out = expit(a.data)
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _coerce(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(out, "clamp", (a,), lambda g: (g * mask,))


def tsum(a, axis=None) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(out, "sum", (a,), vjp)


def tmean(a, axis=None) -> Tensor:
    a = _coerce(a)
    out = a.data.mean(axis=axis)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

    return _node(out, "mean", (a,), vjp)


def column(a, j: int) -> Tensor:
    """Column ``j`` of a matrix, as a vector node."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ContractViolationError("column expects a matrix")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, j] = g
        return (full,)

    return _node(a.data[:, j].copy(), "column", (a,), vjp)


def stack_columns(cols: Sequence[Tensor]) -> Tensor:
    """Assemble equal-length vector nodes into a matrix, one per column."""
    cols = [_coerce(c) for c in cols]
    if not cols or any(c.data.ndim != 1 for c in cols):
        raise ContractViolationError("stack_columns expects 1-d tensors")
    n = cols[0].data.shape[0]
    if any(c.data.shape[0] != n for c in cols):
        raise ContractViolationError("stack_columns expects equal lengths")
    out = np.stack([c.data for c in cols], axis=1)
    return _node(out, "stack_columns", tuple(cols),
                 lambda g: tuple(g[:, j].copy() for j in range(len(cols))))


def element(a, index) -> Tensor:
    """A single entry of a tensor, as a scalar node."""
    a = _coerce(a)
    idx = index if isinstance(index, tuple) else (index,)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(a.data[idx], "element", (a,), vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(scalar_output: Tensor) -> dict[Tensor, Array]:
    """Accumulate ``d(output)/d(leaf)`` for every trainable leaf.

    The graph is left untouched, so a second call returns the same map.
    """
    if scalar_output.data.size != 1:
        raise ContractViolationError(
            f"backward requires a scalar output, got shape {scalar_output.data.shape}")
    if not np.isfinite(scalar_output.data):
        bad = find_nonfinite(scalar_output)
        raise NumericError(f"non-finite output; first bad node: {bad}")

    order = _topo_order(scalar_output)
    grads: dict[int, Array] = {id(scalar_output): np.ones_like(scalar_output.data)}
    result: dict[Tensor, Array] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                result[node] = g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not np.all(np.isfinite(pg)):
                raise NumericError(f"non-finite gradient at node '{node.label()}'")
            acc = grads.get(id(p))
            # vjps may hand back aliased arrays, so accumulate out of place
            grads[id(p)] = pg if acc is None else acc + pg
    return result


def find_nonfinite(root: Tensor):
    """Label of the first node (in forward order) holding a non-finite value."""
    for node in _topo_order(root):
        if not np.all(np.isfinite(node.data)):
            return node.label()
    return None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class ParamGroup:
    """Named parameter collection with one learning rate."""

    name: str
    params: list[Tensor]
    learning_rate: float

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractViolationError("learning_rate must be positive")


@dataclass
class AdamState:
    first_moment: list[Array]
    second_moment: list[Array]
    step_count: int
    beta1: float
    beta2: float
    epsilon: float

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractViolationError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ContractViolationError("epsilon must be positive")

    @classmethod
    def init(cls, group: ParamGroup, beta1=0.2, beta2=0.999, epsilon=1e-8):
        return cls(
            first_moment=[np.zeros_like(p.data) for p in group.params],
            second_moment=[np.zeros_like(p.data) for p in group.params],
            step_count=0,
            beta1=beta1, beta2=beta2, epsilon=epsilon,
        )


def adam_step(group: ParamGroup, grads: Sequence[Array], state: AdamState):
    """One bias-corrected Adam update, in place; returns (group, state)."""
    if len(grads) != len(group.params):
        raise ContractViolationError("grads must align one-to-one with params")
    for p, g in zip(group.params, grads):
        if g.shape != p.data.shape:
            raise ContractViolationError(
                f"grad shape {g.shape} does not match param shape {p.data.shape}")
    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(group.params, grads, state.first_moment,
                          state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - group.learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step_count = t
    return group, state


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffEntry:
    name: str
    n_checked: int
    n_total: int
    max_err: float
    worst_index: int
    worst_fd: float
    worst_ad: float
    absolute_mode: bool
    passed: bool


@dataclass
class FiniteDiffReport:
    entries: list[FiniteDiffEntry] = field(default_factory=list)
    tol: float = 0.0
    step: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        rel = [e.max_err for e in self.entries if not e.absolute_mode]
        return max(rel) if rel else 0.0

    def failing(self) -> list[str]:
        return [e.name for e in self.entries if not e.passed]

    def __str__(self):
        lines = [f"finite-diff check (step={self.step:g}, tol={self.tol:g})"]
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            mode = "abs" if e.absolute_mode else "rel"
            lines.append(
                f"  {status:4s} {e.name}: {mode} err {e.max_err:.3e} "
                f"at flat index {e.worst_index} (fd={e.worst_fd:.6e}, "
                f"ad={e.worst_ad:.6e}, {e.n_checked}/{e.n_total} coords)")
        return "\n".join(lines)


# both |fd| and |ad| below this are compared absolutely instead of relatively
_SMALL = 1e-6
_ABS_TOL = 1e-7


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                      step: float = 1e-5, tol: float = 1e-4,
                      max_coords_per_param: int | None = None,
                      rng: np.random.Generator | None = None,
                      grad_transform=None) -> FiniteDiffReport:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` rebuilds the loss graph from the current values of ``params``
    and must be deterministic (any sampling noise fixed). Large tensors may be
    checked on a random coordinate subset; the checked count is recorded in
    the report. ``grad_transform(name, grad) -> grad`` is a fault-injection
    hook used by the self-test harness.
    """
    params = list(params)
    v1 = float(loss_fn().data)
    v2 = float(loss_fn().data)
    if v1 != v2:
        raise PreconditionError(
            f"loss_fn is not deterministic ({v1!r} != {v2!r}); fix the noise")

    grads = backward(loss_fn())
    report = FiniteDiffReport(tol=tol, step=step)
    for k, p in enumerate(params):
        name = p.name or f"param{k}"
        ad = grads.get(p)
        ad = np.zeros_like(p.data) if ad is None else ad
        if grad_transform is not None:
            ad = grad_transform(name, ad)
        n_total = p.data.size
        if max_coords_per_param is not None and n_total > max_coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(n_total, size=max_coords_per_param, replace=False)
        else:
            idxs = np.arange(n_total)
        flat = p.data.reshape(-1)
        ad_flat = ad.reshape(-1)
        max_err, worst_i, worst_fd, worst_ad = 0.0, int(idxs[0]) if len(idxs) else 0, 0.0, 0.0
        absolute_mode, ok = False, True
        for i in idxs:
            i = int(i)
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(loss_fn().data)
            flat[i] = orig - step
            f_minus = float(loss_fn().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            a = ad_flat[i]
            if abs(fd) < _SMALL and abs(a) < _SMALL:
                err = abs(fd - a)
                coord_ok = err <= _ABS_TOL
                is_abs = True
            else:
                err = abs(fd - a) / max(abs(fd), abs(a))
                coord_ok = err <= tol
                is_abs = False
            if err > max_err:
                max_err, worst_i, worst_fd, worst_ad = err, i, fd, float(a)
                absolute_mode = is_abs
            ok = ok and coord_ok
        report.entries.append(FiniteDiffEntry(
            name=name, n_checked=len(idxs), n_total=n_total, max_err=max_err,
            worst_index=worst_i, worst_fd=worst_fd, worst_ad=worst_ad,
            absolute_mode=absolute_mode, passed=ok))
    return report
