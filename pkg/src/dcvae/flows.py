"""Masked affine autoregressive flow over the latent space.

Each dimension i is transformed by z_i * exp(s_i) + t_i where (s_i, t_i)
come from a per-dimension conditioner MLP whose input is the running output
vector multiplied elementwise by row i of a learnable, strictly
lower-triangular adjacency matrix. Dimension 0 uses trainable scalar
constants. The log|det| of the Jacobian is simply the sum of the s_i.

Treating the per-dimension equations as structural assignments gives the
do-operation: an intervened coordinate is pinned to its control value, its
own computation skipped, and downstream conditioners read the pinned value.

Public functions take and return numpy arrays, accepting a single d-vector
or an (N, d) batch. The graph builders used during training mirror the same
arithmetic on :mod:`dcvae.diffnum` tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .diffnum import Tensor
from .errors import ContractViolationError, NumericError

CLAMP_BOUND = 7.0


@dataclass
class AdjacencyMatrix:
    """Learnable weighted adjacency under a fixed binary support mask.

    ``mask[i][j] = 1`` means coordinate j may be a parent of coordinate i;
    the mask must be strictly lower-triangular so the forward pass is a
    topological sweep. Weights outside the mask are never read.
    """

    mask: np.ndarray
    weights: Tensor

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ContractViolationError("mask must be square")
        if not np.all((m == 0) | (m == 1)):
            raise ContractViolationError("mask must be binary")
        if np.any(np.triu(m) != 0):
            raise ContractViolationError("mask must be strictly lower-triangular")
        if self.weights.data.shape != m.shape:
            raise ContractViolationError("weights must match mask shape")
        self.mask = m.astype(np.float64)

    @property
    def d(self) -> int:
        return self.mask.shape[0]

    def effective(self) -> np.ndarray:
        """mask ∘ weights; the matrix actually read by the conditioners."""
        return self.mask * self.weights.data

    @classmethod
    def create(cls, mask, rng=None, init_scale: float = 0.1,
               name: str = "A.weights"):
        """Weights uniform in [-init_scale, init_scale] on masked entries."""
        mask = np.asarray(mask, dtype=np.float64)
        rng = np.random.default_rng(0) if rng is None else rng
        w = rng.uniform(-init_scale, init_scale, size=mask.shape) * mask
        return cls(mask=mask, weights=dn.param(w, name=name))


class CausalFlowParams:
    """Conditioner networks producing (s_i, t_i) per latent dimension.

    Dimension 0 owns trainable scalar constants; each dimension i >= 1 owns
    a one-hidden-layer tanh MLP reading the masked vector (optionally with
    the raw observation appended when ``uses_x``). Log-scales are clamped to
    [-CLAMP_BOUND, CLAMP_BOUND] before exponentiation.
    """

    def __init__(self, d: int, hidden: int = 32, uses_x: bool = False,
                 n_obs: int = 0):
        if d < 1:
            raise ContractViolationError("d must be at least 1")
        self.d = d
        self.hidden = hidden
        self.uses_x = uses_x
        self.n_obs = n_obs if uses_x else 0
        self.clamp_bound = CLAMP_BOUND
        self.s1 = dn.param(0.0, name="flow.s1")
        self.t1 = dn.param(0.0, name="flow.t1")
        in_dim = d + self.n_obs
        self.nets = []
        for i in range(1, d):
            self.nets.append({
                "w1": dn.param(np.zeros((in_dim, hidden)), name=f"flow.net{i}.w1"),
                "b1": dn.param(np.zeros(hidden), name=f"flow.net{i}.b1"),
                "w2": dn.param(np.zeros((hidden, 2)), name=f"flow.net{i}.w2"),
                "b2": dn.param(np.zeros(2), name=f"flow.net{i}.b2"),
            })

    @classmethod
    def init(cls, d: int, hidden: int = 32, rng=None, uses_x: bool = False,
             n_obs: int = 0, full_random: bool = False):
        """Glorot trunks; output layers start at zero so the flow begins as
        the identity map (``full_random`` overrides this for gradient
        checking)."""
        rng = np.random.default_rng(0) if rng is None else rng
        p = cls(d, hidden=hidden, uses_x=uses_x, n_obs=n_obs)
        in_dim = d + p.n_obs
        limit1 = np.sqrt(6.0 / (in_dim + hidden))
        for net in p.nets:
            net["w1"].data = rng.uniform(-limit1, limit1, size=(in_dim, hidden))
            if full_random:
                net["b1"].data = 0.2 * rng.standard_normal(hidden)
                net["w2"].data = 0.2 * rng.standard_normal((hidden, 2))
                net["b2"].data = 0.2 * rng.standard_normal(2)
        if full_random:
            p.s1.data = np.asarray(0.2 * rng.standard_normal())
            p.t1.data = np.asarray(0.2 * rng.standard_normal())
        return p

    def constants(self) -> tuple[float, float]:
        return float(self.s1.data), float(self.t1.data)

    def params(self) -> list[Tensor]:
        out = [self.s1, self.t1]
        for net in self.nets:
            out.extend([net["w1"], net["b1"], net["w2"], net["b2"]])
        return out

    def conditioner_np(self, i: int, masked: np.ndarray,
                       x: np.ndarray | None = None):
        """(s_raw, t) for dimension i >= 1 from the masked input batch."""
        net = self.nets[i - 1]
        inp = masked if not self.uses_x else np.concatenate([masked, x], axis=1)
        h = np.tanh(inp @ net["w1"].data + net["b1"].data)
        out = h @ net["w2"].data + net["b2"].data
        return out[:, 0], out[:, 1]

    def conditioner_graph(self, i: int, masked_cols: list[Tensor],
                          x_cols: list[Tensor] | None = None):
        """Graph twin of :meth:`conditioner_np` on per-column tensors."""
        net = self.nets[i - 1]
        cols = list(masked_cols) + (list(x_cols) if self.uses_x else [])
        inp = dn.stack_columns(cols)
        h = dn.tanh(dn.matmul(inp, net["w1"]) + net["b1"])
        out = dn.matmul(h, net["w2"]) + net["b2"]
        return dn.column(out, 0), dn.column(out, 1)


@dataclass
class FlowOutput:
    z_tilde: np.ndarray
    s_values: np.ndarray
    log_det: np.ndarray | float


def _as_batch(z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :], True
    if z.ndim == 2:
        return z, False
    raise ContractViolationError(f"expected a vector or batch, got shape {z.shape}")


def _check_finite(z, what: str):
    if not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite values in {what}")


def conditioner_eval(i: int, z_tilde_partial, A: AdjacencyMatrix, params,
                     x=None):
    """Clamped (s_i, t_i) for dimension i.

    Reads only coordinates j with mask[i][j] = 1 (all j < i); dimension 0
    returns the trainable constants regardless of the input.
    """
    c = params.clamp_bound
    if i == 0:
        s1, t1 = params.constants()
        return float(np.clip(s1, -c, c)), t1
    zt, single = _as_batch(z_tilde_partial)
    masked = zt * A.effective()[i]
    xb = None
    if params.uses_x:
        xb, _ = _as_batch(x)
    s_raw, t = params.conditioner_np(i, masked, xb)
    s = np.clip(s_raw, -c, c)
    if single:
        return float(s[0]), float(t[0])
    return s, t


def flow_forward(z, A: AdjacencyMatrix, params, x=None) -> FlowOutput:
    """Sequential pass i = 0..d-1; returns z_tilde, the s values and log|det|."""
    zb, single = _as_batch(z)
    _check_finite(zb, "z")
    n, d = zb.shape
    zt = np.zeros_like(zb)
    s_vals = np.zeros_like(zb)
    a_eff = A.effective()
    c = params.clamp_bound
    xb = _as_batch(x)[0] if params.uses_x else None
    for i in range(d):
        if i == 0:
            s1, t1 = params.constants()
            s = np.full(n, np.clip(s1, -c, c))
            t = np.full(n, t1)
        else:
            masked = zt * a_eff[i]
            s_raw, t = params.conditioner_np(i, masked, xb)
            s = np.clip(s_raw, -c, c)
        zt[:, i] = zb[:, i] * np.exp(s) + t
        s_vals[:, i] = s
    log_det = s_vals.sum(axis=1)
    if single:
        return FlowOutput(zt[0], s_vals[0], float(log_det[0]))
    return FlowOutput(zt, s_vals, log_det)


def flow_inverse(z_tilde, A: AdjacencyMatrix, params, x=None) -> np.ndarray:
    """Single non-sequential pass: conditioners read z_tilde directly."""
    ztb, single = _as_batch(z_tilde)
    _check_finite(ztb, "z_tilde")
    n, d = ztb.shape
    z = np.zeros_like(ztb)
    a_eff = A.effective()
    c = params.clamp_bound
    xb = _as_batch(x)[0] if params.uses_x else None
    for i in range(d):
        if i == 0:
            s1, t1 = params.constants()
            s = np.full(n, np.clip(s1, -c, c))
            t = np.full(n, t1)
        else:
            masked = ztb * a_eff[i]
            s_raw, t = params.conditioner_np(i, masked, xb)
            s = np.clip(s_raw, -c, c)
        z[:, i] = (ztb[:, i] - t) * np.exp(-s)
    return z[0] if single else z


def posterior_log_density(z_tilde, z, logq_z, s_values):
    """log q(z_tilde | x) = log q(z | x) - sum_i s_i."""
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    s_values = np.asarray(s_values, dtype=np.float64)
    if not (z_tilde.shape == z.shape == s_values.shape):
        raise ContractViolationError(
            "z_tilde, z and s_values must come from one flow_forward call")
    total_s = s_values.sum(axis=-1)
    out = np.asarray(logq_z, dtype=np.float64) - total_s
    return float(out) if out.ndim == 0 else out


def _normalize_interventions(interventions, d: int) -> dict[int, object]:
    if hasattr(interventions, "items"):
        pairs = list(interventions.items())
    else:
        pairs = list(interventions)
    seen: dict[int, object] = {}
    for dim, value in pairs:
        dim = int(dim)
        if dim in seen:
            raise ContractViolationError(f"duplicate intervention on dim {dim}")
        if not 0 <= dim < d:
            raise ContractViolationError(f"intervention dim {dim} outside [0, {d})")
        seen[dim] = value
    return seen


def do_operation(z, interventions, A: AdjacencyMatrix, params, x=None) -> np.ndarray:
    """Sequential pass with intervened coordinates pinned to control values.

    An intervened dimension's conditioner is never evaluated and its base
    z_i is ignored; downstream conditioners read the pinned value.
    Intervention values may be scalars or per-record arrays.
    """
    zb, single = _as_batch(z)
    _check_finite(zb, "z")
    n, d = zb.shape
    pinned = _normalize_interventions(interventions, d)
    zt = np.zeros_like(zb)
    a_eff = A.effective()
    c = params.clamp_bound
    xb = _as_batch(x)[0] if params.uses_x else None
    for i in range(d):
        if i in pinned:
            zt[:, i] = np.broadcast_to(np.asarray(pinned[i], dtype=np.float64), n)
            continue
        if i == 0:
            s1, t1 = params.constants()
            s = np.full(n, np.clip(s1, -c, c))
            t = np.full(n, t1)
        else:
            masked = zt * a_eff[i]
            s_raw, t = params.conditioner_np(i, masked, xb)
            s = np.clip(s_raw, -c, c)
        zt[:, i] = zb[:, i] * np.exp(s) + t
    return zt[0] if single else zt


def traverse(z, dim: int, values, A: AdjacencyMatrix, params, m: int | None = None,
             x=None) -> list[np.ndarray]:
    """Sweep one of the first m coordinates while pinning the others.

    The un-intervened z_tilde provides the reference values for coordinates
    j < m, j != dim; coordinates >= m pass through without intervention.
    """
    zb, single = _as_batch(z)
    d = zb.shape[1]
    m = d if m is None else m
    if not 0 <= dim < m:
        raise ContractViolationError(f"traverse dim {dim} outside [0, {m})")
    ref = flow_forward(zb, A, params, x=x).z_tilde
    out = []
    for v in values:
        pins = {j: ref[:, j] for j in range(m) if j != dim}
        pins[dim] = v
        zt = do_operation(zb, pins, A, params, x=x)
        out.append(zt[0] if single else zt)
    return out


# ---------------------------------------------------------------------------
# graph builders (training path)
# ---------------------------------------------------------------------------

def flow_forward_graph(z_cols: list[Tensor], A: AdjacencyMatrix, params,
                       x_cols: list[Tensor] | None = None):
    """Batched flow on graph tensors; returns (z_tilde columns, s columns).

    s for dimension 0 is a scalar node (shared across the batch); all other
    entries are per-record vectors. Adjacency weights enter the graph only
    where the mask is 1, matching the numpy path bit for bit.
    """
    d = len(z_cols)
    n = z_cols[0].data.shape[0]
    zero_col = dn.const(np.zeros(n))
    c = params.clamp_bound
    tilde_cols: list[Tensor] = []
    s_cols: list[Tensor] = []
    for i in range(d):
        if i == 0:
            s = dn.clamp(params.s1, -c, c)
            t = params.t1
        else:
            masked = []
            for j in range(d):
                if A.mask[i, j]:
                    masked.append(tilde_cols[j] * dn.element(A.weights, (i, j)))
                else:
                    masked.append(zero_col)
            s_raw, t = params.conditioner_graph(i, masked, x_cols)
            s = dn.clamp(s_raw, -c, c)
        tilde_cols.append(z_cols[i] * dn.exp(s) + t)
        s_cols.append(s)
    return tilde_cols, s_cols
