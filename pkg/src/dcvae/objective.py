"""DCVAE training loss: reconstruction, single-sample KL, supervised alignment.

The KL between the flow posterior and the conditional prior has no closed
form, so it is estimated with the same reparameterized sample used for
reconstruction (unbiased single-sample estimator). The supervised term reads
the deterministic representation (encoder mean through the flow), not the
stochastic sample. All per-record terms are averaged over the batch so the
supervision weight is batch-size invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from . import flows
from .diffnum import Tensor
from .errors import ContractViolationError, NumericError
from .model import LOG_2PI, DcvaeModel


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    sup: float
    total: float
    beta_sup: float


def recon_loss(x, x_hat, sigma_dec: float):
    """Negative Gaussian log-likelihood of x around x_hat with variance
    sigma_dec^2 per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    n = x.shape[-1]
    sq = ((x - x_hat) ** 2).sum(axis=-1)
    out = sq / (2.0 * sigma_dec ** 2) + 0.5 * n * np.log(2.0 * np.pi * sigma_dec ** 2)
    return float(out) if out.ndim == 0 else out


def kl_mc(log_q_ztilde, log_p_ztilde):
    """Single-sample KL estimate: log q - log p at one z_tilde draw."""
    out = np.asarray(log_q_ztilde, dtype=np.float64) - np.asarray(
        log_p_ztilde, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def sup_loss(e_bar, y, mode: str = "mse"):
    """Alignment loss between the first m representation coordinates and y.

    ``mse`` sums squared errors for continuous labels in [-1, 1]; ``bce``
    passes the coordinates through a sigmoid and sums cross-entropies for
    binary labels.
    """
    e_bar = np.asarray(e_bar, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m = y.shape[-1]
    if e_bar.shape[-1] < m:
        raise ContractViolationError("e_bar has fewer coordinates than y")
    e = e_bar[..., :m]
    if mode == "mse":
        out = ((y - e) ** 2).sum(axis=-1)
    elif mode == "bce":
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ContractViolationError("bce mode requires binary labels")
        p = 1.0 / (1.0 + np.exp(-e))
        out = (-y * np.log(p) - (1.0 - y) * np.log(1.0 - p)).sum(axis=-1)
    else:
        raise ContractViolationError(f"unknown sup_loss mode {mode!r}")
    return float(out) if out.ndim == 0 else out


def _gaussian_logdensity_cols(value_cols, mean_cols, logvar_cols):
    """Graph sum of per-coordinate Gaussian log densities, batched."""
    total = None
    for v, mu, lv in zip(value_cols, mean_cols, logvar_cols):
        diff = v - mu
        term = dn.square(diff) * dn.exp(dn.neg(lv)) + lv
        total = term if total is None else total + term
    d = len(value_cols)
    return (total + d * LOG_2PI) * (-0.5)


def loss_graph(model: DcvaeModel, x: np.ndarray, y: np.ndarray, u: np.ndarray,
               noise: np.ndarray, beta_sup: float, sup_mode: str = "mse"):
    """Build the full training loss for one batch; returns (total node, parts).

    ``noise`` is the fixed standard-normal draw for the reparameterized
    sample, one row per record. Gradient flows to every present parameter
    group, including the adjacency weights.
    """
    b, d = noise.shape
    x_t = dn.const(x, name="x")
    y_t = dn.const(y, name="y")
    u_t = dn.const(u, name="u")
    eps = dn.const(noise, name="noise")

    mean_t, logvar_t = model.encode_graph(x_t)
    std = dn.exp(logvar_t * 0.5)
    z_t = mean_t + std * eps

    z_cols = [dn.column(z_t, i) for i in range(d)]
    mean_cols = [dn.column(mean_t, i) for i in range(d)]
    logvar_cols = [dn.column(logvar_t, i) for i in range(d)]
    log_q_z = _gaussian_logdensity_cols(z_cols, mean_cols, logvar_cols)

    x_cols = None
    if model.conditioner_uses_x:
        x_cols = [dn.column(x_t, k) for k in range(model.n_obs)]

    if model.flow is not None:
        tilde_cols, s_cols = flows.flow_forward_graph(
            z_cols, model.adjacency, model.flow, x_cols=x_cols)
        sum_s = s_cols[0]
        for s in s_cols[1:]:
            sum_s = sum_s + s
        log_q_zt = log_q_z - sum_s
    else:
        tilde_cols = z_cols
        log_q_zt = log_q_z

    # prior log density at the sampled z_tilde
    m = model.m
    if model.prior is not None:
        pm_t, plv_t = model.prior.maps_graph(u_t)
        head_mean = [dn.column(pm_t, i) for i in range(m)]
        head_logvar = [dn.column(plv_t, i) for i in range(m)]
    else:
        zero = dn.const(np.zeros(b))
        head_mean = [zero] * m
        head_logvar = [zero] * m
    zero = dn.const(np.zeros(b))
    log_p = _gaussian_logdensity_cols(
        tilde_cols,
        head_mean + [zero] * (d - m),
        head_logvar + [zero] * (d - m))

    kl_col = log_q_zt - log_p

    z_tilde_t = dn.stack_columns(tilde_cols)
    x_hat_t = model.decode_graph(z_tilde_t)
    resid = x_t - x_hat_t
    sigma2 = model.sigma_dec ** 2
    recon_col = dn.tsum(dn.square(resid), axis=1) * (0.5 / sigma2) \
        + 0.5 * model.n_obs * float(np.log(2.0 * np.pi * sigma2))

    # supervised term on the deterministic path (noise-free sample)
    if model.flow is not None:
        ebar_cols, _ = flows.flow_forward_graph(
            mean_cols, model.adjacency, model.flow, x_cols=x_cols)
    else:
        ebar_cols = mean_cols
    sup_col = None
    for i in range(m):
        yi = dn.column(y_t, i)
        if sup_mode == "mse":
            term = dn.square(yi - ebar_cols[i])
        elif sup_mode == "bce":
            p = dn.sigmoid(ebar_cols[i])
            term = dn.neg(yi * dn.log(p) + (1.0 - yi) * dn.log(1.0 - p))
        else:
            raise ContractViolationError(f"unknown sup_loss mode {sup_mode!r}")
        sup_col = term if sup_col is None else sup_col + term

    recon = dn.tmean(recon_col)
    kl = dn.tmean(kl_col)
    sup = dn.tmean(sup_col)
    total = (recon + kl) + beta_sup * sup
    return total, {"recon": recon, "kl": kl, "sup": sup}


def total_loss(model: DcvaeModel, x, y, u, noise, beta_sup: float,
               sup_mode: str = "mse"):
    """LossBreakdown for one batch (graph discarded); see :func:`loss_graph`."""
    node, parts = loss_graph(model, np.asarray(x, dtype=np.float64),
                             np.asarray(y, dtype=np.float64),
                             np.asarray(u, dtype=np.float64),
                             np.asarray(noise, dtype=np.float64),
                             beta_sup, sup_mode)
    values = {}
    for name, part in parts.items():
        v = float(part.data)
        if not np.isfinite(v):
            raise NumericError(f"non-finite {name} term in the loss")
        values[name] = v
    return LossBreakdown(recon=values["recon"], kl=values["kl"],
                         sup=values["sup"], total=float(node.data),
                         beta_sup=beta_sup)
