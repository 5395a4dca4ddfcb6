"""Evaluation protocols: downstream tasks, robustness, structure recovery.

All operations read a frozen checkpoint; none mutate model parameters. The
downstream probe is deliberately small and identical across checkpoints so
accuracy comparisons measure the representation, not the probe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import diffnum as dn
from . import flows
from .errors import (ContractViolationError, DegenerateDataError,
                     PreconditionError)
from .model import PENDULUM_TRUE_EDGES
from .train import Checkpoint

_LOGIT_CLAMP = 30.0


def representations(checkpoint: Checkpoint, x: np.ndarray) -> np.ndarray:
    """Deterministic representations for a batch of observations."""
    return checkpoint.model.representation(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# downstream classification
# ---------------------------------------------------------------------------

class DownstreamClassifier:
    """Fixed-capacity probe: MLP d -> 32 -> 1 with sigmoid output.

    Trained with standard Adam (betas 0.9/0.999), lr 1e-3, 200 epochs over
    minibatches of 128; consumes representations only, never raw
    observations.
    """

    def __init__(self, in_dim: int, hidden: int = 32):
        self.w1 = dn.param(np.zeros((in_dim, hidden)), name="probe.w1")
        self.b1 = dn.param(np.zeros(hidden), name="probe.b1")
        self.w2 = dn.param(np.zeros((hidden, 1)), name="probe.w2")
        self.b2 = dn.param(np.zeros(1), name="probe.b2")
        self.train_accuracy = None

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, reps: np.ndarray) -> np.ndarray:
        h = np.tanh(np.asarray(reps) @ self.w1.data + self.b1.data)
        out = h @ self.w2.data + self.b2.data
        return np.clip(out[:, 0], -_LOGIT_CLAMP, _LOGIT_CLAMP)

    def predict_proba(self, reps: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits(reps)))

    def predict(self, reps: np.ndarray) -> np.ndarray:
        return (self.predict_proba(reps) > 0.5).astype(np.int64)


def fit_downstream(reps: np.ndarray, task_labels: np.ndarray, seed: int,
                   epochs: int = 200, lr: float = 1e-3, hidden: int = 32,
                   batch_size: int = 128) -> DownstreamClassifier:
    """Train the probe on frozen representations; deterministic per seed."""
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(task_labels, dtype=np.float64)
    if len(np.unique(labels)) < 2:
        raise DegenerateDataError("all task labels are equal; nothing to fit")
    n, d = reps.shape
    rng = np.random.default_rng((seed, 7))
    clf = DownstreamClassifier(d, hidden=hidden)
    limit = np.sqrt(6.0 / (d + hidden))
    clf.w1.data = rng.uniform(-limit, limit, size=(d, hidden))
    clf.w2.data = rng.uniform(-np.sqrt(6.0 / (hidden + 1)),
                              np.sqrt(6.0 / (hidden + 1)), size=(hidden, 1))
    group = dn.ParamGroup("probe", clf.params(), lr)
    state = dn.AdamState.init(group, beta1=0.9, beta2=0.999)
    zeros = [np.zeros_like(p.data) for p in group.params]
    for epoch in range(epochs):
        perm = np.random.default_rng((seed, 11, epoch)).permutation(n)
        for ofs in range(0, n, batch_size):
            idx = perm[ofs:ofs + batch_size]
            x_t = dn.const(reps[idx])
            y_t = dn.const(labels[idx])
            h = dn.tanh(dn.matmul(x_t, clf.w1) + clf.b1)
            logit = dn.clamp(dn.column(dn.matmul(h, clf.w2) + clf.b2, 0),
                             -_LOGIT_CLAMP, _LOGIT_CLAMP)
            p = dn.sigmoid(logit)
            loss = dn.tmean(dn.neg(y_t * dn.log(p)
                                   + (1.0 - y_t) * dn.log(1.0 - p)))
            grads = dn.backward(loss)
            glist = [grads[q] if q in grads else z
                     for q, z in zip(group.params, zeros)]
            dn.adam_step(group, glist, state)
    clf.train_accuracy = classifier_accuracy(clf, reps, labels)
    return clf


def classifier_accuracy(classifier, reps, labels) -> float:
    """Percent of correct predictions."""
    pred = classifier.predict(np.asarray(reps))
    return 100.0 * float(np.mean(pred == np.asarray(labels).astype(np.int64)))


def sample_efficiency(acc_100: float, acc_all: float) -> float:
    """100 * accuracy@100 / accuracy@all-test-samples."""
    if not (0.0 < acc_100 <= 100.0 and 0.0 < acc_all <= 100.0):
        raise ContractViolationError("accuracies must lie in (0, 100]")
    return 100.0 * acc_100 / acc_all


# ---------------------------------------------------------------------------
# distributional robustness
# ---------------------------------------------------------------------------

@dataclass
class RobustnessReport:
    test_avg: float
    test_worst: float
    group_accuracies: dict
    absent_groups: list = field(default_factory=list)

    @property
    def has_absent_groups(self) -> bool:
        return bool(self.absent_groups)


def robustness_eval(classifier, reps, task_labels, spurious_bits) -> RobustnessReport:
    """Average and per-(task, spurious)-group accuracy on the test split.

    Empty groups are flagged as absent and excluded from the minimum.
    """
    reps = np.asarray(reps)
    labels = np.asarray(task_labels).astype(np.int64)
    bits = np.asarray(spurious_bits).astype(np.int64)
    pred = classifier.predict(reps)
    correct = (pred == labels)
    group_acc, absent = {}, []
    for task in (0, 1):
        for spur in (-1, 1):
            sel = (labels == task) & (bits == spur)
            if not np.any(sel):
                absent.append((task, spur))
                continue
            group_acc[(task, spur)] = 100.0 * float(np.mean(correct[sel]))
    if not group_acc:
        raise DegenerateDataError("no populated (task, spurious) groups")
    return RobustnessReport(
        test_avg=100.0 * float(np.mean(correct)),
        test_worst=min(group_acc.values()),
        group_accuracies=group_acc,
        absent_groups=absent)


# ---------------------------------------------------------------------------
# adjacency structure
# ---------------------------------------------------------------------------

def prune_adjacency(adjacency, tau: float = 0.25) -> set:
    """Edges (parent, child) whose effective weight magnitude exceeds tau."""
    if not tau > 0:
        raise ContractViolationError("tau must be positive")
    eff = adjacency.effective() if hasattr(adjacency, "effective") \
        else np.asarray(adjacency, dtype=np.float64)
    edges = set()
    d = eff.shape[0]
    for i in range(d):
        for j in range(d):
            if abs(eff[i, j]) > tau:
                edges.add((j, i))
    return edges


def structural_diff(estimated_edges, true_edges):
    """(missing, extra, hamming) between two edge sets over the same nodes."""
    est = set(map(tuple, estimated_edges))
    true = set(map(tuple, true_edges))
    missing = true - est
    extra = est - true
    return missing, extra, len(missing) + len(extra)


# ---------------------------------------------------------------------------
# information diagnostics
# ---------------------------------------------------------------------------

def mi_binned(latent_values, factor_values, bins: int = 16) -> float:
    """Plug-in mutual information (bits) on an equal-width 2-D histogram."""
    a = np.asarray(latent_values, dtype=np.float64)
    b = np.asarray(factor_values, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise PreconditionError("samples must be equal-length 1-d arrays")
    if a.size < 1000:
        raise PreconditionError("need at least 1000 samples")

    def edges(v):
        lo, hi = float(v.min()), float(v.max())
        if hi <= lo:
            hi = lo + 1.0  # constant column: everything in one bin
        return np.linspace(lo, hi, bins + 1)

    joint, _, _ = np.histogram2d(a, b, bins=[edges(a), edges(b)])
    p = joint / joint.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    mi = float((p[mask] * np.log2(p[mask] / (px @ py)[mask])).sum())
    return max(mi, 0.0)


def spearman(a, b) -> float:
    """Spearman rank correlation of two samples."""
    rho, _ = spearmanr(np.asarray(a), np.asarray(b))
    return float(rho)


# ---------------------------------------------------------------------------
# traversal / intervention export
# ---------------------------------------------------------------------------

def traverse_values(checkpoint: Checkpoint, x_train, dim: int,
                    count: int = 10) -> np.ndarray:
    """Default sweep: equally spaced between the 1st and 99th percentile of
    the chosen representation coordinate over the given set."""
    reps = representations(checkpoint, x_train)
    lo, hi = np.percentile(reps[:, dim], [1.0, 99.0])
    return np.linspace(lo, hi, count)


def factor_estimates(checkpoint: Checkpoint, z_tilde) -> np.ndarray:
    """Decode-then-re-encode factor readout: first m representation
    coordinates of the reconstruction."""
    model = checkpoint.model
    zt = np.asarray(z_tilde, dtype=np.float64)
    single = zt.ndim == 1
    x_hat = model.decode(zt)
    est = model.representation(x_hat)[..., :model.m]
    return est[0] if single and est.ndim == 2 else est


def export_grid(kind: str, checkpoint: Checkpoint, inputs, dims, values,
                path=None, pins=None) -> list[dict]:
    """Traversal or intervention rows for each (input, dim, value), written
    as CSV when ``path`` is given.

    ``traverse`` pins all first-m coordinates except the swept one at their
    reference values; ``intervene`` pins only the swept coordinate (plus any
    fixed ``pins``, which enables multi-factor interventions). With no dims,
    ``intervene`` emits one row per input applying just the pins.
    """
    if kind not in ("traverse", "intervene"):
        raise ContractViolationError(f"unknown export kind {kind!r}")
    model = checkpoint.model
    if model.flow is None:
        raise ContractViolationError("export_grid requires a flow-enabled model")
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    dims = list(dims)
    for dim in dims:
        if not 0 <= int(dim) < model.m:
            raise ContractViolationError(f"unknown dim {dim}; need 0 <= dim < m")
    pins = dict(pins or {})
    for dim in pins:
        if not 0 <= int(dim) < model.d:
            raise ContractViolationError(f"unknown pinned dim {dim}")

    mean = model.encode(x).mean
    rows = []
    for rec in range(x.shape[0]):
        z = mean[rec]
        xc = x[rec] if model.conditioner_uses_x else None
        if not dims:
            zt = flows.do_operation(z, pins, model.adjacency, model.flow, x=xc)
            rows.append(_grid_row(checkpoint, rec, "", "", zt))
            continue
        ref = flows.flow_forward(z, model.adjacency, model.flow, x=xc).z_tilde
        for dim in dims:
            dim = int(dim)
            for v in values:
                if kind == "traverse":
                    intervention = {j: ref[j] for j in range(model.m) if j != dim}
                    intervention.update(pins)
                else:
                    intervention = dict(pins)
                intervention[dim] = float(v)
                zt = flows.do_operation(z, intervention, model.adjacency,
                                        model.flow, x=xc)
                rows.append(_grid_row(checkpoint, rec, dim, float(v), zt))
    if path is not None:
        write_grid_csv(rows, checkpoint, path)
    return rows


def _grid_row(checkpoint, input_id, dim, value, z_tilde):
    x_hat = checkpoint.model.decode(z_tilde)
    fest = factor_estimates(checkpoint, z_tilde)
    return {"input_id": input_id, "dim": dim, "value": value,
            "ztilde": np.asarray(z_tilde), "xhat": np.asarray(x_hat),
            "fest": np.asarray(fest)}


def write_grid_csv(rows, checkpoint, path):
    model = checkpoint.model
    cols = (["input_id", "dim", "value"]
            + [f"ztilde_{i}" for i in range(model.d)]
            + [f"xhat_{i}" for i in range(model.n_obs)]
            + [f"fest_{i}" for i in range(model.m)])
    lines = [",".join(cols)]
    for r in rows:
        fields = [str(r["input_id"]), str(r["dim"]),
                  "" if r["value"] == "" else repr(float(r["value"]))]
        fields += [repr(float(v)) for v in r["ztilde"]]
        fields += [repr(float(v)) for v in r["xhat"]]
        fields += [repr(float(v)) for v in r["fest"]]
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def intervention_asymmetry(checkpoint: Checkpoint, x_inputs, dim_from: int,
                           dim_to: int, values=None, max_inputs: int = 64) -> float:
    """Mean absolute change of the decoded factor estimate ``dim_to`` when
    intervening on latent ``dim_from``, averaged over inputs and sweep values."""
    model = checkpoint.model
    x = np.asarray(x_inputs, dtype=np.float64)[:max_inputs]
    if values is None:
        values = traverse_values(checkpoint, x_inputs, dim_from)
    mean = model.encode(x).mean
    ref = flows.flow_forward(mean, model.adjacency, model.flow).z_tilde
    base = factor_estimates(checkpoint, ref)[:, dim_to]
    deltas = []
    for v in values:
        zt = flows.do_operation(mean, {dim_from: float(v)}, model.adjacency,
                                model.flow)
        est = factor_estimates(checkpoint, zt)[:, dim_to]
        deltas.append(np.abs(est - base).mean())
    return float(np.mean(deltas))


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------

def evaluate_suite(checkpoint: Checkpoint, train_split, test_split,
                   downstream_seed: int = 0) -> dict:
    """Run the downstream protocols and structure diagnostics; returns a flat
    key=value report dictionary."""
    model = checkpoint.model
    x_tr, _, _, task_tr, xi_tr = train_split.arrays()
    x_te, _, _, task_te, _ = test_split.arrays()
    reps_tr = representations(checkpoint, x_tr)
    reps_te = representations(checkpoint, x_te)

    clf = fit_downstream(reps_tr, task_tr, seed=downstream_seed)
    acc_all = classifier_accuracy(clf, reps_te, task_te)
    n100 = min(100, len(task_te))
    acc_100 = classifier_accuracy(clf, reps_te[:n100], task_te[:n100])
    report = {
        "train_accuracy": clf.train_accuracy,
        "acc100": acc_100,
        "acc_all": acc_all,
        "sample_efficiency": sample_efficiency(acc_100, acc_all),
    }

    bits = test_split.spurious_bits()
    if bits is not None:
        rob = robustness_eval(clf, reps_te, task_te, bits)
        report["test_avg"] = rob.test_avg
        report["test_worst"] = rob.test_worst
        for (task, spur), acc in sorted(rob.group_accuracies.items()):
            sign = "+" if spur > 0 else "-"
            report[f"group_acc_task{task}_spur{sign}"] = acc
        if rob.absent_groups:
            report["absent_groups"] = ";".join(
                f"{t},{s:+d}" for t, s in rob.absent_groups)

    if model.flow is not None:
        edges = prune_adjacency(model.adjacency, tau=0.25)
        missing, extra, hamming = structural_diff(edges, PENDULUM_TRUE_EDGES)
        report["pruned_edges"] = format_edges(edges)
        report["missing_edges"] = format_edges(missing)
        report["extra_edges"] = format_edges(extra)
        report["hamming"] = hamming

    for i in range(model.d):
        for j in range(xi_tr.shape[1]):
            report[f"mi_z{i}_f{j}"] = mi_binned(reps_tr[:, i], xi_tr[:, j])
    for i in range(min(model.m, xi_tr.shape[1])):
        report[f"spearman_z{i}"] = abs(spearman(reps_tr[:, i], xi_tr[:, i]))
    return report


def format_edges(edges) -> str:
    return ";".join(f"{j}->{i}" for j, i in sorted(edges))


def write_report(report: dict, path) -> None:
    lines = [f"{k}={v}" for k, v in report.items()]
    Path(path).write_text("\n".join(lines) + "\n")
