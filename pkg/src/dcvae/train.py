"""Training loop, run configuration, checkpoint serialization.

Runs are fully reproducible: model initialization derives from the seed,
batch shuffling uses a fresh stream per (seed, epoch), and reparameterization
noise comes from a single generator whose state is captured in checkpoints,
so resuming a run reproduces the uninterrupted one bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffnum as dn
from .datagen import DatasetSplit
from .errors import (CheckpointLoadError, ContractViolationError, NumericError,
                     TrainingDivergedError)
from .model import DcvaeModel, build_mask
from .objective import loss_graph

MAGIC = b"DCVAE1\n"
FORMAT_VERSION = 1

_MASK_KINDS = ("true_graph", "full_lower", "custom")


@dataclass
class TrainConfig:
    """Hyperparameters of one training run (defaults follow the full-scale
    recipe; desk-scale runs pass epochs=100)."""

    seed: int = 0
    batch_size: int = 128
    epochs: int = 801
    latent_dim: int = 4
    m: int = 4
    sigma_dec: float = 0.1667
    beta_sup: float = 8.0
    lr_encoder: float = 5e-5
    lr_flow: float = 5e-5
    lr_prior: float = 5e-5
    lr_decoder: float = 5e-5
    lr_adjacency: float = 1e-3
    adam_beta1: float = 0.2
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    mask_kind: str = "true_graph"
    custom_edges: tuple = None
    flow_enabled: bool = True
    conditional_prior_enabled: bool = True
    conditioner_uses_x: bool = False
    sup_mode: str = "mse"
    flow_hidden: int = 32
    adjacency_init_scale: float = 0.1

    def __post_init__(self):
        if self.m > self.latent_dim or self.m < 1:
            raise ContractViolationError("need 1 <= m <= latent_dim")
        for name in ("batch_size", "latent_dim", "sigma_dec", "beta_sup",
                     "lr_encoder", "lr_flow", "lr_prior", "lr_decoder",
                     "lr_adjacency", "adam_epsilon", "flow_hidden"):
            if getattr(self, name) <= 0:
                raise ContractViolationError(f"{name} must be positive")
        if self.epochs < 0:
            raise ContractViolationError("epochs must be non-negative")
        if self.mask_kind not in _MASK_KINDS:
            raise ContractViolationError(f"unknown mask_kind {self.mask_kind!r}")
        if self.sup_mode not in ("mse", "bce"):
            raise ContractViolationError(f"unknown sup_mode {self.sup_mode!r}")
        if self.custom_edges is not None:
            self.custom_edges = tuple((int(j), int(i)) for j, i in self.custom_edges)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["custom_edges"] is not None:
            d["custom_edges"] = [list(e) for e in d["custom_edges"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def learning_rates(self) -> dict:
        return {"encoder": self.lr_encoder, "flow": self.lr_flow,
                "prior": self.lr_prior, "decoder": self.lr_decoder,
                "A": self.lr_adjacency}

    def mask(self) -> np.ndarray:
        return build_mask(self.mask_kind, d=self.latent_dim,
                          custom_edges=self.custom_edges)


@dataclass
class Checkpoint:
    """Serialized training state: parameters, optimizer moments, RNG."""

    config: TrainConfig
    n_obs: int
    u_dim: int
    model: DcvaeModel
    adam_states: dict
    epoch: int
    rng_state: dict


@dataclass
class EpochLoss:
    epoch: int
    recon: float
    kl: float
    sup: float
    total: float


def _build_model_structure(config: TrainConfig, n_obs: int, u_dim: int) -> DcvaeModel:
    mask = config.mask() if config.flow_enabled else None
    return DcvaeModel(n_obs, d=config.latent_dim, m=config.m, u_dim=u_dim,
                      sigma_dec=config.sigma_dec,
                      flow_enabled=config.flow_enabled,
                      cond_prior_enabled=config.conditional_prior_enabled,
                      conditioner_uses_x=config.conditioner_uses_x,
                      flow_hidden=config.flow_hidden, mask=mask)


def _named_params(model: DcvaeModel) -> dict:
    return {p.name: p for p in model.all_params()}


def _snapshot_checkpoint(config, n_obs, u_dim, model, states, epoch,
                         rng) -> Checkpoint:
    """Deep-copied checkpoint of the live training state."""
    copy_model = _build_model_structure(config, n_obs, u_dim)
    live = _named_params(model)
    for name, tensor in _named_params(copy_model).items():
        tensor.data = live[name].data.copy()
    copy_groups = copy_model.param_groups(config.learning_rates())
    copy_states = {}
    for group in copy_groups:
        src = states[group.name]
        copy_states[group.name] = dn.AdamState(
            first_moment=[m.copy() for m in src.first_moment],
            second_moment=[v.copy() for v in src.second_moment],
            step_count=src.step_count,
            beta1=src.beta1, beta2=src.beta2, epsilon=src.epsilon)
    return Checkpoint(config=config, n_obs=n_obs, u_dim=u_dim, model=copy_model,
                      adam_states=copy_states, epoch=epoch,
                      rng_state=rng.bit_generator.state)


def fit(config: TrainConfig, train_split: DatasetSplit,
        resume_from: Checkpoint | None = None):
    """Train for config.epochs epochs; returns (Checkpoint, per-epoch losses).

    With ``resume_from``, continues that checkpoint up to config.epochs total
    epochs, reproducing an uninterrupted run exactly. A non-finite loss
    aborts with :class:`TrainingDivergedError` carrying the last good
    checkpoint.
    """
    x_all, y_all, u_all, _, _ = train_split.arrays()
    n = len(train_split)
    if n == 0:
        raise ContractViolationError("cannot fit on an empty split")
    n_obs = train_split.meta.n_obs
    u_dim = u_all.shape[1]
    d = config.latent_dim

    if resume_from is None:
        model = DcvaeModel.init(
            n_obs, d=d, m=config.m, u_dim=u_dim, sigma_dec=config.sigma_dec,
            flow_enabled=config.flow_enabled,
            cond_prior_enabled=config.conditional_prior_enabled,
            conditioner_uses_x=config.conditioner_uses_x,
            flow_hidden=config.flow_hidden,
            mask=config.mask() if config.flow_enabled else None,
            seed=config.seed, adjacency_init_scale=config.adjacency_init_scale)
        groups = model.param_groups(config.learning_rates())
        states = {g.name: dn.AdamState.init(g, beta1=config.adam_beta1,
                                            beta2=config.adam_beta2,
                                            epsilon=config.adam_epsilon)
                  for g in groups}
        noise_rng = np.random.default_rng((config.seed, 202))
        start_epoch = 0
    else:
        ckpt = resume_from
        if ckpt.n_obs != n_obs:
            raise ContractViolationError(
                f"checkpoint n_obs {ckpt.n_obs} != dataset n_obs {n_obs}")
        mismatched = [k for k, v in ckpt.config.to_dict().items()
                      if k != "epochs" and config.to_dict()[k] != v]
        if mismatched:
            raise ContractViolationError(
                f"resume config differs from checkpoint in {mismatched}")
        # work on a copy so the caller's checkpoint stays usable
        noise_rng = np.random.default_rng()
        noise_rng.bit_generator.state = ckpt.rng_state
        copy = _snapshot_checkpoint(ckpt.config, ckpt.n_obs, ckpt.u_dim,
                                    ckpt.model, ckpt.adam_states,
                                    ckpt.epoch, noise_rng)
        model, states = copy.model, copy.adam_states
        groups = model.param_groups(config.learning_rates())
        start_epoch = ckpt.epoch

    def snapshot(epoch):
        return _snapshot_checkpoint(config, n_obs, u_dim, model,
                                    states, epoch, noise_rng)

    grad_zeros = {g.name: [np.zeros_like(p.data) for p in g.params]
                  for g in groups}
    log: list[EpochLoss] = []
    last_good = snapshot(start_epoch)
    for epoch in range(start_epoch, config.epochs):
        perm = np.random.default_rng((config.seed, 500, epoch)).permutation(n)
        sums = np.zeros(4)
        for ofs in range(0, n, config.batch_size):
            idx = perm[ofs:ofs + config.batch_size]
            eps = noise_rng.standard_normal((len(idx), d))
            node, parts = loss_graph(model, x_all[idx], y_all[idx], u_all[idx],
                                     eps, config.beta_sup, config.sup_mode)
            total = float(node.data)
            if not np.isfinite(total):
                bad = dn.find_nonfinite(node)
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1} (first bad node: {bad})",
                    checkpoint=last_good, epoch=epoch)
            try:
                grads = dn.backward(node)
            except NumericError as exc:
                raise TrainingDivergedError(
                    f"non-finite gradient at epoch {epoch + 1}: {exc}",
                    checkpoint=last_good, epoch=epoch) from exc
            for group in groups:
                glist = [grads[p] if p in grads else z
                         for p, z in zip(group.params, grad_zeros[group.name])]
                dn.adam_step(group, glist, states[group.name])
            w = len(idx)
            sums += w * np.array([parts["recon"].data, parts["kl"].data,
                                  parts["sup"].data, total])
        recon, kl, sup, tot = sums / n
        log.append(EpochLoss(epoch=epoch + 1, recon=recon, kl=kl, sup=sup,
                             total=tot))
        last_good = snapshot(epoch + 1)
    return last_good, log


def write_loss_log(log, path) -> None:
    lines = ["epoch,recon,kl,sup,total"]
    for row in log:
        lines.append(f"{row.epoch},{row.recon!r},{row.kl!r},{row.sup!r},{row.total!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoint file format: magic, JSON header, little-endian float64 payload
# ---------------------------------------------------------------------------

def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    model = checkpoint.model
    tensors = model.all_params()
    groups = model.param_groups(checkpoint.config.learning_rates())
    header = {
        "format_version": FORMAT_VERSION,
        "config": checkpoint.config.to_dict(),
        "n_obs": checkpoint.n_obs,
        "u_dim": checkpoint.u_dim,
        "epoch": checkpoint.epoch,
        "rng_state": checkpoint.rng_state,
        "tensors": [{"name": t.name, "shape": list(t.data.shape)} for t in tensors],
        "groups": {g.name: [p.name for p in g.params] for g in groups},
        "adam": {name: {"step_count": st.step_count, "beta1": st.beta1,
                        "beta2": st.beta2, "epsilon": st.epsilon}
                 for name, st in checkpoint.adam_states.items()},
    }
    blobs = [np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in tensors]
    for g in groups:
        st = checkpoint.adam_states[g.name]
        for arr in st.first_moment + st.second_moment:
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointLoadError(
                f"bad checkpoint magic: expected {MAGIC!r}, found {magic!r}")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise CheckpointLoadError("truncated checkpoint header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise CheckpointLoadError("truncated checkpoint header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except ValueError as exc:
            raise CheckpointLoadError(f"unreadable header: {exc}") from exc
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointLoadError(
                f"format version mismatch: file has {version}, "
                f"reader supports {FORMAT_VERSION}")
        config = TrainConfig.from_dict(header["config"])
        model = _build_model_structure(config, header["n_obs"], header["u_dim"])
        named = _named_params(model)

        def read_array(shape):
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointLoadError("truncated checkpoint payload")
            return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

        for entry in header["tensors"]:
            name = entry["name"]
            if name not in named:
                raise CheckpointLoadError(f"unknown tensor {name!r} in file")
            arr = read_array(tuple(entry["shape"]))
            if arr.shape != named[name].data.shape:
                raise CheckpointLoadError(
                    f"shape mismatch for {name!r}: {arr.shape}")
            named[name].data = arr

        adam_states = {}
        for gname, pnames in header["groups"].items():
            meta = header["adam"][gname]
            shapes = [named[p].data.shape for p in pnames]
            first = [read_array(s) for s in shapes]
            second = [read_array(s) for s in shapes]
            adam_states[gname] = dn.AdamState(
                first_moment=first, second_moment=second,
                step_count=int(meta["step_count"]), beta1=meta["beta1"],
                beta2=meta["beta2"], epsilon=meta["epsilon"])
        trailing = fh.read(1)
        if trailing:
            raise CheckpointLoadError("unexpected trailing bytes in checkpoint")
    return Checkpoint(config=config, n_obs=header["n_obs"], u_dim=header["u_dim"],
                      model=model, adam_states=adam_states,
                      epoch=int(header["epoch"]), rng_state=header["rng_state"])
