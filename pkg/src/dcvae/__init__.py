"""Causal-flow VAE toolkit: disentangled representations with interventions."""

from .datagen import (DatasetSplit, FactorRecord, generate_split,
                      inject_spurious, read_csv, write_csv)
from .flows import (AdjacencyMatrix, CausalFlowParams, FlowOutput,
                    do_operation, flow_forward, flow_inverse,
                    posterior_log_density, traverse)
from .model import DcvaeModel, GaussianParams, build_mask
from .objective import LossBreakdown, kl_mc, recon_loss, sup_loss, total_loss
from .train import (Checkpoint, TrainConfig, fit, load_checkpoint,
                    save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "AdjacencyMatrix", "CausalFlowParams", "Checkpoint", "DatasetSplit",
    "DcvaeModel", "FactorRecord", "FlowOutput", "GaussianParams",
    "LossBreakdown", "TrainConfig", "build_mask", "do_operation", "fit",
    "flow_forward", "flow_inverse", "generate_split", "inject_spurious",
    "kl_mc", "load_checkpoint", "posterior_log_density", "read_csv",
    "recon_loss", "save_checkpoint", "sup_loss", "total_loss", "traverse",
    "write_csv",
]
