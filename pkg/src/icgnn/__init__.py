"""Beamforming learner for MISO interference channels.

Two-stage graph-attention model (complex direction stage over per-transmitter
subgraphs, real power stage over the fully connected interference graph) with
hybrid MRT/ZF beamforming math, grid/coordinate-ascent reference solvers,
unsupervised penalty training on a from-scratch autodiff engine, and a
distributed over-the-air execution simulator with signaling-overhead accounting.
"""

from icgnn.beamforming import (
    compute_rates,
    effective_gains,
    energy_efficiency,
    hybrid_direction,
    pinv_directions,
    recover_beamformers,
    zf_matrix,
)
from icgnn.channel import (
    Dataset,
    SystemConfig,
    noise_power,
    read_dataset,
    sample_channels,
    split_dataset,
    write_dataset,
)
from icgnn.evalmetrics import EvalReport, TimingReport, ablation_suite, evaluate, inference_time
from icgnn.model import (
    ModelConfig,
    ModelParams,
    desk_config,
    enhance_features,
    forward_batch,
    icgnn_forward,
    init_params,
    table_config,
    tiny_config,
)
from icgnn.oracle import coordinate_ascent_solve, exhaustive_grid_solve, label_dataset
from icgnn.ota import (
    distributed_forward,
    distributed_train,
    make_nodes,
    signaling_overhead,
)
from icgnn.training import (
    TrainConfig,
    TrainResult,
    fine_tune,
    read_checkpoint,
    train,
    write_checkpoint,
)

__all__ = [
    "Dataset",
    "EvalReport",
    "ModelConfig",
    "ModelParams",
    "SystemConfig",
    "TimingReport",
    "TrainConfig",
    "TrainResult",
    "ablation_suite",
    "compute_rates",
    "coordinate_ascent_solve",
    "desk_config",
    "distributed_forward",
    "distributed_train",
    "effective_gains",
    "energy_efficiency",
    "enhance_features",
    "evaluate",
    "exhaustive_grid_solve",
    "fine_tune",
    "forward_batch",
    "hybrid_direction",
    "icgnn_forward",
    "inference_time",
    "init_params",
    "label_dataset",
    "make_nodes",
    "noise_power",
    "pinv_directions",
    "read_checkpoint",
    "read_dataset",
    "recover_beamformers",
    "sample_channels",
    "signaling_overhead",
    "split_dataset",
    "table_config",
    "tiny_config",
    "train",
    "write_checkpoint",
    "write_dataset",
    "zf_matrix",
]

__version__ = "0.1.0"
