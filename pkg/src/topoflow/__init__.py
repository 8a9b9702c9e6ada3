"""Topologically constrained flow matching for action-sequence policies."""

__version__ = "0.1.0"

from .attention import topo_attention
from .blockworld import (
    Action,
    Episode,
    Observation,
    WorldState,
    build_fusion_system,
    decode_actions,
    enumerate_legal_pairs,
    gen_episodes,
    load_task,
)
from .estimator import TopoFlowPolicy
from .flow import (
    IntegratorSpec,
    LossWeights,
    integrate,
    loss_flow,
    noise_sample,
    ot_target,
    sample_tau,
)
from .fusion import FusionSystem, hexagon_residual, pentagon_residual
from .numcore import Rng, Tape, Tensor, backward, sample_gaussian
from .policy import ModelConfig, PolicyParams, forward, init_params
from .topomask import TopoMask, build_mask, expand_mask, neutral_mask, project_mask
from .trainer import (
    TrainConfig,
    evaluate,
    read_checkpoint,
    train,
    write_checkpoint,
)

__all__ = [
    "__version__",
    "Action",
    "Episode",
    "FusionSystem",
    "IntegratorSpec",
    "LossWeights",
    "ModelConfig",
    "Observation",
    "PolicyParams",
    "Rng",
    "Tape",
    "Tensor",
    "TopoFlowPolicy",
    "TopoMask",
    "TrainConfig",
    "WorldState",
    "backward",
    "build_fusion_system",
    "build_mask",
    "decode_actions",
    "enumerate_legal_pairs",
    "evaluate",
    "expand_mask",
    "forward",
    "gen_episodes",
    "hexagon_residual",
    "init_params",
    "integrate",
    "load_task",
    "loss_flow",
    "neutral_mask",
    "noise_sample",
    "ot_target",
    "pentagon_residual",
    "project_mask",
    "read_checkpoint",
    "sample_gaussian",
    "sample_tau",
    "topo_attention",
    "train",
    "write_checkpoint",
]
