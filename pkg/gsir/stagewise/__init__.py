from gsir.stagewise.config import FinetuneConfig, PODConfig, StageControlConfig, TrainConfig, load_train_config
from gsir.stagewise.control import StageMask, candidate_capacity, compute_stage_mask, utilization
from gsir.stagewise.pipeline import StagePipelineState, init_state, prefix_render, run_pipeline, run_stage
from gsir.stagewise.predictor import HeuristicPredictor, TinyLinearPredictor, load_weights, save_weights

__all__ = [
    "FinetuneConfig",
    "HeuristicPredictor",
    "PODConfig",
    "StageControlConfig",
    "StageMask",
    "StagePipelineState",
    "TinyLinearPredictor",
    "TrainConfig",
    "candidate_capacity",
    "compute_stage_mask",
    "init_state",
    "load_train_config",
    "load_weights",
    "prefix_render",
    "run_pipeline",
    "run_stage",
    "save_weights",
    "utilization",
]
