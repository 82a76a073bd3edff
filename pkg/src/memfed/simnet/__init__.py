from .world import SplitError, WorldConfig, WorldDataset, generate_world
from .toymodel import ToyModel, generate_samples, init_model, train_epochs
from .evaluate import MetricsConfig, SplitEvaluator
from .node import NodeAgent, NodeStrategy, ToyConfig, select_candidate
from .scheduler import NodeSpec, Scenario, ScenarioError, Trace, final_means, run_schedule

__all__ = ["SplitError", "WorldConfig", "WorldDataset", "generate_world", "ToyModel", "init_model", "train_epochs",
           "generate_samples", "MetricsConfig", "SplitEvaluator", "NodeAgent", "NodeStrategy", "ToyConfig",
           "select_candidate", "NodeSpec", "Scenario", "ScenarioError", "Trace", "final_means", "run_schedule"]
