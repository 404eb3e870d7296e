"""Higher-order recursive networks with stack memory for verifying and completing
mathematical identities."""

from .expr import Expr, Label, depth, label_identity, parse, to_infix, to_sexpr
from .generate import (Dataset, LabeledEquation, MutationConfig, completion_candidates,
                       generate_dataset, load_axioms, split_dataset)
from .model import ModelConfig, TreeModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "Expr", "Label", "depth", "label_identity", "parse", "to_infix", "to_sexpr",
    "Dataset", "LabeledEquation", "MutationConfig", "completion_candidates",
    "generate_dataset", "load_axioms", "split_dataset",
    "ModelConfig", "TreeModel", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "fit",
]
