"""Flow-based generation of antibody CDR loops with geometric constraints."""

__version__ = "0.1.0"

from .constraints import ConstraintWeights, constraint_loss, surrogate_h
from .data import CdrLoop, Dataset, load_dataset, save_dataset, synthesize_loop, synthetic_dataset
from .embed3d import EmbedConfig, EmbedResult, embed
from .estimator import CDRFlow, ConstrainedEmbedder
from .flow import FlowConfig, FlowModel, load_checkpoint, save_checkpoint
from .geometry import VALIDITY_PRESETS, ValiditySpec, check_validity, distance_matrix, kabsch_align, rmsd
from .metrics import EvalReport, NGramLM, UniformLM, diversity, perplexity, similarity, validity_rate
from .training import TrainConfig, train

__all__ = [
    "CDRFlow", "CdrLoop", "ConstrainedEmbedder", "ConstraintWeights", "Dataset", "EmbedConfig", "EmbedResult",
    "EvalReport", "FlowConfig", "FlowModel", "NGramLM", "TrainConfig", "UniformLM", "VALIDITY_PRESETS",
    "ValiditySpec", "check_validity", "constraint_loss", "distance_matrix", "diversity", "embed", "kabsch_align",
    "load_checkpoint", "load_dataset", "perplexity", "rmsd", "save_checkpoint", "save_dataset", "similarity",
    "surrogate_h", "synthesize_loop", "synthetic_dataset", "train", "validity_rate",
]
