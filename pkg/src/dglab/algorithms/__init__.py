"""Training algorithms sharing one loop."""

from .evaluation import Metrics, evaluate
from .model import Architecture, Ensemble, ModelBundle, OraclePredictor, ensemble_predict, read_checkpoint, write_checkpoint
from .objectives import VARIANTS, AlgoConfig, Minibatch, MissingComponent, adversarial_loss, erm_loss, ib_penalty, irm_penalty, total_objective, vrex_penalty
from .training import RunHistory, TrainingDiverged, TrainResult, WeightAverage, swad_average, train

__all__ = [
    "AlgoConfig",
    "Architecture",
    "Ensemble",
    "Metrics",
    "Minibatch",
    "MissingComponent",
    "ModelBundle",
    "OraclePredictor",
    "RunHistory",
    "TrainResult",
    "TrainingDiverged",
    "VARIANTS",
    "WeightAverage",
    "adversarial_loss",
    "ensemble_predict",
    "erm_loss",
    "evaluate",
    "ib_penalty",
    "irm_penalty",
    "read_checkpoint",
    "swad_average",
    "total_objective",
    "train",
    "vrex_penalty",
    "write_checkpoint",
]
