"""Parameter-corruption probing and adversarial parameter defense for small dense networks."""

from .constraints import ConstraintSet, constrained_argmax, project, step_update, top_n
from .defense import SGD, DefenseConfig, TrainReport, acrt_objective_grad, awp_objective_grad, \
    defense_objective_grad, fgsm_batch, train
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    DegenerateGradientError,
    DivergedTrainingError,
    NumericalError,
    OracleResolutionError,
    ParamDefenseError,
    RejectedInputError,
    UnsupportedNormError,
)
from .nn import Batch, Dense, Model, ParamPartition, apply_corruption
from .objectives import ModelObjective, QuadraticObjective, hessian_trace_estimate
from .quantize import QuantScheme, quantize_group, quantize_model

__version__ = "0.1.0"
