from .errors import (LabError, DimensionError, ContractError, NonDifferentiableError,
                     ConfigError, NonFiniteError, StageAborted)
from .tensor import Tensor, Tape, backward, set_debug
from .network import IncrementalNet, FeatureTap, ForwardOutput, parameter_digest
from .losses import lambda_t, classification_loss, discrepancy_loss, total_loss, LossReport
from .importance import ImportanceTable, estimate, finalize, uniform_table, importance_variability
from .memory import BudgetMode, SelectionRule, ExemplarStore, herd_select, classify_nme, classify_cnn
from .metrics import AccuracyMatrix, avg_incremental_accuracy, backward_transfer, average_accuracy
