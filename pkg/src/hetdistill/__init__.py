"""Heterogeneous knowledge distillation on synthetic ECG data.

A numpy-only implementation of a distillation objective that combines
entropic optimal-transport matching of visual tokens, multi-head
cross-attention alignment of hidden states and relation (distance and angle)
matching, together with the toy teacher/student models, data generator,
metrics and self-checks needed to exercise it.
"""

from hetdistill.checkpoint import Checkpoint, load, save
from hetdistill.ecg import (CLASS_NAMES, DataConfig, EcgData, EcgRecord, GeneratorConfig,
                            PatchTokenizerConfig, generate_record, make_dataset, patchify)
from hetdistill.errors import (ContractError, DimensionError, EvaluationError, InputError,
                               TrainingError)
from hetdistill.gradcheck import CheckReport, finite_diff_check
from hetdistill.metrics import MetricsReport, binary_auc, hamming_loss, multilabel_report
from hetdistill.mhca import MhcaParams, eot_equivalence_check, init_mhca, mhca_forward, mhca_loss
from hetdistill.objective import (ABLATION_NAMES, DistillConfig, LossBreakdown, ablation_masks,
                                  default_config, total_loss)
from hetdistill.ot import TransportPlan, cost_matrix, export_plan, ot_loss, sinkhorn
from hetdistill.relation import angle_potential, distance_potential, relation_loss
from hetdistill.tensor import Tensor, gradients, no_grad

__version__ = "0.1.0"

__all__ = [
    "ABLATION_NAMES", "CLASS_NAMES", "CheckReport", "Checkpoint", "ContractError", "DataConfig",
    "DimensionError", "DistillConfig", "EcgData", "EcgRecord", "EvaluationError",
    "GeneratorConfig", "InputError", "LossBreakdown", "MetricsReport", "MhcaParams",
    "PatchTokenizerConfig", "Tensor", "TrainingError", "TransportPlan", "ablation_masks",
    "angle_potential", "binary_auc", "cost_matrix", "default_config", "distance_potential",
    "eot_equivalence_check", "export_plan", "finite_diff_check", "generate_record",
    "gradients", "hamming_loss", "init_mhca", "load", "make_dataset", "mhca_forward",
    "mhca_loss", "multilabel_report", "no_grad", "ot_loss", "patchify", "relation_loss",
    "save", "sinkhorn", "total_loss",
]
