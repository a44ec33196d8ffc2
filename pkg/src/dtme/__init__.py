"""Token-space gradient conflict analysis with per-task token modulation (TM)
and task-token expansion (TE) for multi-task transformers."""

__version__ = "0.1.0"

from .analyzer import (ConflictReport, ConflictStats, SpectralBasis, TokenCovariance,
                       aggregate_layer_conflicts, detect_conflicts, jacobi_eigh, project,
                       spectral_split, uncentered_covariance)
from .errors import ContractError, DTMEError, NumericError, ShapeError, ValidationError
from .expansion import (ExpansionPlan, apply_plan, build_plan, param_overhead, verify_proposition1,
                        verify_proposition2)
from .model import HeadSpec, ModelConfig, MultiTaskTransformer
from .multitask import (MetricTable, SyntheticDatasetSpec, TaskSpec, delta_m, generate,
                        multitask_loss)
from .trainer import (DTMESettings, RunRecord, TrainConfig, monitor_conflicts, pcgrad_step,
                      train_dtme, train_joint, train_pcgrad, train_single_task)
