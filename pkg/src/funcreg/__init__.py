"""Desk-scale lab for functional-regularization robust fine-tuning.

Everything runs on float64 numpy with a small reverse-mode tape, a synthetic
covariate-shift benchmark, and deterministic seeded streams end to end.
"""

from .analysis import (ABLATION_VARIANTS, PARAMETER_MODES, SPACES,
                       AblationRow, AblationTable, Direction,
                       InterpolationRecord, ModelConfig, PerturbationRecord,
                       PerturbationReport, PerturbationSpec,
                       accuracy_drop_table, parse_alpha_range, perturbed_eval,
                       run_ablation, run_interpolation_sweep,
                       run_perturbation_study, sample_unit_direction,
                       threads_from_env, write_interpolation_csv)
from .augment import OPS, AugmentPolicy, apply_policy, rotate_grid
from .config import (RunConfig, canonical_hash, load_json,
                     parse_perturbation_spec, parse_run_config,
                     run_config_to_dict, write_manifest)
from .data import (GRID_SIDE, INPUT_DIM, BenchmarkData, Dataset, DomainSpec,
                   ShiftBenchmark, batches, benchmark_from_dict,
                   benchmark_to_dict, build_templates, default_benchmark,
                   domain_pattern, generate_benchmark, load_benchmark_dir,
                   load_csv, save_benchmark_dir, save_csv)
from .errors import (ConfigError, ContractError, DataError, DomainError,
                     FuncregError, NumericError, ParseError, ShapeError,
                     StateError)
from .metrics import (MetricsReport, SplitMetrics, build_report, evaluate,
                      macro_f1, macro_recall, metrics_from_logits,
                      ood_average, zero_shot_transfer_eval)
from .model import (CHECKPOINT_VERSION, EncoderParams, ModelState,
                    PrototypeHead, build_model, interpolate_weights,
                    load_checkpoint, load_params_vector, param_distance,
                    params_vector, save_checkpoint, subset_head)
from .regularizers import (METHODS, OUTPUT_SPACES, RegularizerConfig,
                           car_loss, combined_loss, ema_distill_loss,
                           far_loss, fcr_loss, l2sp_loss, ldifs_loss,
                           lipsum_loss, sample_context_prototypes)
from .tensor import (GradientTape, Tensor, add, backward, cross_entropy, exp,
                     kl_divergence, log, matmul, mean_squared_l2, mul, norm2,
                     relu, scale, softmax, sub, tmean, transpose, tsum)
from .training import (SCHEDULES, AdamWState, EvalRecord, RunLog, StepRecord,
                       TrainConfig, finetune, lr_at, optimizer_step, pretrain,
                       pretrain_holdout_split)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
