"""Continual-learning engine with active forgetting via synaptic
expansion-convergence, plus weight-regularization baselines and an
experiment CLI."""

from .continual import (ArchSpec, RunResult, SequenceConfig, evaluate,
                        load_state, random_init_baseline, run_sequence,
                        save_state, transfer_probe)
from .metrics import AccMatrix, acc, bwt, emit_report, fwt
from .nn import Adam, Batch, Network, SGD, finite_diff_check, make_optimizer
from .posterior import (DiagGaussian, WeightedProductResult,
                        estimate_diag_fisher, fisher_running_average,
                        gaussian_weighted_product, snapshot_anchor)
from .regularizers import (AfecConfig, RegState, StepInfo, afec_total_loss,
                           importance_update, quadratic_penalty,
                           reg_with_afec_loss, train_expanded)
from .tasks import (AngularLayout, TaskDataset, gen_angular_task, load_idx,
                    make_angular_sequence, make_conflicting_pair,
                    make_transfer_probe, split_tasks)

__version__ = "0.1.0"
