"""Continual graph learning engine and benchmark harness for
anti-money-laundering classification on transaction graphs."""

from .autodiff import (AdamState, DivergenceError, Tape, Tensor, adam_step,
                       dropout, finite_difference_gradients, flatten_params,
                       softmax_cross_entropy, unflatten_params)
from .bench import (ExperimentConfig, aggregate, config_from_dict,
                    expand_sweep, run_experiment, run_sweep)
from .data import (EllipticDataset, IbmDataset, SyntheticSpec, featurize_ibm,
                   generate_synthetic, load_elliptic, load_ibm_hismall,
                   save_elliptic_csv, save_ibm_csv)
from .graph import (Graph, NormalizedAdjacency, build_graph, feature_matrix,
                    normalize_adjacency, spmm)
from .metrics import (PerformanceMatrix, final_performance, micro_f1,
                      micro_f1_from_counts)
from .model import (Architecture, GcnModel, expand_classes, forward_edges,
                    forward_nodes, load_model, save_model)
from .strategies import (METHODS, GraphContext, StrategyConfig, StrategyState,
                         TaskBatch, ewc_consolidate, gem_project,
                         gem_sample_memory, lwf_loss, mas_accumulate,
                         train_task, twp_consolidate)
from .tasks import (ORDERINGS, PATTERNS, Ordering, TaskSequence, TaskSpec,
                    elliptic_schedule, ibm_schedule, split_task)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
