"""Micro-structured weight unification and pruning for small neural networks."""

from .admm import AdmmConfig, QuadraticObjective, admm_train, finalize
from .blocking import BlockPartition, BlockShape, block_values, partition, scatter_block
from .gemm import compile_matrix, count_multiplies, gemm_micro, gemm_naive, macs_estimate
from .nn import Model, TrainConfig, evaluate, fit
from .projection import (ConstraintReport, ConstraintSpec, LayerConstraint, project, project_nm,
                         project_prune, project_unify, unify_block, unify_distortion, verify_constraint)
from .storage import compression_ratio, deserialize, serialize
from .tensor import as_gemm_view, frobenius_norm, im2col

__version__ = "0.1.0"
