"""Block-based structured pruning with reweighted group lasso."""
from .blocks import (BlockScheme, GroupRef, LayerMask, SparseMask, apply_mask, enumerate_groups,
                     group_norm, partition)
from .nn import LayerSpec, Network, TrainState, evaluate, forward, loss_and_grad, mlp, sgd_step
from .prune import PruneConfig, PruneReport, run_pipeline
from .regularize import PenaltyState, RegConfig, init_penalties, reg_grad, reg_loss, update_penalties
from .reorder import ExecutionPlan, ReorderedModel, make_plan, sparse_exec
from .tensor import ConvSpec, ShapeError, conv2d_gemm, gemm, im2col

__version__ = "0.1.0"
