"""Proportion re-weighted linear attention: kernels, streaming decode, toy models and metrics."""
from .attention import (
    AttentionInputs, LeaPModule, LeaPPair, ReweightScheme, cos_branch_factors, feature_map,
    fixed_proportions, leap_forward, leap_param_overhead, linear_attention, multi_head_attention,
    quadratic_reweighted_oracle, reweight_matrix_dump, rope_linear_attention, softmax_attention,
)
from .metrics import RcpInputs, rcp, rcp_mem, sample_std
from .model import Transformer, TransformerConfig, simulate_simultaneous
from .streaming import DecodeState, StreamTrace, WaitKSchedule, state_append, state_decode, state_init
from .tensor import Tensor, backward, grad_check

__version__ = "0.1.0"
