"""Heterogeneous knowledge distillation by information-flow modeling."""

from .tensor import Tensor, no_grad, set_default_dtype, get_default_dtype
from .kernels import (COSINE, TSTUDENT, CondProbMatrix, KernelKind, RepresentationBatch, cond_prob_matrix,
                      cosine_kernel, hybrid_layer_loss, jeffreys_divergence, tstudent_kernel)
from .infoflow import FlowVector, LabelBatch, flow_divergence, flow_vector, match_layers, ncc_probe, qmi_estimate
from .distill import DistillPlan, Supervision, alpha_schedule, distill_loss, make_plan
from .nn import LayerGraph, build_model

__version__ = "0.1.0"
