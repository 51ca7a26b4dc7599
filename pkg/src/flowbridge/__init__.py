"""Normalizing flows whose base densities are trained flows, for mapping between 2D distributions."""

from .distributions import FlowDensity, StandardNormal, flow_log_prob, flow_sample, normal_log_prob
from .flows4flows import (FlowForFlowModel, base_transfer, f4f_loss_left, f4f_loss_right, train_step,
                          transfer)
from .transforms import Architecture, CompositeTransform, SplineParams, rqs_forward, rqs_inverse

__all__ = [
    "Architecture",
    "CompositeTransform",
    "FlowDensity",
    "FlowForFlowModel",
    "SplineParams",
    "StandardNormal",
    "base_transfer",
    "f4f_loss_left",
    "f4f_loss_right",
    "flow_log_prob",
    "flow_sample",
    "normal_log_prob",
    "rqs_forward",
    "rqs_inverse",
    "train_step",
    "transfer",
]
