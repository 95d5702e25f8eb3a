"""Binary cross-entropy and the weighted deep-supervision loss."""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .network import AUX_NAMES, ForwardOutputs, upsample_to

LN2 = math.log(2.0)


@dataclass
class SupervisionConfig:
    theta: float = 0.2          # weight of the two GSEM-branch losses
    phi: float = 0.5            # weight of the three decoder-stage losses
    learning_rate: float = 1e-3
    epochs: int = 200
    seed: int = 0
    batch_size: int = 8
    max_steps: int = 0          # 0 = no cap

    def __post_init__(self):
        if self.theta < 0 or self.phi < 0:
            raise ValueError("theta and phi must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _check_binary(gt: Tensor):
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary (values in {0, 1})")


def bce_loss(logits: Tensor, gt: Tensor) -> Tensor:
    """Mean binary cross-entropy over every pixel, computed from logits."""
    if logits.shape != gt.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and gt {tuple(gt.shape)} differ in shape")
    _check_binary(gt)
    return F.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype))


def loss_terms(outputs: ForwardOutputs, gt: Tensor) -> dict:
    """Component losses keyed by name, aux maps upsampled to the gt resolution."""
    if len(outputs.aux_logits) != len(AUX_NAMES):
        raise ValueError(f"expected {len(AUX_NAMES)} aux maps, got {len(outputs.aux_logits)}")
    size = gt.shape[-2:]
    terms = {name: bce_loss(upsample_to(a, size), gt) for name, a in zip(AUX_NAMES, outputs.aux_logits)}
    terms["final"] = bce_loss(outputs.final_logits, gt)
    return terms


def combine_terms(terms: dict, cfg: SupervisionConfig) -> Tensor:
    aux_a = terms["gsem_a"] + terms["gsem_b"]
    aux_b = terms["bottleneck"] + terms["dfim_1"] + terms["dfim_0"]
    return cfg.theta * aux_a + cfg.phi * aux_b + terms["final"]


def total_loss(outputs: ForwardOutputs, gt: Tensor, cfg: SupervisionConfig) -> Tensor:
    return combine_terms(loss_terms(outputs, gt), cfg)
