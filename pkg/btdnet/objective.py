#!/usr/bin/python
# -*- coding: utf-8 -*-
# Copyright (c) 2023, BTDNet contributors
#
# Permission to use, copy, modify, and/or distribute this software for any purpose
# with or without fee is hereby granted, provided that the above copyright notice
# and this permission notice appear in all copies.
#
# THE SOFTWARE IS PROVIDED "AS IS" AND THE AUTHOR DISCLAIMS ALL WARRANTIES WITH
# REGARD TO THIS SOFTWARE INCLUDING ALL IMPLIED WARRANTIES OF MERCHANTABILITY AND
# FITNESS. IN NO EVENT SHALL THE AUTHOR BE LIABLE FOR ANY SPECIAL, DIRECT, INDIRECT,
# OR CONSEQUENTIAL DAMAGES OR ANY DAMAGES WHATSOEVER RESULTING FROM LOSS OF USE,
# DATA OR PROFITS, WHETHER IN AN ACTION OF CONTRACT, NEGLIGENCE OR OTHER TORTIOUS
# ACTION, ARISING OUT OF OR IN CONNECTION WITH THE USE OR PERFORMANCE OF THIS
# SOFTWARE.

from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from btdnet.support import InvalidParameter, NonFiniteInput, ShapeMismatch

LOSS_KINDS = ("focal", "categorical_ce", "binary_ce")
REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class FocalParams:
    """
    :param alpha: Weight of the positive-class term, in (0, 1).
    :type alpha: float.
    :param gamma: Focusing parameter, non-negative.
    :type gamma: float.
    """
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidParameter(f"alpha must lie in (0, 1), got {self.alpha}.")
        if not self.gamma >= 0.0:
            raise InvalidParameter(f"gamma must be non-negative, got {self.gamma}.")


def _check_logits(logits:Tensor, targets:Tensor) -> None:
    if logits.dim() != 2 or logits.shape[1] != 2 or targets.shape != logits.shape:
        raise ShapeMismatch(f"Expected batch × 2 logits and targets, got {tuple(logits.shape)} and {tuple(targets.shape)}.")
    if not bool(torch.isfinite(logits).all()):
        raise NonFiniteInput("Logits contain NaN or infinite values.")


def _reduce(values:Tensor, reduction:str) -> Tensor:
    if reduction == "sum":
        return values.sum()
    if reduction == "mean":
        return values.mean()
    raise InvalidParameter(f"Unknown reduction '{reduction}', expected one of {REDUCTIONS}.")


def focal_terms(logits:Tensor, targets:Tensor, params:FocalParams=FocalParams(), literal:bool=False) -> Tensor:
    """
    Per-sample binary focal loss on the positive-class softmax probability ``p``.
    Positive samples get ``-α (1-p)^γ log p``, negative samples ``-(1-α) p^γ log(1-p)``;
    with ``literal`` both terms are applied to every sample.
    Log-probabilities come from ``log_softmax`` so saturated logits stay finite.
    """
    _check_logits(logits, targets)
    log_probs = F.log_softmax(logits, dim=-1)
    log_q, log_p = log_probs[:, 0], log_probs[:, 1]
    if params.gamma == 0.0:
        pos_factor = neg_factor = torch.ones_like(log_p)
    else:
        # exp(γ log q) keeps the gradient finite when q underflows and γ < 1
        pos_factor = torch.exp(params.gamma * log_q)
        neg_factor = torch.exp(params.gamma * log_p)
    positive = -params.alpha * pos_factor * log_p
    negative = -(1.0 - params.alpha) * neg_factor * log_q
    if literal:
        return positive + negative
    return targets[:, 1] * positive + targets[:, 0] * negative


def focal_loss(logits:Tensor, targets:Tensor, params:FocalParams=FocalParams(), reduction:str="sum",
               literal:bool=False) -> Tensor:
    """
    The focal loss of a batch.

    :param logits: ``batch × 2`` raw logits.
    :type logits: torch.Tensor.
    :param targets: ``batch × 2`` one-hot labels.
    :type targets: torch.Tensor.
    :param params: α and γ.
    :type params: FocalParams.
    :param reduction: "sum" over the batch, or "mean".
    :type reduction: str.
    :returns: torch.Tensor -- A scalar.
    """
    return _reduce(focal_terms(logits, targets, params, literal), reduction)


@dataclass(frozen=True)
class Objective:
    """
    The configured training objective: the loss of a batch with hard labels and
    the total loss of a MixAugment step (virtual term plus both real terms).
    ``kind`` selects the focal loss or one of the cross-entropy alternatives.
    """
    params: FocalParams = field(default_factory=FocalParams)
    kind: str = "focal"
    reduction: str = "sum"
    literal_eq2: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidParameter(f"Unknown loss kind '{self.kind}', expected one of {LOSS_KINDS}.")
        if self.reduction not in REDUCTIONS:
            raise InvalidParameter(f"Unknown reduction '{self.reduction}', expected one of {REDUCTIONS}.")

    @classmethod
    def from_config(cls, config:Dict[str, Any]) -> "Objective":
        loss = config["loss"]
        return cls(FocalParams(loss["alpha"], loss["gamma"]), loss["kind"], loss["reduction"], loss["literal_eq2"])

    def terms(self, logits:Tensor, targets:Tensor) -> Tensor:
        if self.kind == "focal":
            return focal_terms(logits, targets, self.params, self.literal_eq2)
        _check_logits(logits, targets)
        if self.kind == "categorical_ce":
            return -(targets * F.log_softmax(logits, dim=-1)).sum(dim=-1)
        return F.binary_cross_entropy_with_logits(logits[:, 1], targets[:, 1], reduction="none")

    def __call__(self, logits:Tensor, targets:Tensor) -> Tensor:
        return _reduce(self.terms(logits, targets), self.reduction)

    def total(self, logits_v:Tensor, logits_ri:Tensor, logits_rj:Tensor, y_i:Tensor, y_j:Tensor,
              lam:float) -> Tensor:
        if not 0.0 <= lam <= 1.0:
            raise InvalidParameter(f"λ must lie in [0, 1], got {lam}.")
        virtual = lam * self(logits_v, y_i) + (1.0 - lam) * self(logits_v, y_j)
        return virtual + self(logits_ri, y_i) + self(logits_rj, y_j)


def total_loss(logits_v:Tensor, logits_ri:Tensor, logits_rj:Tensor, y_i:Tensor, y_j:Tensor, lam:float,
               params:FocalParams=FocalParams(), reduction:str="sum", literal:bool=False) -> Tensor:
    """
    The loss of a MixAugment step: the focal loss of the virtual batch, decomposed
    as ``λ·FL(v, y_i) + (1-λ)·FL(v, y_j)``, plus the focal losses of both real batches.
    """
    return Objective(params, "focal", reduction, literal).total(logits_v, logits_ri, logits_rj, y_i, y_j, lam)


class MixedBatch(NamedTuple):
    """
    Model inputs of one training step. Virtual example ``k`` mixes real scans
    ``k`` and ``perm[k]`` with coefficient ``lam``; without MixAugment the
    virtual fields are None.
    """
    real_inputs: Dict[str, Tensor]
    real_lengths: Dict[str, Tensor]
    targets: Tensor
    virtual_inputs: Optional[Dict[str, Tensor]] = None
    virtual_lengths: Optional[Dict[str, Tensor]] = None
    perm: Optional[Tensor] = None
    lam: float = 1.0


def mixed_batch_loss(model:nn.Module, batch:MixedBatch, objective:Objective) -> Tuple[Tensor, Tensor]:
    """
    :returns: Tuple[torch.Tensor, torch.Tensor] -- The scalar loss and the logits of the real batch.
    """
    logits_r = model(batch.real_inputs, batch.real_lengths)
    if batch.virtual_inputs is None:
        return objective(logits_r, batch.targets), logits_r
    logits_v = model(batch.virtual_inputs, batch.virtual_lengths)
    loss = objective.total(logits_v, logits_r, logits_r[batch.perm], batch.targets, batch.targets[batch.perm],
                           batch.lam)
    return loss, logits_r


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    exact_zeros: int
    worst: Tuple[str, int]
    errors: List[float] = field(default_factory=list)

    def passed(self, tolerance:float=1e-4) -> bool:
        return self.max_rel_error < tolerance


def loss_gradient_check(model:nn.Module, batch:MixedBatch, objective:Objective, num_params:int=100,
                        step:float=1e-5, seed:int=0, scale_floor:float=1e-5) -> GradCheckReport:
    """
    Compare the analytic gradient of the loss with central finite differences
    on randomly selected scalar parameters. The relative error of one entry is
    ``|a - n| / max(|a|, |n|, scale_floor)``.

    :param model: A float64 model.
    :type model: torch.nn.Module.
    :param num_params: How many scalar parameters to check.
    :type num_params: int.
    :param step: The finite-difference step.
    :type step: float.
    :returns: GradCheckReport -- The worst relative error and where it occurred.
    """
    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    if any(p.dtype != torch.float64 for _, p in named):
        raise InvalidParameter("The gradient check needs a float64 model.")
    model.zero_grad()
    loss, _ = mixed_batch_loss(model, batch, objective)
    loss.backward()
    offsets = np.cumsum([0] + [p.numel() for _, p in named])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(num_params, int(offsets[-1])), replace=False)
    errors, exact_zeros, worst, worst_error = list(), 0, ("", -1), -1.0
    for flat_index in sorted(int(i) for i in picks):
        which = int(np.searchsorted(offsets, flat_index, side="right")) - 1
        name, param = named[which]
        index = flat_index - int(offsets[which])
        analytic = 0.0 if param.grad is None else float(param.grad.reshape(-1)[index])
        with torch.no_grad():
            flat = param.data.view(-1)
            original = float(flat[index])
            flat[index] = original + step
            loss_plus = float(mixed_batch_loss(model, batch, objective)[0])
            flat[index] = original - step
            loss_minus = float(mixed_batch_loss(model, batch, objective)[0])
            flat[index] = original
        numeric = (loss_plus - loss_minus) / (2.0 * step)
        if analytic == 0.0 and numeric == 0.0:
            exact_zeros += 1
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), scale_floor)
        errors.append(error)
        if error > worst_error:
            worst_error, worst = error, (name, index)
    return GradCheckReport(max(errors, default=0.0), len(errors), exact_zeros, worst, errors)
