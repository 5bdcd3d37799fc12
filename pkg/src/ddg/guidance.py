"""Guidance math: confidence ranks, per-sample budgets, soft targets and the
weighted smoothness objective.

Everything here is a pure function of tensors. No model calls, no I/O.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, ValidationError

__all__ = [
    "GuidanceConfig",
    "ConfidenceRank",
    "BudgetVector",
    "relax_labels",
    "rank_confidence",
    "allocate_budgets",
    "uniform_budgets",
    "batch_accuracy",
    "most_probable_wrong_class",
    "adjust_supervision",
    "smoothness_weights",
    "loss_terms",
    "total_loss",
    "soft_cross_entropy",
]

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class GuidanceConfig:
    xi_base: float = 8 / 255
    kappa: float = 2 / 255
    tau1: int = 8
    gamma: float = 0.9
    lambda_w: float = 1.33
    alpha_w: float = 1.5
    num_classes: int = 10

    def __post_init__(self):
        if not 0 < self.xi_base <= 1:
            raise ConfigError(f"xi_base must lie in (0, 1], got {self.xi_base}")
        if self.kappa < 0:
            raise ConfigError(f"kappa must be >= 0, got {self.kappa}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if int(self.tau1) != self.tau1 or self.tau1 < 1:
            raise ConfigError(f"tau1 must be an integer >= 1, got {self.tau1}")
        if self.lambda_w < 0 or self.alpha_w < 0:
            raise ConfigError("lambda_w and alpha_w must be >= 0")
        if int(self.num_classes) != self.num_classes or self.num_classes < 2:
            raise ConfigError(f"num_classes must be an integer >= 2, got {self.num_classes}")

    def tau2(self, batch_size: int) -> int:
        """Upper transition point; always ``batch_size - tau1``."""
        if batch_size <= self.tau1:
            raise ConfigError(
                f"batch size {batch_size} must exceed tau1={self.tau1}"
            )
        return batch_size - self.tau1

    @property
    def max_budget(self) -> float:
        return self.xi_base + 2 * self.kappa


@dataclass(frozen=True)
class ConfidenceRank:
    confidences: torch.Tensor
    ranks: torch.Tensor  # 1-based, ascending in confidence


@dataclass(frozen=True)
class BudgetVector:
    xi: torch.Tensor

    @property
    def xi_max(self) -> float:
        return float(self.xi.max())

    @property
    def xi_min(self) -> float:
        return float(self.xi.min())

    def __len__(self):
        return self.xi.shape[0]


def _check_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    labels = torch.as_tensor(labels)
    if labels.ndim != 1:
        raise ValidationError(f"labels must be a vector, got shape {tuple(labels.shape)}")
    bad = ((labels < 0) | (labels >= num_classes)).nonzero().flatten()
    if bad.numel():
        i = int(bad[0])
        raise ValidationError(
            f"sample {i} has label {int(labels[i])} outside [0, {num_classes})"
        )
    return labels.long()


def _check_probs(probs: torch.Tensor, labels: torch.Tensor, atol: float = 1e-6):
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValidationError(
            f"probs shape {tuple(probs.shape)} does not match {labels.shape[0]} labels"
        )
    err = (probs.sum(dim=1) - 1).abs()
    if bool((err > atol).any()):
        i = int(err.argmax())
        raise ValidationError(f"probability row {i} sums to {float(probs[i].sum())}")


def relax_labels(labels, gamma: float, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """Mix one-hot labels with the uniform distribution:
    ``gamma * onehot + (1 - gamma) / L``."""
    if not 0 < gamma <= 1:
        raise ValidationError(f"gamma must lie in (0, 1], got {gamma}")
    labels = _check_labels(labels, num_classes)
    out = torch.full((labels.shape[0], num_classes), (1 - gamma) / num_classes, dtype=dtype)
    out[torch.arange(labels.shape[0]), labels] += gamma
    return out


def rank_confidence(probs: torch.Tensor, labels) -> ConfidenceRank:
    """Rank samples by true-class probability. Rank 1 is the least confident
    sample; ties keep batch order."""
    labels = _check_labels(labels, probs.shape[-1])
    _check_probs(probs, labels)
    conf = probs.gather(1, labels[:, None].to(probs.device)).squeeze(1)
    order = torch.sort(conf, stable=True).indices
    ranks = torch.empty_like(order)
    ranks[order] = torch.arange(1, conf.shape[0] + 1, device=order.device)
    return ConfidenceRank(confidences=conf, ranks=ranks)


def allocate_budgets(ranks: ConfidenceRank | torch.Tensor, cfg: GuidanceConfig,
                     batch_size: int | None = None) -> BudgetVector:
    """Per-sample L-inf radius from confidence rank:

        xi_i = xi_base + kappa * (tanh(r_i - tau1) - tanh(tau2 - r_i)),
        tau2 = B - tau1.
    """
    r = ranks.ranks if isinstance(ranks, ConfidenceRank) else torch.as_tensor(ranks)
    B = r.shape[0] if batch_size is None else batch_size
    tau2 = cfg.tau2(B)
    r = r.to(torch.float64)
    xi = cfg.xi_base + cfg.kappa * (torch.tanh(r - cfg.tau1) - torch.tanh(tau2 - r))
    return BudgetVector(xi)


def uniform_budgets(batch_size: int, xi: float) -> BudgetVector:
    return BudgetVector(torch.full((batch_size,), float(xi), dtype=torch.float64))


def batch_accuracy(probs: torch.Tensor, labels: torch.Tensor) -> float:
    return float((probs.argmax(dim=1) == labels).to(torch.float64).mean())


def most_probable_wrong_class(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    masked = probs.detach().clone()
    masked[torch.arange(labels.shape[0]), labels] = -torch.inf
    return masked.argmax(dim=1)


def adjust_supervision(relaxed: torch.Tensor, labels, adv_probs: torch.Tensor,
                       cfg: GuidanceConfig, pos_scale: float = 1.0,
                       neg_scale: float = 1.0, acc: float | None = None) -> torch.Tensor:
    """State-dependent targets.

    Correctly classified rows keep the relaxed label. A misclassified row gets
    ``+ pos_scale * gamma * (1 - Acc)`` on its true class and
    ``- neg_scale / L`` on its most probable wrong class. ``acc`` may be passed
    in so the caller logs the same batch accuracy that was used here.
    """
    labels = _check_labels(labels, relaxed.shape[1])
    _check_probs(adv_probs, labels)
    if pos_scale < 0 or neg_scale < 0:
        raise ValidationError("pos_scale and neg_scale must be >= 0")
    if acc is None:
        acc = batch_accuracy(adv_probs, labels)
    L = relaxed.shape[1]
    wrong = adv_probs.argmax(dim=1) != labels
    out = relaxed.clone()
    if not bool(wrong.any()):
        return out
    rows = wrong.nonzero().flatten()
    y_m = most_probable_wrong_class(adv_probs, labels)
    out[rows, labels[rows]] += pos_scale * cfg.gamma * (1 - acc)
    out[rows, y_m[rows]] -= neg_scale / L
    return out


def smoothness_weights(budgets: BudgetVector, misclassified, cfg: GuidanceConfig) -> torch.Tensor:
    """``lambda * (xi_max - xi) / (xi_max - xi_min) + alpha * wrong + 1``.

    When every budget is equal the balance fraction is 0.
    """
    xi = budgets.xi.to(torch.float64)
    span = xi.max() - xi.min()
    if float(span) > 0:
        frac = (xi.max() - xi) / span
    else:
        frac = torch.zeros_like(xi)
    wrong = torch.as_tensor(misclassified).to(torch.float64)
    return cfg.lambda_w * frac + cfg.alpha_w * wrong + 1.0


def soft_cross_entropy(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    logp = torch.log(probs.clamp_min(PROB_FLOOR))
    return -(targets.to(probs.dtype) * logp).sum() / probs.shape[0]


def loss_terms(adv_probs, init_probs, targets, weights) -> tuple[torch.Tensor, torch.Tensor]:
    """Return the (cross-entropy, smoothness) pair whose sum is the total loss."""
    if adv_probs.shape != init_probs.shape or adv_probs.shape != targets.shape:
        raise ValidationError(
            f"shape mismatch: adv {tuple(adv_probs.shape)}, init {tuple(init_probs.shape)}, "
            f"targets {tuple(targets.shape)}"
        )
    if weights.shape != (adv_probs.shape[0],):
        raise ValidationError(f"weights shape {tuple(weights.shape)} != ({adv_probs.shape[0]},)")
    ce = soft_cross_entropy(adv_probs, targets)
    dist = torch.linalg.vector_norm(init_probs - adv_probs, dim=1)
    smo = (weights.to(dist.dtype) * dist).sum() / adv_probs.shape[0]
    return ce, smo


def total_loss(adv_probs, init_probs, targets, weights) -> torch.Tensor:
    ce, smo = loss_terms(adv_probs, init_probs, targets, weights)
    return ce + smo
