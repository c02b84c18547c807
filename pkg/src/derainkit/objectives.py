"""Loss functions and per-stage objective assembly.

The three quadratic losses share one penalty: mean over the batch of the
squared Frobenius norm of the residual (FROBENIUS_SUM), optionally divided
by the per-image element count (PER_PIXEL_MEAN, the default, which keeps
gradient magnitudes independent of patch size). The adversarial pair is the
standard two-player objective on sigmoid probability maps, with a
non-saturating generator variant as the default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import torch

from .errors import DomainError, ShapeMismatchError, StageInvariantError

EPSILON = 1e-7


class Reduction(Enum):
    PER_PIXEL_MEAN = "per_pixel_mean"
    FROBENIUS_SUM = "frobenius_sum"


class Stage(Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


class AdversarialVariant(Enum):
    NON_SATURATING = "non_saturating"
    MINIMAX = "minimax"


@dataclass
class StageObjective:
    stage: Stage
    lambda_background: float = 0.0
    lambda_rain: float = 0.0
    lambda_reconstruction: float = 0.0
    lambda_adversarial: float = 0.0
    reduction: Reduction = Reduction.PER_PIXEL_MEAN
    adversarial_variant: AdversarialVariant = AdversarialVariant.NON_SATURATING

    def __post_init__(self):
        for name in ("lambda_background", "lambda_rain",
                     "lambda_reconstruction", "lambda_adversarial"):
            if getattr(self, name) < 0:
                raise StageInvariantError(f"{name} must be nonnegative")
        if self.stage is Stage.PRETRAIN and self.lambda_adversarial != 0:
            raise StageInvariantError(
                "pretraining is fully supervised; lambda_adversarial must be 0"
            )
        if self.stage is Stage.FINETUNE and (
            self.lambda_background != 0 or self.lambda_rain != 0
        ):
            raise StageInvariantError(
                "fine-tuning has no layer supervision; lambda_background and "
                "lambda_rain must be 0"
            )

    @property
    def weights(self) -> dict[str, float]:
        return {
            "background": self.lambda_background,
            "rain": self.lambda_rain,
            "reconstruction": self.lambda_reconstruction,
            "adversarial": self.lambda_adversarial,
        }

    @classmethod
    def pretrain_default(cls, reduction=Reduction.PER_PIXEL_MEAN):
        return cls(Stage.PRETRAIN, lambda_background=1.0, lambda_rain=1.0,
                   lambda_reconstruction=1.0, reduction=reduction)

    @classmethod
    def finetune_default(cls, reduction=Reduction.PER_PIXEL_MEAN):
        return cls(Stage.FINETUNE, lambda_reconstruction=1.0,
                   lambda_adversarial=1.0, reduction=reduction)


@dataclass
class LossValue:
    total: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    def floats(self) -> dict[str, float]:
        out = {k: float(v) for k, v in self.components.items()}
        out["total"] = float(self.total)
        return out


def _quadratic(pred: torch.Tensor, target: torch.Tensor,
               reduction: Reduction) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )
    n = pred.shape[0]
    total = ((pred - target) ** 2).sum() / n
    if reduction is Reduction.PER_PIXEL_MEAN:
        total = total / pred[0].numel()
    return total


def loss_background(pred, target, reduction=Reduction.PER_PIXEL_MEAN):
    return _quadratic(pred, target, reduction)


def loss_rain(pred, target, reduction=Reduction.PER_PIXEL_MEAN):
    return _quadratic(pred, target, reduction)


def loss_reconstruction(pred, target, reduction=Reduction.PER_PIXEL_MEAN):
    return _quadratic(pred, target, reduction)


def _checked_prob(p: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(p).all():
        raise DomainError(f"{name} contains non-finite values")
    lo, hi = float(p.detach().min()), float(p.detach().max())
    if lo < 0.0 or hi > 1.0:
        raise DomainError(f"{name} values must lie in [0, 1]")
    return p.clamp(EPSILON, 1.0 - EPSILON)


def loss_adversarial_d(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """What the discriminator minimizes: -[E log D(real) + E log(1 - D(fake))]."""
    real = _checked_prob(d_real, "d_real")
    fake = _checked_prob(d_fake, "d_fake")
    return -(torch.log(real).mean() + torch.log(1.0 - fake).mean())


def loss_adversarial_g(d_fake: torch.Tensor,
                       variant=AdversarialVariant.NON_SATURATING) -> torch.Tensor:
    fake = _checked_prob(d_fake, "d_fake")
    if variant is AdversarialVariant.MINIMAX:
        return torch.log(1.0 - fake).mean()
    return -torch.log(fake).mean()


def stage_total(objective: StageObjective,
                components: dict[str, torch.Tensor]) -> LossValue:
    """Weighted sum of the supplied components, keeping the breakdown.

    Components with zero weight may be omitted; a weighted component that is
    missing counts as zero and is left out of the breakdown.
    """
    weights = objective.weights
    unknown = set(components) - set(weights)
    if unknown:
        raise StageInvariantError(f"unknown loss components {sorted(unknown)}")
    total = None
    kept = {}
    for name, weight in weights.items():
        if name not in components:
            continue
        kept[name] = components[name]
        if weight == 0:
            continue
        term = weight * components[name]
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    return LossValue(total=total, components=kept)
