"""Least-squares adversarial objectives and the pixel-wise L1 term."""

from dataclasses import dataclass

import torch

from .errors import DimensionError, ParameterError

__all__ = ["LossWeights", "d_loss", "g_adv_loss", "l1_loss", "generator_total_loss"]


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 100.0

    def __post_init__(self):
        if not (self.lambda_p >= 0 and self.lambda_p < float("inf")):
            raise ParameterError(f"lambda_p must be finite and >= 0, got {self.lambda_p}")


def _nonempty(x, name):
    x = torch.as_tensor(x)
    if x.numel() == 0:
        raise DimensionError(f"{name} is empty")
    return x


def d_loss(scores_real, scores_fake):
    """Discriminator objective ``mean((D(real) - 1)^2) + mean(D(fake)^2)``, minimized by D."""
    real = _nonempty(scores_real, "scores_real")
    fake = _nonempty(scores_fake, "scores_fake")
    return torch.mean((real - 1) ** 2) + torch.mean(fake ** 2)


def g_adv_loss(scores_fake):
    """Generator objective ``mean((D(G(x)) - 1)^2)``."""
    fake = _nonempty(scores_fake, "scores_fake")
    return torch.mean((fake - 1) ** 2)


def l1_loss(generated, reference):
    generated = _nonempty(generated, "generated")
    reference = torch.as_tensor(reference, dtype=generated.dtype)
    if generated.shape != reference.shape:
        raise DimensionError(f"shape mismatch {tuple(generated.shape)} vs {tuple(reference.shape)}")
    return torch.mean(torch.abs(generated - reference))


def generator_total_loss(l1, g_adv, weights=LossWeights()):
    return weights.lambda_p * l1 + g_adv
