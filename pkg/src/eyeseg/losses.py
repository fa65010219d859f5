"""Scalar training objectives.

Stage 1 (shape prior): KL prior, feature reconstruction, and adversarial
terms for the VAE-GAN. Stage 2 (segmentation): soft IoU, shape embedding,
and shape discriminator terms combined into the final objective. Every loss
is a batch mean in minimization form; sigmoid outputs are clamped to
[1e-7, 1 - 1e-7] before logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

LOG_CLAMP = 1e-7


class TrainingDivergenceError(RuntimeError):
    """A loss became non-finite; training state is no longer trustworthy."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite segmentation objective and stage-1 extras."""

    lambda_1: float = 0.3   # shape embedding term
    lambda_2: float = 0.3   # shape discriminator term
    lambda_z: float = 1.0   # predicted-variance tolerance inside the embedding loss
    alpha: float = 1.0      # generator reconstruction weight in stage 1
    epsilon: float = 1e-8   # soft IoU denominator guard

    def validate(self) -> None:
        for name in ("lambda_1", "lambda_2", "lambda_z", "alpha"):
            v = getattr(self, name)
            if not (v >= 0 and torch.isfinite(torch.tensor(v))):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def soft_iou_loss(y_hat: torch.Tensor, y: torch.Tensor, epsilon: float = 1e-8) -> torch.Tensor:
    """1 minus the mean-over-classes soft IoU between probabilities and one-hot.

    Per class c: sum(y_hat_c * y_c) / (sum(y_hat_c) + sum(y_c) - sum(y_hat_c * y_c) + eps),
    with sums over batch and pixels. Averaging over all three classes keeps
    the dominant background from swamping the foreground classes.
    """
    _check_same_shape(y_hat, y, "soft_iou_loss")
    if y_hat.dim() == 3:
        y_hat, y = y_hat.unsqueeze(0), y.unsqueeze(0)
    if y_hat.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) tensors, got {y_hat.dim()} dims")
    dims = (0, 2, 3)
    inter = (y_hat * y).sum(dim=dims)
    union = y_hat.sum(dim=dims) + y.sum(dim=dims) - inter + epsilon
    return 1.0 - (inter / union).mean()


def kl_prior_loss(latent) -> torch.Tensor:
    """KL divergence of a diagonal Gaussian to the standard normal, batch mean.

    0.5 * sum_i (mu_i^2 + sigma_i^2 - 1 - 2*ln(sigma_i)). Accepts anything
    with `.mu` / `.sigma` attributes or a plain (mu, sigma) pair.
    """
    mu, sigma = (latent.mu, latent.sigma) if hasattr(latent, "mu") else latent
    _check_same_shape(mu, sigma, "kl_prior_loss")
    if (sigma <= 0).any():
        raise ValueError("sigma must be strictly positive")
    if mu.dim() == 1:
        mu, sigma = mu.unsqueeze(0), sigma.unsqueeze(0)
    per_sample = 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * torch.log(sigma)).sum(dim=1)
    return per_sample.mean()


def vaegan_rec_loss(feat_real: torch.Tensor, feat_fake: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between discriminator feature maps."""
    _check_same_shape(feat_real, feat_fake, "vaegan_rec_loss")
    return (feat_real - feat_fake).pow(2).mean()


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP))


def gan_losses(
    d_real: torch.Tensor, d_fake: torch.Tensor, d_sampled: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Adversarial objectives over three candidates, both in minimization form.

    The discriminator minimizes -[log D(y) + log(1-D(y_rec)) + log(1-D(y_smp))];
    the generator minimizes the non-saturating -[log D(y_rec) + log D(y_smp)].
    """
    d_real = torch.as_tensor(d_real)
    d_fake = torch.as_tensor(d_fake)
    d_sampled = torch.as_tensor(d_sampled)
    disc = -(
        _clamped_log(d_real).mean()
        + _clamped_log(1.0 - d_fake).mean()
        + _clamped_log(1.0 - d_sampled).mean()
    )
    gen = -(_clamped_log(d_fake).mean() + _clamped_log(d_sampled).mean())
    return disc, gen


def shape_embedding_loss(
    mu: torch.Tensor, mu_hat: torch.Tensor, sigma_hat: torch.Tensor, lambda_z: float = 1.0
) -> torch.Tensor:
    """Squared distance between latent means plus a weighted predicted-variance
    penalty, batch mean. The ground-truth variance term carries no gradient
    for the segmentation network and is omitted."""
    _check_same_shape(mu, mu_hat, "shape_embedding_loss")
    _check_same_shape(mu_hat, sigma_hat, "shape_embedding_loss")
    if (sigma_hat <= 0).any():
        raise ValueError("sigma_hat must be strictly positive")
    if mu.dim() == 1:
        mu, mu_hat, sigma_hat = mu.unsqueeze(0), mu_hat.unsqueeze(0), sigma_hat.unsqueeze(0)
    per_sample = (mu - mu_hat).pow(2).sum(dim=1) + lambda_z * sigma_hat.pow(2).sum(dim=1)
    return per_sample.mean()


def shape_discriminator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating adversarial pull on predicted masks: -log D(y_hat)."""
    return -_clamped_log(torch.as_tensor(d_fake)).mean()


def total_seg_loss(
    l_iou: torch.Tensor, l_z: torch.Tensor, l_disc: torch.Tensor, weights: LossWeights
) -> torch.Tensor:
    """Final segmentation objective: L_iou + lambda_1 * L_z + lambda_2 * L_disc."""
    for name, value in (("l_iou", l_iou), ("l_z", l_z), ("l_disc", l_disc)):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise TrainingDivergenceError(f"non-finite loss component {name}: {value}")
    return l_iou + weights.lambda_1 * l_z + weights.lambda_2 * l_disc


def cross_entropy_loss(y_hat: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Pixel-mean cross entropy on probability maps (baseline objective only)."""
    if y_hat.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) probabilities, got {y_hat.dim()} dims")
    logp = torch.log(y_hat.clamp_min(LOG_CLAMP))
    return torch.nn.functional.nll_loss(logp, labels)
