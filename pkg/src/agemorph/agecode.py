"""Soft-label age encoding.

Ages are represented as discrete probability distributions over one-year
bins. A scalar age maps to a Gaussian bump centred on its bin; distributions
at the range edges are truncated to the valid bins and renormalised.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

PRED_FLOOR = 1e-12


@dataclass(frozen=True)
class AgeCodeConfig:
    """Age range, bin width, and soft-label spread."""

    age_min: int = 48
    age_max: int = 80
    bin_width: int = 1
    sigma: float = 1.0

    def __post_init__(self):
        if self.age_min >= self.age_max:
            raise ValueError("age_min must be below age_max")
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if (self.age_max - self.age_min) % self.bin_width != 0:
            raise ValueError("age range must be a whole number of bins")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def n_bins(self) -> int:
        return (self.age_max - self.age_min) // self.bin_width + 1

    @property
    def bin_centers(self) -> np.ndarray:
        return self.age_min + self.bin_width * np.arange(self.n_bins, dtype=np.float64)


def _check_age_in_range(age: float, cfg: AgeCodeConfig) -> None:
    if not np.isfinite(age) or age < cfg.age_min or age > cfg.age_max:
        raise ValueError(
            f"age {age} outside supported range [{cfg.age_min}, {cfg.age_max}]"
        )


def soft_label(age: float, cfg: AgeCodeConfig = AgeCodeConfig()) -> np.ndarray:
    """Gaussian soft label for a scalar age.

    Weights exp(-(c_k - age)^2 / (2 sigma^2)) over the in-range bin centers
    c_k, renormalised to sum to one.
    """
    _check_age_in_range(age, cfg)
    centers = cfg.bin_centers
    w = np.exp(-((centers - float(age)) ** 2) / (2.0 * cfg.sigma**2))
    return w / w.sum()


def soft_label_batch(ages, cfg: AgeCodeConfig = AgeCodeConfig()) -> np.ndarray:
    """Stack of soft labels, one row per age."""
    return np.stack([soft_label(float(a), cfg) for a in np.asarray(ages).ravel()])


def kl_age_loss(pred, target):
    """KL divergence KL(target || pred), summed over bins.

    Both arguments are probability vectors (or batches of them, one row per
    sample; batches reduce to the mean over samples). Accepts torch tensors,
    in which case the result is a tensor differentiable w.r.t. ``pred``, or
    numpy arrays, in which case it returns a float. ``pred`` entries are
    floored at 1e-12 before the log.
    """
    if isinstance(pred, torch.Tensor) or isinstance(target, torch.Tensor):
        pred_t = torch.as_tensor(pred)
        target_t = torch.as_tensor(target, dtype=pred_t.dtype, device=pred_t.device)
        if pred_t.shape != target_t.shape:
            raise ValueError(
                f"distribution length mismatch: {tuple(pred_t.shape)} vs "
                f"{tuple(target_t.shape)}"
            )
        pred_t = pred_t.clamp(min=PRED_FLOOR)
        kl = torch.xlogy(target_t, target_t) - torch.xlogy(target_t, pred_t)
        per_sample = kl.sum(dim=-1)
        return per_sample.mean()

    pred_a = np.asarray(pred, dtype=np.float64)
    target_a = np.asarray(target, dtype=np.float64)
    if pred_a.shape != target_a.shape:
        raise ValueError(
            f"distribution length mismatch: {pred_a.shape} vs {target_a.shape}"
        )
    pred_a = np.maximum(pred_a, PRED_FLOOR)
    kl = np.where(target_a > 0.0, target_a * np.log(target_a / pred_a), 0.0)
    return float(kl.sum(axis=-1).mean())


def expected_age(dist, cfg: AgeCodeConfig = AgeCodeConfig()) -> float:
    """Mean of the bin centers under a probability vector."""
    p = np.asarray(
        dist.detach().cpu().numpy() if isinstance(dist, torch.Tensor) else dist,
        dtype=np.float64,
    )
    if p.ndim != 1:
        raise ValueError("expected_age takes a single distribution; see expected_age_batch")
    if p.shape[-1] != cfg.n_bins:
        raise ValueError(f"expected {cfg.n_bins} bins, got {p.shape[-1]}")
    return float(p @ cfg.bin_centers)


def expected_age_batch(dists, cfg: AgeCodeConfig = AgeCodeConfig()) -> np.ndarray:
    """Expected age per row of a batch of probability vectors."""
    p = np.asarray(
        dists.detach().cpu().numpy() if isinstance(dists, torch.Tensor) else dists,
        dtype=np.float64,
    )
    if p.shape[-1] != cfg.n_bins:
        raise ValueError(f"expected {cfg.n_bins} bins, got {p.shape[-1]}")
    return p @ cfg.bin_centers


def normalize_age(age: float, cfg: AgeCodeConfig = AgeCodeConfig()) -> float:
    """Affine map of the age range onto [0, 1]."""
    _check_age_in_range(age, cfg)
    return (float(age) - cfg.age_min) / (cfg.age_max - cfg.age_min)
