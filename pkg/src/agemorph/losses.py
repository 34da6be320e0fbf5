"""Objective terms for the age transformer and its critic."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

COSINE_EPS = 1e-8


class NonFiniteLossError(RuntimeError):
    """A loss term went NaN or infinite; the message names the term."""


@dataclass(frozen=True)
class LossWeights:
    """Term weights plus the reconstruction-weight shape parameters."""

    lambda_adv: float = 1.0
    lambda_age: float = 0.05
    lambda_iden: float = 1.0
    lambda_cyc: float = 0.1
    lambda_rec: float = 0.1
    beta: float = 0.5
    age_range: float = 33.0

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_age", "lambda_iden", "lambda_cyc", "lambda_rec"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.beta <= 0.5:
            raise ValueError("beta must lie in [0, 0.5]")
        if self.age_range <= 0:
            raise ValueError("age_range must be positive")


def _as_stack(features) -> list[torch.Tensor]:
    if isinstance(features, torch.Tensor):
        return [features]
    return [torch.as_tensor(f) for f in features]


def feature_cosine(a, b) -> torch.Tensor:
    """Mean cosine similarity between two feature stacks.

    Each level is flattened per sample; cosines are averaged over the batch
    and then over levels. Plain tensors (or single vectors) are treated as
    one-level stacks. Denominators are floored at 1e-8.
    """
    sa, sb = _as_stack(a), _as_stack(b)
    if len(sa) != len(sb):
        raise ValueError(f"stacks have {len(sa)} vs {len(sb)} levels")
    sims = []
    for fa, fb in zip(sa, sb):
        if fa.shape != fb.shape:
            raise ValueError(f"level shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
        if fa.dim() == 1:
            fa, fb = fa.unsqueeze(0), fb.unsqueeze(0)
        fa = fa.reshape(fa.shape[0], -1)
        fb = fb.reshape(fb.shape[0], -1)
        dot = (fa * fb).sum(dim=1)
        denom = (fa.norm(dim=1) * fb.norm(dim=1)).clamp(min=COSINE_EPS)
        sims.append((dot / denom).mean())
    return torch.stack(sims).mean()


def identity_loss(
    f_iden,
    f_iden_hat,
    f_age,
    include_similarity: bool = True,
    include_orthogonality: bool = True,
) -> torch.Tensor:
    """Pull reconstructed identity toward the source, push it off the age axis.

    The similarity term maximises cosine(F_iden, F_iden_hat) with the source
    stack detached (only the reconstructed branch receives gradient); the
    orthogonality term minimises |cosine(F_iden, F_age)| with both live.
    """
    terms = []
    if include_similarity:
        detached = [f.detach() for f in _as_stack(f_iden)]
        terms.append(-feature_cosine(detached, f_iden_hat))
    if include_orthogonality:
        terms.append(feature_cosine(f_iden, f_age).abs())
    if not terms:
        raise ValueError("identity_loss needs at least one of its two terms")
    return sum(terms)


def cycle_loss(x: torch.Tensor, x_cycled: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between the source and its round trip."""
    if x.shape != x_cycled.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_cycled.shape)}")
    return (x - x_cycled).abs().mean()


def rec_weight(a_source, a_target, beta: float = 0.5, age_range: float = 33.0):
    """Cosine falloff of reconstruction pressure with age distance.

    beta * cos(pi * |a_s - a_t| / age_range) + (1 - beta): equals 1 at zero
    distance and approaches 1 - 2*beta as the distance nears the range.
    Accepts floats or tensors.
    """
    if isinstance(a_source, torch.Tensor) or isinstance(a_target, torch.Tensor):
        a_source = torch.as_tensor(a_source)
        a_target = torch.as_tensor(a_target, dtype=a_source.dtype)
        gap = (a_source - a_target).abs()
        return beta * torch.cos(math.pi * gap / age_range) + (1.0 - beta)
    gap = abs(float(a_source) - float(a_target))
    return beta * math.cos(math.pi * gap / age_range) + (1.0 - beta)


def rec_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    a_source,
    a_target,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Age-gap-weighted mean squared error, averaged over the batch."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    per_sample = (x - x_hat).pow(2).reshape(x.shape[0], -1).mean(dim=1)
    w = rec_weight(
        torch.as_tensor(a_source, dtype=per_sample.dtype),
        torch.as_tensor(a_target, dtype=per_sample.dtype),
        beta=weights.beta,
        age_range=weights.age_range,
    )
    return (w * per_sample).mean()


def adv_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares critic loss: real toward 1, fake toward 0."""
    return 0.5 * (real_scores - 1.0).pow(2).mean() + 0.5 * fake_scores.pow(2).mean()


def adv_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares generator loss: fake scores toward 1."""
    return (fake_scores - 1.0).pow(2).mean()


_TERM_KEYS = ("adv_g", "age1", "age2", "iden", "cyc", "rec")


def total_generator_loss(terms: dict, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted sum of the generator-side terms.

    ``terms`` maps term names (adv_g, age1, age2, iden, cyc, rec) to scalars;
    omitted terms contribute nothing, which is how ablations drop them. Any
    non-finite term (or total) raises NonFiniteLossError naming the term.
    """
    unknown = set(terms) - set(_TERM_KEYS)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    if not terms:
        raise ValueError("no loss terms given")
    for name, value in terms.items():
        finite = (
            bool(torch.isfinite(value).all())
            if isinstance(value, torch.Tensor)
            else math.isfinite(float(value))
        )
        if not finite:
            raise NonFiniteLossError(f"loss term {name} is not finite")

    lams = {
        "adv_g": weights.lambda_adv,
        "age1": weights.lambda_age,
        "age2": weights.lambda_age,
        "iden": weights.lambda_iden,
        "cyc": weights.lambda_cyc,
        "rec": weights.lambda_rec,
    }
    total = None
    for name in _TERM_KEYS:
        if name in terms:
            contrib = lams[name] * terms[name]
            total = contrib if total is None else total + contrib
    if not isinstance(total, torch.Tensor):
        total = torch.as_tensor(float(total), dtype=torch.float64)
    if not bool(torch.isfinite(total).all()):
        raise NonFiniteLossError("total generator loss is not finite")
    return total
