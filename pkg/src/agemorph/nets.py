"""Age-transformation networks.

The transformer is a U-shaped residual pipeline: a shared encoder pulls a
feature pyramid whose bottleneck also predicts an age distribution, an
identity extractor re-expresses every level without age content, a mapping
network embeds the target age, age-conditioned blocks re-inject it at every
level, and a decoder fuses the pyramid into a residual added to the input.
The decoder's final convolution starts at zero, so an untrained transformer
is exactly the identity map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .agecode import AgeCodeConfig
from .image import Image


@dataclass(frozen=True)
class NetworkConfig:
    dimensionality: int = 2
    channels: tuple[int, ...] = (16, 32, 64, 128)
    age_embed_dim: int = 64
    mapping_layers: int = 8
    critic_channels: tuple[int, ...] = (32, 64, 128, 256)

    def __post_init__(self):
        if self.dimensionality not in (2, 3):
            raise ValueError("dimensionality must be 2 or 3")
        for name in ("channels", "critic_channels"):
            chs = tuple(int(c) for c in getattr(self, name))
            if len(chs) < 2 or any(c < 1 for c in chs):
                raise ValueError(f"{name} needs at least two positive entries")
            object.__setattr__(self, name, chs)
        if self.age_embed_dim < 1 or self.mapping_layers < 1:
            raise ValueError("age_embed_dim and mapping_layers must be positive")

    @property
    def n_levels(self) -> int:
        return len(self.channels)

    @property
    def scale(self) -> int:
        """Input extents must be divisible by this after padding."""
        return 2 ** (self.n_levels - 1)


def _conv_cls(ndim):
    return nn.Conv2d if ndim == 2 else nn.Conv3d


def _bn_cls(ndim):
    return nn.BatchNorm2d if ndim == 2 else nn.BatchNorm3d


class ConvBlock(nn.Module):
    """Conv(3) -> BatchNorm -> PReLU (one slope per channel)."""

    def __init__(self, ndim, in_ch, out_ch):
        super().__init__()
        self.conv = _conv_cls(ndim)(in_ch, out_ch, kernel_size=3, padding=1)
        self.norm = _bn_cls(ndim)(out_ch)
        self.act = nn.PReLU(out_ch)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


def _double_conv(ndim, in_ch, out_ch):
    return nn.Sequential(ConvBlock(ndim, in_ch, out_ch), ConvBlock(ndim, out_ch, out_ch))


@dataclass
class EncoderFeatures:
    """Feature pyramid plus the bottleneck age prediction."""

    levels: list[torch.Tensor]
    age_logits: torch.Tensor

    @property
    def bottleneck(self) -> torch.Tensor:
        return self.levels[-1]

    def age_probs(self) -> torch.Tensor:
        return torch.softmax(self.age_logits, dim=-1)


class Encoder(nn.Module):
    """Contracting pyramid; the pooled bottleneck feeds an age classifier."""

    def __init__(self, net_cfg: NetworkConfig, age_cfg: AgeCodeConfig):
        super().__init__()
        ndim = net_cfg.dimensionality
        chs = net_cfg.channels
        self.levels = nn.ModuleList(
            _double_conv(ndim, 1 if i == 0 else chs[i - 1], chs[i])
            for i in range(len(chs))
        )
        self.pool = (nn.MaxPool2d if ndim == 2 else nn.MaxPool3d)(2)
        self.age_head = nn.Linear(chs[-1], age_cfg.n_bins)

    def forward(self, x) -> EncoderFeatures:
        feats = []
        h = x
        for i, level in enumerate(self.levels):
            if i > 0:
                h = self.pool(h)
            h = level(h)
            feats.append(h)
        pooled = feats[-1].flatten(2).mean(dim=2)
        return EncoderFeatures(levels=feats, age_logits=self.age_head(pooled))


class IdentityExtractor(nn.Module):
    """Shape-preserving re-encoding of every pyramid level."""

    def __init__(self, net_cfg: NetworkConfig):
        super().__init__()
        ndim = net_cfg.dimensionality
        self.levels = nn.ModuleList(
            _double_conv(ndim, c, c) for c in net_cfg.channels
        )

    def forward(self, features: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(features) != len(self.levels):
            raise ValueError(
                f"expected {len(self.levels)} levels, got {len(features)}"
            )
        return [level(f) for level, f in zip(self.levels, features)]


class MappingNetwork(nn.Module):
    """Stack of fully connected layers turning a scalar into an embedding."""

    def __init__(self, embed_dim: int, n_layers: int = 8, negative_slope: float = 0.2):
        super().__init__()
        layers = []
        in_dim = 1
        for _ in range(n_layers):
            layers.append(nn.Linear(in_dim, embed_dim))
            layers.append(nn.LeakyReLU(negative_slope))
            in_dim = embed_dim
        self.net = nn.Sequential(*layers)

    def forward(self, normalized_age: torch.Tensor) -> torch.Tensor:
        if normalized_age.dim() == 1:
            normalized_age = normalized_age.unsqueeze(1)
        return self.net(normalized_age)


class ConditionalNorm(nn.Module):
    """BatchNorm whose per-channel affine comes from a conditioning vector.

    The scale head is initialised to output exactly 1 and the shift head
    exactly 0, so the block starts as plain batch normalisation.
    """

    def __init__(self, ndim, channels, embed_dim):
        super().__init__()
        self.norm = _bn_cls(ndim)(channels, affine=False)
        self.scale = nn.Linear(embed_dim, channels)
        self.shift = nn.Linear(embed_dim, channels)
        nn.init.zeros_(self.scale.weight)
        nn.init.ones_(self.scale.bias)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)

    def forward(self, h, embedding):
        h = self.norm(h)
        shape = (h.shape[0], h.shape[1]) + (1,) * (h.dim() - 2)
        gamma = self.scale(embedding).reshape(shape)
        delta = self.shift(embedding).reshape(shape)
        return gamma * h + delta


class CondConvBlock(nn.Module):
    """Conv(3) -> conditional norm -> PReLU."""

    def __init__(self, ndim, channels, embed_dim):
        super().__init__()
        self.conv = _conv_cls(ndim)(channels, channels, kernel_size=3, padding=1)
        self.norm = ConditionalNorm(ndim, channels, embed_dim)
        self.act = nn.PReLU(channels)

    def forward(self, h, embedding):
        return self.act(self.norm(self.conv(h), embedding))


class AgeInjector(nn.Module):
    """Two conditioned conv blocks per level, preserving shapes."""

    def __init__(self, net_cfg: NetworkConfig):
        super().__init__()
        ndim = net_cfg.dimensionality
        self.levels = nn.ModuleList(
            nn.ModuleList(
                [
                    CondConvBlock(ndim, c, net_cfg.age_embed_dim),
                    CondConvBlock(ndim, c, net_cfg.age_embed_dim),
                ]
            )
            for c in net_cfg.channels
        )

    def forward(self, features: list[torch.Tensor], embedding: torch.Tensor):
        if len(features) != len(self.levels):
            raise ValueError(
                f"expected {len(self.levels)} levels, got {len(features)}"
            )
        out = []
        for (block_a, block_b), f in zip(self.levels, features):
            out.append(block_b(block_a(f, embedding), embedding))
        return out


class Generator(nn.Module):
    """Expanding path fusing the conditioned pyramid into a residual map."""

    def __init__(self, net_cfg: NetworkConfig):
        super().__init__()
        ndim = net_cfg.dimensionality
        chs = net_cfg.channels
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.stages = nn.ModuleList(
            _double_conv(ndim, chs[i] + chs[i + 1], chs[i])
            for i in reversed(range(len(chs) - 1))
        )
        self.final = _conv_cls(ndim)(chs[0], 1, kernel_size=3, padding=1)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        if len(features) != len(self.stages) + 1:
            raise ValueError(
                f"expected {len(self.stages) + 1} levels, got {len(features)}"
            )
        h = features[-1]
        for stage, skip in zip(self.stages, reversed(features[:-1])):
            h = stage(torch.cat([skip, self.up(h)], dim=1))
        return self.final(h)


class AgeTransformer(nn.Module):
    """Full pipeline: encode, strip age, embed target age, re-inject, decode.

    The output is clip(x + residual, 0, 1); with the decoder's zero-initialised
    final convolution the whole module is exactly the identity at init.
    """

    def __init__(self, net_cfg: NetworkConfig, age_cfg: AgeCodeConfig):
        super().__init__()
        self.net_cfg = net_cfg
        self.age_cfg = age_cfg
        self.encoder = Encoder(net_cfg, age_cfg)
        self.identity_extractor = IdentityExtractor(net_cfg)
        self.mapping = MappingNetwork(net_cfg.age_embed_dim, net_cfg.mapping_layers)
        self.age_injector = AgeInjector(net_cfg)
        self.generator = Generator(net_cfg)

    def _check_input(self, x: torch.Tensor) -> None:
        want = self.net_cfg.dimensionality + 2
        if x.dim() != want:
            raise ValueError(
                f"expected a (batch, 1, ...) tensor with {want} dims, got {x.dim()}"
            )
        if x.shape[1] != 1:
            raise ValueError(f"expected a single channel, got {x.shape[1]}")

    def _pad(self, x: torch.Tensor):
        """Replicate-pad spatial extents up to a multiple of the level scale."""
        m = self.net_cfg.scale
        spatial = x.shape[2:]
        lows = [((-n) % m) // 2 for n in spatial]
        pads = []  # F.pad wants (low, high) pairs for the last axis first
        for n, lo in zip(reversed(spatial), reversed(lows)):
            pads.extend([lo, (-n) % m - lo])
        if any(pads):
            x = F.pad(x, pads, mode="replicate")
        crops = tuple(slice(lo, lo + n) for lo, n in zip(lows, spatial))
        return x, crops

    def encode(self, x: torch.Tensor) -> EncoderFeatures:
        self._check_input(x)
        x, _ = self._pad(x)
        return self.encoder(x)

    def extract_identity(self, features: list[torch.Tensor]) -> list[torch.Tensor]:
        return self.identity_extractor(features)

    def embed_age(self, target_ages: torch.Tensor) -> torch.Tensor:
        dtype = self.mapping.net[0].weight.dtype
        ages = torch.as_tensor(target_ages, dtype=dtype)
        if ages.dim() == 0:
            ages = ages.unsqueeze(0)
        lo, hi = self.age_cfg.age_min, self.age_cfg.age_max
        if bool((ages < lo).any()) or bool((ages > hi).any()):
            raise ValueError(f"target ages must lie in [{lo}, {hi}]")
        normalized = (ages - lo) / (hi - lo)
        return self.mapping(normalized)

    def inject_age(self, identity_features, embedding) -> list[torch.Tensor]:
        return self.age_injector(identity_features, embedding)

    def generate(self, conditioned_features, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        x_padded, crops = self._pad(x)
        residual = self.generator(conditioned_features)
        if residual.shape != x_padded.shape:
            raise ValueError(
                f"residual shape {tuple(residual.shape)} does not match padded "
                f"input {tuple(x_padded.shape)}"
            )
        out = torch.clamp(x_padded + residual, 0.0, 1.0)
        return out[(slice(None), slice(None)) + crops]

    def forward(self, x: torch.Tensor, target_ages) -> torch.Tensor:
        feats = self.encode(x)
        identity = self.extract_identity(feats.levels)
        embedding = self.embed_age(target_ages)
        if embedding.shape[0] != x.shape[0]:
            if embedding.shape[0] == 1:
                embedding = embedding.expand(x.shape[0], -1)
            else:
                raise ValueError(
                    f"got {embedding.shape[0]} target ages for batch {x.shape[0]}"
                )
        conditioned = self.inject_age(identity, embedding)
        return self.generate(conditioned, x)


def transform_image(model: AgeTransformer, image, target_age: float) -> "Image":
    """Run one image (numpy or Image) through the model in eval mode."""
    data = image.data if isinstance(image, Image) else np.ascontiguousarray(image, dtype=np.float32)
    x = torch.from_numpy(data).unsqueeze(0).unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(x, torch.tensor([float(target_age)]))
    finally:
        model.train(was_training)
    return Image(out[0, 0].numpy())
