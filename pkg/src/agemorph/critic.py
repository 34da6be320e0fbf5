"""Age-conditional patch critic.

A strided convolutional stack scoring overlapping patches (least-squares
objective, so no sigmoid). The target age enters once, through a
conditional-normalisation block right after the first convolution, driven
by the critic's own mapping network. The unconditional variant used by one
ablation keeps the same topology with a plain norm in that slot.
"""
from __future__ import annotations

import torch
from torch import nn

from .agecode import AgeCodeConfig
from .nets import ConditionalNorm, MappingNetwork, NetworkConfig, _bn_cls, _conv_cls


class PatchCritic(nn.Module):
    def __init__(
        self,
        net_cfg: NetworkConfig,
        age_cfg: AgeCodeConfig,
        conditional: bool = True,
    ):
        super().__init__()
        self.age_cfg = age_cfg
        self.conditional = conditional
        ndim = net_cfg.dimensionality
        chs = net_cfg.critic_channels

        self.mapping = (
            MappingNetwork(net_cfg.age_embed_dim, net_cfg.mapping_layers)
            if conditional
            else None
        )
        self.entry = _conv_cls(ndim)(1, chs[0], kernel_size=4, stride=2, padding=1)
        if conditional:
            self.entry_norm = ConditionalNorm(ndim, chs[0], net_cfg.age_embed_dim)
        else:
            self.entry_norm = _bn_cls(ndim)(chs[0])
        self.act = nn.LeakyReLU(0.2)
        self.body = nn.Sequential(
            *[
                nn.Sequential(
                    _conv_cls(ndim)(chs[i], chs[i + 1], kernel_size=4, stride=2, padding=1),
                    nn.LeakyReLU(0.2),
                )
                for i in range(len(chs) - 1)
            ]
        )
        self.head = _conv_cls(ndim)(chs[-1], 1, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor, ages=None) -> torch.Tensor:
        """Score map for a batch; ages are required iff the critic is conditional."""
        if self.conditional:
            if ages is None:
                raise ValueError("conditional critic needs target ages")
            ages_t = torch.as_tensor(ages, dtype=torch.float32)
            if ages_t.dim() == 0:
                ages_t = ages_t.unsqueeze(0)
            lo, hi = self.age_cfg.age_min, self.age_cfg.age_max
            if bool((ages_t < lo).any()) or bool((ages_t > hi).any()):
                raise ValueError(f"ages must lie in [{lo}, {hi}]")
            embedding = self.mapping((ages_t - lo) / (hi - lo))
            h = self.act(self.entry_norm(self.entry(x), embedding))
        else:
            h = self.act(self.entry_norm(self.entry(x)))
        return self.head(self.body(h))
