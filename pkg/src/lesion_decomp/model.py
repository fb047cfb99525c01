"""Shared-encoder decomposition network and its critic.

One encoder ``E`` feeds two U-Net decoders: ``G1`` estimates the normal
version of the input and ``G2`` the lesion component.  Both end in Tanh.  The
critic ``D`` is a plain six-conv + one-linear CNN whose three stride-2 stages
are globally average-pooled and concatenated before the linear head.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadShapeError, InvalidSpecError


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 32
    depth: int = 4
    critic_channels: int = 16
    image_size: int = 64
    in_channels: int = 1
    lesion_decoder: bool = True

    def __post_init__(self):
        if self.depth < 2:
            raise InvalidSpecError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 8:
            raise InvalidSpecError(f"base_channels must be >= 8, got {self.base_channels}")
        if self.critic_channels < 1:
            raise InvalidSpecError("critic_channels must be >= 1")
        if self.image_size % (2 ** self.depth):
            raise InvalidSpecError(
                f"image_size {self.image_size} not divisible by 2**depth={2 ** self.depth}")

    @property
    def channels(self) -> List[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def _groups(ch: int) -> int:
    return 8 if ch % 8 == 0 else 1


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.LeakyReLU(0.2),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.LeakyReLU(0.2),
        )


class Encoder(nn.Module):
    """Returns the full feature pyramid, finest level first."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        ch = cfg.channels
        self.blocks = nn.ModuleList(
            [ConvBlock(cfg.in_channels, ch[0])]
            + [ConvBlock(ch[i - 1], ch[i]) for i in range(1, cfg.depth + 1)]
        )

    def forward(self, x):
        feats = []
        for i, block in enumerate(self.blocks):
            x = block(x if i == 0 else F.max_pool2d(x, 2))
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """U-Net expanding path with skip connections and a Tanh head."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        ch = cfg.channels
        levels = range(cfg.depth, 0, -1)
        self.up = nn.ModuleList([nn.ConvTranspose2d(ch[i], ch[i - 1], 2, stride=2) for i in levels])
        self.blocks = nn.ModuleList([ConvBlock(2 * ch[i - 1], ch[i - 1]) for i in levels])
        self.head = nn.Conv2d(ch[0], cfg.in_channels, 1)

    def forward(self, feats):
        h = feats[-1]
        for k, (up, block) in enumerate(zip(self.up, self.blocks)):
            h = block(torch.cat([up(h), feats[-2 - k]], dim=1))
        return torch.tanh(self.head(h))


class Critic(nn.Module):
    """Seven learnable layers; no batch-dependent normalization."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        c = cfg.critic_channels
        widths = [c, c, 2 * c, 2 * c, 4 * c, 4 * c]
        strides = [1, 2, 1, 2, 1, 2]
        convs, cin = [], cfg.in_channels
        for w, s in zip(widths, strides):
            convs.append(nn.Conv2d(cin, w, 3, stride=s, padding=1))
            cin = w
        self.convs = nn.ModuleList(convs)
        self.pooled_stages = (1, 3, 5)
        self.head_width = sum(widths[i] for i in self.pooled_stages)
        self.fc = nn.Linear(self.head_width, 1)

    def forward(self, x):
        pooled = []
        for i, conv in enumerate(self.convs):
            x = F.leaky_relu(conv(x), 0.2)
            if i in self.pooled_stages:
                pooled.append(x.mean(dim=(2, 3)))
        return self.fc(torch.cat(pooled, dim=1)).squeeze(1)


class DecompositionOutput(NamedTuple):
    normal_est: torch.Tensor
    lesion_est: torch.Tensor


class ModelBundle(nn.Module):
    """Parameters of E, G1, G2 and D plus the architecture that built them.

    With ``lesion_decoder=False`` there is no G2 and the lesion estimate is
    identically zero.
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.g1 = Decoder(cfg)
        self.g2 = Decoder(cfg) if cfg.lesion_decoder else None
        self.critic = Critic(cfg)

    def generator_parameters(self):
        mods = [self.encoder, self.g1] + ([self.g2] if self.g2 is not None else [])
        return [p for m in mods for p in m.parameters()]

    def critic_parameters(self):
        return list(self.critic.parameters())

    def check_input(self, x: torch.Tensor) -> None:
        stride = 2 ** self.config.depth
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise BadShapeError(f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[2] % stride or x.shape[3] % stride:
            raise BadShapeError(f"spatial dims {tuple(x.shape[2:])} not divisible by {stride}")

    def decompose(self, x: torch.Tensor) -> DecompositionOutput:
        self.check_input(x)
        feats = self.encoder(x)
        normal = self.g1(feats)
        lesion = self.g2(feats) if self.g2 is not None else torch.zeros_like(normal)
        return DecompositionOutput(normal, lesion)

    def normal_estimate(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.g1(self.encoder(x))

    def score(self, x: torch.Tensor) -> torch.Tensor:
        size = self.config.image_size
        if x.dim() != 4 or x.shape[1] != self.config.in_channels or tuple(x.shape[2:]) != (size, size):
            raise BadShapeError(f"critic expects (B, {self.config.in_channels}, {size}, {size}), "
                                f"got {tuple(x.shape)}")
        return self.critic(x)


def build_model(cfg: ArchConfig, seed: int = 0) -> ModelBundle:
    """Build a bundle whose initial weights depend only on ``(cfg, seed)``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ModelBundle(cfg)


def forward_decompose(bundle: ModelBundle, x: torch.Tensor) -> DecompositionOutput:
    return bundle.decompose(x)


def forward_critic(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    return bundle.score(x)


def compose_roi(estimate: torch.Tensor, x: torch.Tensor, roi: Optional[torch.Tensor]) -> torch.Tensor:
    """Keep ``estimate`` inside the ROI and the input's fill value outside it."""
    if roi is None:
        return estimate
    return torch.where(roi, estimate, x)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
