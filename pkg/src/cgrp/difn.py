"""Dual-path residual-dense feature extraction and attention-gated fusion."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class DIFNConfig:
    width: int = 32
    growth: int = 16
    n_blocks: int = 2
    convs_per_block: int = 3
    use_ifm: bool = True
    tie_projections: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class DenseLayer(nn.Module):
    def __init__(self, cin, growth):
        super().__init__()
        self.conv = nn.Conv2d(cin, growth, 3, padding=1)
        self.act = nn.ReLU(True)

    def forward(self, x):
        return torch.cat([x, self.act(self.conv(x))], dim=1)


class ResidualDenseBlock(nn.Module):
    def __init__(self, width, growth, n_convs):
        super().__init__()
        self.dense = nn.Sequential(*[DenseLayer(width + i * growth, growth) for i in range(n_convs)])
        self.fuse = nn.Conv2d(width + n_convs * growth, width, 1)

    def forward(self, x):
        return x + self.fuse(self.dense(x))


class RDNPath(nn.Module):
    """Shallow conv, residual-dense blocks, global feature fusion and skip."""

    def __init__(self, config: DIFNConfig):
        super().__init__()
        w = config.width
        self.shallow = nn.Conv2d(1, w, 3, padding=1)
        self.blocks = nn.ModuleList(
            ResidualDenseBlock(w, config.growth, config.convs_per_block) for _ in range(config.n_blocks)
        )
        self.global_fuse = nn.Sequential(
            nn.Conv2d(config.n_blocks * w, w, 1), nn.Conv2d(w, w, 3, padding=1)
        )

    def forward(self, x):
        shallow = self.shallow(x)
        h, outs = shallow, []
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        return self.global_fuse(torch.cat(outs, dim=1)) + shallow


@dataclass
class DualFeatures:
    ir: torch.Tensor
    vis: torch.Tensor

    def __post_init__(self):
        if self.ir.shape != self.vis.shape:
            raise ValueError(f"feature shapes differ: {tuple(self.ir.shape)} vs {tuple(self.vis.shape)}")


class InteractionFusion(nn.Module):
    """Attention recalibration of both streams followed by a 3x3 reduction.

    ``att = sigmoid(proj_ir(f_ir) * proj_vis(f_vis))`` (one channel,
    broadcast over features); each stream becomes ``f * (1 + att)``; the
    two are concatenated and reduced to one channel. With ``use_ifm=False``
    the gating is skipped (plain concatenation).
    """

    def __init__(self, width, use_ifm=True, tie_projections=False):
        super().__init__()
        self.use_ifm = use_ifm
        self.proj_ir = nn.Conv2d(width, 1, 1)
        self.proj_vis = self.proj_ir if tie_projections else nn.Conv2d(width, 1, 1)
        self.reduce = nn.Conv2d(2 * width, 1, 3, padding=1)

    def attention(self, df: DualFeatures) -> torch.Tensor:
        return torch.sigmoid(self.proj_ir(df.ir) * self.proj_vis(df.vis))

    def activate(self, df: DualFeatures) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.use_ifm:
            return df.ir, df.vis
        gate = 1.0 + self.attention(df)
        return df.ir * gate, df.vis * gate

    def forward(self, df: DualFeatures, clamp: bool = True) -> torch.Tensor:
        f_ir, f_vis = self.activate(df)
        out = self.reduce(torch.cat([f_ir, f_vis], dim=1))
        return out.clamp(0.0, 1.0) if clamp else out


class DIFN(nn.Module):
    def __init__(self, config: DIFNConfig = DIFNConfig()):
        super().__init__()
        self.config = config
        self.path_ir = RDNPath(config)
        self.path_vis = RDNPath(config)
        self.ifm = InteractionFusion(config.width, config.use_ifm, config.tie_projections)

    def extract_dual(self, ir_reg: torch.Tensor, vis: torch.Tensor) -> DualFeatures:
        if ir_reg.shape != vis.shape:
            raise ValueError(f"ir_reg {tuple(ir_reg.shape)} and vis {tuple(vis.shape)} differ in shape")
        return DualFeatures(self.path_ir(ir_reg), self.path_vis(vis))

    def interact_fuse(self, df: DualFeatures, clamp: bool = True) -> torch.Tensor:
        return self.ifm(df, clamp=clamp)

    def forward(self, ir_reg: torch.Tensor, vis: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        return self.interact_fuse(self.extract_dual(ir_reg, vis), clamp=clamp)

    fuse = forward
