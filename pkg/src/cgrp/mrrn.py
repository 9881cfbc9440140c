"""Multi-level coarse-to-fine deformation field estimation and resampling."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import upsample_field, warp_tensor


@dataclass(frozen=True)
class MRRNConfig:
    """Widths per pyramid level (finest first) and estimator sizes.

    ``coarse_widths[k]`` is the hidden width of the coarse estimator at level
    ``k``; most capacity sits at the coarsest level where it is cheap.
    ``pad`` lets inputs that are not divisible by ``2 ** (K - 1)`` through by
    replicate-padding and cropping the field back.
    """

    level_widths: tuple[int, ...] = (16, 32, 64)
    coarse_widths: tuple[int, ...] = (32, 64, 176)
    refine_width: int = 32
    pad: bool = False
    warp_features: bool = True

    def __post_init__(self):
        if len(self.level_widths) < 1:
            raise ValueError("need at least one pyramid level")
        if len(self.coarse_widths) != len(self.level_widths):
            raise ValueError("coarse_widths and level_widths must have the same length")

    @property
    def levels(self) -> int:
        return len(self.level_widths)

    def to_dict(self) -> dict:
        return asdict(self)


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.LeakyReLU(0.1, True))


class FieldHead(nn.Module):
    """Three-layer convolution stack ending in a linear 2-plane output."""

    def __init__(self, cin, width):
        super().__init__()
        self.body = nn.Sequential(_conv(cin, width), _conv(width, width))
        self.out = nn.Conv2d(width, 2, 3, padding=1)
        nn.init.normal_(self.out.weight, std=1e-5)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(self.body(x))


@dataclass
class FeaturePyramid:
    """Per-level features of the two streams (finest level first).

    ``level(k)`` is the joint map: channel concatenation of the target
    (pseudo-infrared) and moving (distorted infrared) streams.
    """

    target: list[torch.Tensor]
    moving: list[torch.Tensor]

    def __len__(self):
        return len(self.target)

    def level(self, k: int) -> torch.Tensor:
        return torch.cat([self.target[k], self.moving[k]], dim=1)


@dataclass
class LevelFields:
    coarse: list[torch.Tensor]
    refined: list[torch.Tensor]


class SharedExtractor(nn.Module):
    def __init__(self, widths):
        super().__init__()
        self.stages = nn.ModuleList()
        cin = 1
        for k, w in enumerate(widths):
            stride = 1 if k == 0 else 2
            self.stages.append(nn.Sequential(_conv(cin, w, stride), _conv(w, w)))
            cin = w

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class MRRN(nn.Module):
    """Predicts the pull-field that registers the moving image onto the target.

    Levels are processed coarsest first. At each level the coarse head sees
    the joint features (moving stream pre-warped by the warm start when
    ``warp_features``) and adds the warm start; the refine head sees only the
    coarse field and adds a residual. The refined field, upsampled and scaled
    by 2, warm-starts the next finer level.
    """

    def __init__(self, config: MRRNConfig = MRRNConfig()):
        super().__init__()
        self.config = config
        self.extractor = SharedExtractor(config.level_widths)
        self.coarse = nn.ModuleList(
            FieldHead(2 * w, cw) for w, cw in zip(config.level_widths, config.coarse_widths)
        )
        self.refine = nn.ModuleList(FieldHead(2, config.refine_width) for _ in config.level_widths)

    @property
    def factor(self) -> int:
        return 2 ** (self.config.levels - 1)

    def extract_pyramid(self, target: torch.Tensor, moving: torch.Tensor) -> FeaturePyramid:
        if target.shape != moving.shape:
            raise ValueError(f"target {tuple(target.shape)} and moving {tuple(moving.shape)} differ")
        h, w = target.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ValueError(
                f"input {h}x{w} is not divisible by {self.factor}; enable MRRNConfig.pad to pad"
            )
        return FeaturePyramid(self.extractor(target), self.extractor(moving))

    def estimate_field(self, pyr: FeaturePyramid) -> tuple[LevelFields, torch.Tensor]:
        K = len(pyr)
        coarse = [None] * K
        refined = [None] * K
        warm = None
        for k in reversed(range(K)):
            moving = pyr.moving[k]
            if warm is not None and self.config.warp_features:
                moving = warp_tensor(moving, warm)
            joint = torch.cat([pyr.target[k], moving], dim=1)
            phi_c = self.coarse[k](joint)
            if warm is not None:
                phi_c = phi_c + warm
            phi_r = self.refine[k](phi_c) + phi_c
            coarse[k], refined[k] = phi_c, phi_r
            if k > 0:
                warm = upsample_field(phi_r, size=pyr.target[k - 1].shape[-2:])
        return LevelFields(coarse, refined), refined[0]

    def _pad(self, x):
        h, w = x.shape[-2:]
        ph = (-h) % self.factor
        pw = (-w) % self.factor
        return F.pad(x, (0, pw, 0, ph), mode="replicate"), (h, w)

    def forward(self, target: torch.Tensor, moving: torch.Tensor):
        """Return ``(field, level_fields)`` with ``field`` at input resolution."""
        size = None
        if self.config.pad:
            target, size = self._pad(target)
            moving, _ = self._pad(moving)
        levels, field = self.estimate_field(self.extract_pyramid(target, moving))
        if size is not None:
            field = field[..., : size[0], : size[1]]
        return field, levels

    @staticmethod
    def register(moving: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
        """Resample the moving (distorted) image with the predicted pull-field."""
        return warp_tensor(moving, field)


def zero_module(module: nn.Module) -> nn.Module:
    """Set every parameter of ``module`` to zero in place."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module
