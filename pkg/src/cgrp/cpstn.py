"""Cycle-consistent visible <-> infrared translators and patch discriminators."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

NORMS = {
    "instance": lambda c: nn.InstanceNorm2d(c, affine=False),
    "batch": nn.BatchNorm2d,
    "none": lambda c: nn.Identity(),
}


@dataclass(frozen=True)
class TranslatorConfig:
    base_width: int = 16
    depth: int = 2
    n_res_blocks: int = 9
    norm: str = "instance"
    out_activation: str = "tanh"

    def __post_init__(self):
        if self.n_res_blocks < 1:
            raise ValueError("n_res_blocks must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {sorted(NORMS)}")
        if self.out_activation not in ("tanh", "sigmoid"):
            raise ValueError("out_activation must be 'tanh' or 'sigmoid'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_width: int = 64
    n_layers: int = 3
    norm: str = "instance"
    padding: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


class ResnetBlock(nn.Module):
    def __init__(self, channels, norm):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            NORMS[norm](channels),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            NORMS[norm](channels),
        )

    def forward(self, x):
        return x + self.body(x)


class UNetResGenerator(nn.Module):
    """U-shaped encoder/decoder with residual blocks at the bottleneck.

    Maps a ``(B, 1, H, W)`` image in [0, 1] to one in [0, 1]. H and W must be
    divisible by ``2 ** depth``.
    """

    def __init__(self, config: TranslatorConfig = TranslatorConfig()):
        super().__init__()
        self.config = config
        c, norm = config.base_width, config.norm
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(1, c, 7), NORMS[norm](c), nn.ReLU(True)
        )
        self.down = nn.ModuleList()
        widths = [c]
        for i in range(config.depth):
            cin, cout = c * 2**i, c * 2 ** (i + 1)
            self.down.append(
                nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1), NORMS[norm](cout), nn.ReLU(True))
            )
            widths.append(cout)
        bottleneck = widths[-1]
        self.blocks = nn.Sequential(*[ResnetBlock(bottleneck, norm) for _ in range(config.n_res_blocks)])
        self.up = nn.ModuleList()
        for i in reversed(range(config.depth)):
            cin, cout = widths[i + 1], widths[i]
            # input is the upsampled features concatenated with the skip
            self.up.append(
                nn.ModuleDict({
                    "upconv": nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1),
                    "merge": nn.Sequential(
                        nn.Conv2d(2 * cout, cout, 3, padding=1), NORMS[norm](cout), nn.ReLU(True)
                    ),
                })
            )
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c, 1, 7))

    def forward(self, x):
        factor = 2**self.config.depth
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"input size {tuple(x.shape[-2:])} must be divisible by {factor}")
        h = self.stem(x)
        skips = [h]
        for layer in self.down:
            h = layer(h)
            skips.append(h)
        h = self.blocks(h)
        for layer, skip in zip(self.up, reversed(skips[:-1])):
            h = layer["upconv"](h)
            h = layer["merge"](torch.cat([h, skip], dim=1))
        out = self.head(h)
        if self.config.out_activation == "tanh":
            return (torch.tanh(out) + 1.0) / 2.0
        return torch.sigmoid(out)


class PatchDiscriminator(nn.Module):
    """Patch-level realness scores; with 3 layers the receptive field is 70x70."""

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        c, p, norm = config.base_width, config.padding, config.norm
        layers = [nn.Conv2d(1, c, 4, stride=2, padding=p), nn.LeakyReLU(0.2, True)]
        mult = 1
        for i in range(1, config.n_layers + 1):
            prev, mult = mult, min(2**i, 8)
            stride = 2 if i < config.n_layers else 1
            layers += [
                nn.Conv2d(c * prev, c * mult, 4, stride=stride, padding=p),
                NORMS[norm](c * mult),
                nn.LeakyReLU(0.2, True),
            ]
        layers.append(nn.Conv2d(c * mult, 1, 4, stride=1, padding=p))
        self.model = nn.Sequential(*layers)

    def output_size(self, n: int) -> int:
        """Spatial size of the score map for an ``n``-pixel input side."""
        for m in self.model:
            if isinstance(m, nn.Conv2d):
                n = (n + 2 * m.padding[0] - m.kernel_size[0]) // m.stride[0] + 1
        return n

    def forward(self, x):
        return self.model(2.0 * x - 1.0)


@dataclass
class CyclePaths:
    """Outputs of the two cycle routes.

    ``fake_ir = G_A(vis)``, ``fake_vis = G_B(ir)``, ``rec_ir = G_A(fake_vis)``,
    ``rec_vis = G_B(fake_ir)``. The cycle reconstructions of the inputs are
    the same tensors as ``rec_vis`` / ``rec_ir``.
    """

    fake_ir: torch.Tensor
    fake_vis: torch.Tensor
    rec_ir: torch.Tensor
    rec_vis: torch.Tensor

    @property
    def cycle_vis(self) -> torch.Tensor:
        return self.rec_vis

    @property
    def cycle_ir(self) -> torch.Tensor:
        return self.rec_ir

    def as_dict(self) -> dict:
        return {
            "fake_ir": self.fake_ir, "fake_vis": self.fake_vis,
            "rec_ir": self.rec_ir, "rec_vis": self.rec_vis,
            "cycle_vis": self.cycle_vis, "cycle_ir": self.cycle_ir,
        }


class CPSTN(nn.Module):
    """Translator pair ``G_A: vis -> ir`` and ``G_B: ir -> vis`` with discriminators."""

    def __init__(self, config: TranslatorConfig = TranslatorConfig(),
                 disc_config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        self.disc_config = disc_config
        self.G_A = UNetResGenerator(config)
        self.G_B = UNetResGenerator(config)
        self.D_ir = PatchDiscriminator(disc_config)
        self.D_vis = PatchDiscriminator(disc_config)

    def generators(self):
        return [self.G_A, self.G_B]

    def discriminators(self):
        return [self.D_ir, self.D_vis]

    def forward_cycles(self, vis: torch.Tensor, ir: torch.Tensor) -> CyclePaths:
        if vis.shape != ir.shape:
            raise ValueError(f"vis {tuple(vis.shape)} and ir {tuple(ir.shape)} differ in shape")
        fake_ir = self.G_A(vis)
        fake_vis = self.G_B(ir)
        return CyclePaths(fake_ir, fake_vis, self.G_A(fake_vis), self.G_B(fake_ir))

    @torch.no_grad()
    def translate(self, img: torch.Tensor, direction: str = "vis->ir") -> torch.Tensor:
        """Inference-mode translation; output clamped to [0, 1]."""
        gen = {"vis->ir": self.G_A, "ir->vis": self.G_B}.get(direction)
        if gen is None:
            raise ValueError(f"direction must be 'vis->ir' or 'ir->vis', got {direction!r}")
        was_training = gen.training
        gen.eval()
        try:
            return gen(img).clamp(0.0, 1.0)
        finally:
            gen.train(was_training)

    def discriminate(self, img: torch.Tensor, domain: str) -> torch.Tensor:
        disc = {"ir": self.D_ir, "vis": self.D_vis}.get(domain)
        if disc is None:
            raise ValueError(f"domain must be 'ir' or 'vis', got {domain!r}")
        return disc(img)


class IdentityTranslator(nn.Module):
    """Stub generator that returns its input (no parameters)."""

    def forward(self, x):
        return x
