"""The full translate -> register -> fuse model and its checkpoint mapping."""
from __future__ import annotations

from contextlib import contextmanager

import torch
import torch.nn as nn

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .cpstn import CPSTN, DiscriminatorConfig, TranslatorConfig
from .difn import DIFN, DIFNConfig
from .geometry import warp_tensor
from .mrrn import MRRN, MRRNConfig

SUBNETWORKS = ("cpstn.G_A", "cpstn.G_B", "cpstn.D_ir", "cpstn.D_vis", "mrrn", "difn")


class CGRPModel(nn.Module):
    """Translator, registration and fusion networks plus training bookkeeping."""

    def __init__(self, translator=TranslatorConfig(), discriminator=DiscriminatorConfig(),
                 mrrn=MRRNConfig(), difn=DIFNConfig()):
        super().__init__()
        self.cpstn = CPSTN(translator, discriminator)
        self.mrrn = MRRN(mrrn)
        self.difn = DIFN(difn)
        self.stages: list[str] = []
        self.step = 0

    @classmethod
    def create(cls, seed: int = 0, **configs) -> "CGRPModel":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(**configs)

    def configs(self) -> dict:
        return {
            "translator": self.cpstn.config.to_dict(),
            "discriminator": self.cpstn.disc_config.to_dict(),
            "mrrn": self.mrrn.config.to_dict(),
            "difn": self.difn.config.to_dict(),
        }

    def subnetwork(self, name: str) -> nn.Module:
        module = self
        for part in name.split("."):
            module = getattr(module, part)
        return module

    def to_checkpoint(self, extra=None) -> Checkpoint:
        return Checkpoint(dict(self.state_dict()), self.step, list(self.stages), self.configs(), dict(extra or {}))

    @classmethod
    def from_checkpoint(cls, ckpt) -> "CGRPModel":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        c = ckpt.configs
        try:
            model = cls(
                TranslatorConfig(**c["translator"]),
                DiscriminatorConfig(**c["discriminator"]),
                MRRNConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in c["mrrn"].items()}),
                DIFNConfig(**c["difn"]),
            )
            model.load_state_dict(ckpt.tensors, strict=True)
        except (KeyError, TypeError, RuntimeError) as exc:
            raise CheckpointError(f"checkpoint does not match the model layout: {exc}") from exc
        model.stages = list(ckpt.stages)
        model.step = ckpt.step
        return model

    @contextmanager
    def _ifm(self, enabled: bool):
        ifm = self.difn.ifm
        previous = ifm.use_ifm
        ifm.use_ifm = enabled and previous
        try:
            yield
        finally:
            ifm.use_ifm = previous

    @torch.no_grad()
    def infer(self, vis: torch.Tensor, ir: torch.Tensor, disable_cpstn: bool = False,
              disable_mrrn: bool = False, disable_ifm: bool = False) -> dict:
        """Run translate -> register -> fuse on ``(B, 1, H, W)`` tensors.

        ``disable_cpstn`` registers the infrared image directly against the
        visible image; ``disable_mrrn`` fuses the raw misaligned pair;
        ``disable_ifm`` replaces the attention gating by plain concatenation.
        """
        if vis.shape != ir.shape:
            raise ValueError(f"vis {tuple(vis.shape)} and ir {tuple(ir.shape)} differ in shape")
        was_training = self.training
        self.eval()
        try:
            pseudo = vis if disable_cpstn else self.cpstn.translate(vis, "vis->ir")
            if disable_mrrn:
                field = torch.zeros(ir.shape[0], 2, *ir.shape[-2:], dtype=ir.dtype)
                ir_reg = ir
            else:
                field, _ = self.mrrn(pseudo, ir)
                ir_reg = warp_tensor(ir, field).clamp(0.0, 1.0)
            with self._ifm(not disable_ifm):
                fused = self.difn(ir_reg, vis, clamp=True)
        finally:
            self.train(was_training)
        return {"pseudo_ir": pseudo, "field": field, "ir_reg": ir_reg, "fused": fused}


def count_params(model) -> dict:
    """Trainable parameter totals per sub-network, per component and overall.

    ``model`` may be a module, a :class:`CGRPModel`, a checkpoint or a path.
    For a plain module only ``total`` is reported.
    """
    if isinstance(model, (str, bytes)) or hasattr(model, "__fspath__") or isinstance(model, Checkpoint):
        model = CGRPModel.from_checkpoint(model)
    if not isinstance(model, CGRPModel):
        return {"total": sum(p.numel() for p in model.parameters() if p.requires_grad)}
    counts = {}
    for name in SUBNETWORKS:
        counts[name] = sum(p.numel() for p in model.subnetwork(name).parameters())
    counts["cpstn"] = sum(counts[n] for n in SUBNETWORKS if n.startswith("cpstn."))
    counts["registration+fusion"] = counts["mrrn"] + counts["difn"]
    counts["total"] = sum(counts[n] for n in SUBNETWORKS)
    return counts
