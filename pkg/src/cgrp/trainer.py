"""Staged optimisation, run ledger, checkpoints and efficiency counters."""
from __future__ import annotations

import logging
import math
import resource
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .datasets import sample_batch
from .geometry import warp_tensor
from .losses import (
    LossWeights,
    VGGFeatures,
    cross_terms,
    fusion_terms,
    gan_loss,
    pst_terms,
    registration_terms,
    total_loss,
    format_record,
)
from .pipeline import CGRPModel, count_params

logger = logging.getLogger(__name__)

STAGES = ("cpstn", "mrrn", "difn", "joint")
PSEUDO_SOURCES = ("cpstn", "visible", "aligned")


class MissingStageError(RuntimeError):
    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage '{stage}' requires a checkpoint that completed stage '{missing}'")
        self.missing = missing


@dataclass
class TrainConfig:
    """Optimisation settings for one training stage.

    An epoch is ``ceil(n_records / batch_size)`` steps; ``max_steps`` caps
    the run (desk-scale use). ``pseudo_source`` picks the registration
    target: the trained translator, the visible image itself (translator
    ablation) or the ground-truth aligned infrared image (oracle runs).
    """

    stage: str = "cpstn"
    batch_size: int = 8
    patch: int = 256
    epochs: int = 300
    max_steps: int | None = None
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    checkpoint_every: int = 0
    pseudo_source: str = "cpstn"
    reg_grad_to_cpstn: bool = False
    use_ifm: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    backbone_weights: str = "imagenet"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.pseudo_source not in PSEUDO_SOURCES:
            raise ValueError(f"pseudo_source must be one of {PSEUDO_SOURCES}")
        if isinstance(self.loss, dict):
            self.loss = LossWeights.from_dict(self.loss)
        self.betas = tuple(self.betas)

    def steps(self, n_records: int) -> int:
        total = self.epochs * math.ceil(n_records / self.batch_size)
        return min(total, self.max_steps) if self.max_steps is not None else total

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["betas"] = list(self.betas)
        return d


@dataclass
class RunLedger:
    """Per-step loss breakdown and timing, plus parameter counts."""

    records: list = field(default_factory=list)
    param_counts: dict = field(default_factory=dict)
    peak_memory_kb: int | None = None
    stream_path: Path | None = None

    def log(self, step: int, stage: str, values: dict, seconds: float) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError(f"step counter must increase (got {step} after {self.records[-1]['step']})")
        rec = {"step": step, "stage": stage, "seconds": seconds, **values}
        self.records.append(rec)
        self.peak_memory_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
        if self.stream_path is not None:
            with open(self.stream_path, "a") as fh:
                fh.write(format_record(step, {**values, "seconds": seconds}, stage=stage) + "\n")

    def losses(self, key: str = "L_total") -> list[float]:
        return [r[key] for r in self.records if key in r]


def _requirements(config: TrainConfig) -> list[str]:
    needs_cpstn = config.pseudo_source == "cpstn"
    if config.stage == "cpstn":
        return []
    if config.stage == "mrrn":
        return ["cpstn"] if needs_cpstn else []
    if config.stage == "difn":
        return (["cpstn"] if needs_cpstn else []) + ["mrrn"]
    return ["cpstn", "mrrn", "difn"]


def check_prerequisites(config: TrainConfig, model: CGRPModel) -> None:
    for stage in _requirements(config):
        if stage not in model.stages and "joint" not in model.stages:
            raise MissingStageError(config.stage, stage)


def _batch_tensors(batch: dict) -> dict:
    t = lambda a: torch.from_numpy(a).unsqueeze(1)
    return {
        "vis": t(batch["vis"]),
        "ir": t(batch["ir_distorted"]),
        "aligned": t(batch["ir_aligned"]),
        "gt_field": torch.from_numpy(batch["gt_field"]),
    }


class StageTrainer:
    """Runs one stage on a :class:`CGRPModel` (mutates its weights)."""

    def __init__(self, model: CGRPModel, config: TrainConfig, backbone: VGGFeatures | None = None):
        self.model = model
        self.config = config
        self.w = config.loss
        if backbone is None and config.stage != "difn":
            backbone = VGGFeatures(self.w.layer_ids, weights=config.backbone_weights)
        self.backbone = backbone
        stage = config.stage
        gen_params, disc_params = [], []
        if stage in ("cpstn", "joint"):
            gen_params += list(model.cpstn.G_A.parameters()) + list(model.cpstn.G_B.parameters())
            disc_params = list(model.cpstn.D_ir.parameters()) + list(model.cpstn.D_vis.parameters())
        if stage in ("mrrn", "joint"):
            gen_params += list(model.mrrn.parameters())
        if stage in ("difn", "joint"):
            gen_params += list(model.difn.parameters())
        trainable = {id(p) for p in gen_params + disc_params}
        for p in model.parameters():
            p.requires_grad_(id(p) in trainable)
        opt = dict(lr=config.lr, betas=config.betas)
        self.opt = torch.optim.Adam(gen_params, **opt)
        self.opt_d = torch.optim.Adam(disc_params, **opt) if disc_params else None
        model.difn.ifm.use_ifm = config.use_ifm and model.difn.config.use_ifm

    def _target(self, b: dict, need_grad: bool) -> torch.Tensor:
        src = self.config.pseudo_source
        if src == "visible":
            return b["vis"]
        if src == "aligned":
            return b["aligned"]
        if need_grad:
            return self.model.cpstn.G_A(b["vis"])
        with torch.no_grad():
            return self.model.cpstn.G_A(b["vis"])

    def _translation(self, b, comps, values):
        cp = self.model.cpstn
        paths = cp.forward_cycles(b["vis"], b["ir"])
        pst = pst_terms(paths, b["vis"], b["ir"], self.backbone, self.w)
        crs = cross_terms(paths, self.w)
        g, _ = gan_loss([], [], [cp.D_ir(paths.fake_ir), cp.D_vis(paths.fake_vis)])
        comps["L_pst"] = self.w.perceptual * pst["pcp"] + self.w.style * pst["sty"]
        comps["L_cross"] = self.w.content * crs["con"] + self.w.edge * crs["edge"]
        comps["L_GAN"] = self.w.gan * g
        values.update({k: float(v.detach()) for k, v in {**pst, **crs, "gan_g": g}.items()})
        return paths

    def _registration(self, b, target, comps, values):
        field, _ = self.model.mrrn(target, b["ir"])
        ir_reg = warp_tensor(b["ir"], field)
        reg = registration_terms(ir_reg, target, b["ir"], field, self.backbone, self.w)
        comps["L_reg"] = reg["sim_fwd"] + self.w.reverse * reg["sim_bwd"] + self.w.smooth * reg["smooth"]
        values.update({k: float(v.detach()) for k, v in reg.items()})
        return field, ir_reg

    def _fusion(self, b, ir_reg, comps, values):
        fus = self.model.difn(ir_reg, b["vis"], clamp=False)
        fu = fusion_terms(fus, ir_reg, b["vis"], self.w)
        comps["L_fus"] = self.w.ssim * fu["ssim"] + self.w.joint_grad * fu["jgrad"] + self.w.saliency * fu["svs"]
        values.update({k: float(v.detach()) for k, v in fu.items()})

    def step(self, batch: dict) -> dict:
        b = _batch_tensors(batch)
        stage = self.config.stage
        comps, values = {}, {}
        paths = None
        self.opt.zero_grad(set_to_none=True)
        if stage in ("cpstn", "joint"):
            paths = self._translation(b, comps, values)
        if stage == "mrrn":
            self._registration(b, self._target(b, need_grad=False), comps, values)
        elif stage == "difn":
            with torch.no_grad():
                field, _ = self.model.mrrn(self._target(b, need_grad=False), b["ir"])
                ir_reg = warp_tensor(b["ir"], field)
            self._fusion(b, ir_reg, comps, values)
        elif stage == "joint":
            if self.config.pseudo_source == "cpstn":
                target = paths.fake_ir if self.config.reg_grad_to_cpstn else paths.fake_ir.detach()
            else:
                target = self._target(b, need_grad=False)
            _, ir_reg = self._registration(b, target, comps, values)
            self._fusion(b, ir_reg, comps, values)
        total, breakdown = total_loss(comps)
        total.backward()
        self.opt.step()
        if self.opt_d is not None and paths is not None:
            cp = self.model.cpstn
            self.opt_d.zero_grad(set_to_none=True)
            _, d = gan_loss(
                [cp.D_ir(b["ir"]), cp.D_vis(b["vis"])],
                [cp.D_ir(paths.fake_ir.detach()), cp.D_vis(paths.fake_vis.detach())],
            )
            d.backward()
            self.opt_d.step()
            values["gan_d"] = float(d.detach())
        return {**breakdown, **values}


def train_stage(config: TrainConfig, records, model: CGRPModel | None = None,
                backbone: VGGFeatures | None = None, out_dir=None, ledger: RunLedger | None = None,
                callback=None):
    """Train one stage and return ``(model, ledger, checkpoint_path)``.

    Later stages need a model whose ``stages`` include their prerequisites
    (see :class:`MissingStageError`). Checkpoints are written to
    ``out_dir/<stage>/<step>.ckpt`` when ``out_dir`` is given. Runs are
    deterministic for a fixed seed (single-threaded data order).
    """
    records = list(records)
    if not records:
        raise ValueError("no training records")
    if model is None:
        if config.stage != "cpstn" and _requirements(config):
            raise MissingStageError(config.stage, _requirements(config)[0])
        model = CGRPModel.create(config.seed)
    check_prerequisites(config, model)
    torch.manual_seed(config.seed)
    data_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    trainer = StageTrainer(model, config, backbone)
    ledger = ledger or RunLedger()
    ledger.param_counts = count_params(model)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / config.stage).mkdir(parents=True, exist_ok=True)
        if ledger.stream_path is None:
            ledger.stream_path = out_dir / config.stage / "ledger.txt"
    n_steps = config.steps(len(records))
    model.train()
    ckpt_path = None
    for _ in range(n_steps):
        batch = sample_batch(records, config.patch, config.batch_size, data_rng)
        t0 = time.perf_counter()
        values = trainer.step(batch)
        model.step += 1
        ledger.log(model.step, config.stage, values, time.perf_counter() - t0)
        if callback is not None:
            callback(model.step, values)
        if out_dir is not None and config.checkpoint_every and model.step % config.checkpoint_every == 0:
            ckpt_path = save_checkpoint(model.to_checkpoint({"train": config.to_dict()}),
                                        out_dir / config.stage / f"{model.step}.ckpt")
    if config.stage not in model.stages:
        model.stages.append(config.stage)
    for p in model.parameters():
        p.requires_grad_(True)
    if out_dir is not None:
        ckpt_path = save_checkpoint(model.to_checkpoint({"train": config.to_dict()}),
                                    out_dir / config.stage / f"{model.step}.ckpt")
    logger.info("stage %s finished after %d steps", config.stage, n_steps)
    return model, ledger, ckpt_path


def time_inference(model: CGRPModel, size: int = 64, runs: int = 50, warmup: int = 5,
                   seed: int = 0) -> tuple[float, float]:
    """Mean and standard deviation (seconds) of one full-pipeline pass on a ``size`` pair."""
    if runs < 2:
        raise ValueError("need at least two timed runs")
    g = torch.Generator().manual_seed(seed)
    vis = torch.rand(1, 1, size, size, generator=g)
    ir = torch.rand(1, 1, size, size, generator=g)
    for _ in range(warmup):
        model.infer(vis, ir)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        model.infer(vis, ir)
        times.append(time.perf_counter() - t0)
    return statistics.fmean(times), statistics.stdev(times)
