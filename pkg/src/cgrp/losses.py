"""Training objectives for translation, registration and fusion.

All image losses use mean reductions so that the default weights are
independent of patch size. Every function returns a scalar tensor; the
``*_terms`` variants also return the unweighted parts for logging.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import warp_tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
LAPLACIAN = ((0.0, 1.0, 0.0), (1.0, -4.0, 1.0), (0.0, 1.0, 0.0))


@dataclass(frozen=True)
class LossWeights:
    """Every loss coefficient plus the perceptual layer set.

    ``layer_ids`` are truncation points into the VGG-19 ``features`` stack:
    layer ``j`` yields the activation after the first ``j`` modules
    (2, 7, 12, 21, 30 -> relu1_1, relu2_1, relu3_1, relu4_1, relu5_1).
    """

    perceptual: float = 1.0
    style: float = 100.0
    content: float = 8.0
    edge: float = 8.0
    reverse: float = 0.2
    smooth: float = 10.0
    ssim: float = 1.0
    joint_grad: float = 20.0
    saliency: float = 5.0
    gan: float = 1.0
    layer_ids: tuple[int, ...] = (2, 7, 12, 21, 30)
    layer_weights: tuple[float, ...] = (1 / 32, 1 / 16, 1 / 8, 1.0, 1.0)
    charbonnier_eps: float = 1e-3
    ssim_scales: int = 5
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if isinstance(value, float) and value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")
        if len(self.layer_ids) != len(self.layer_weights):
            raise ValueError("layer_ids and layer_weights must have equal length")
        if any(w < 0 for w in self.layer_weights):
            raise ValueError("layer weights must be >= 0")
        if list(self.layer_ids) != sorted(set(self.layer_ids)) or min(self.layer_ids, default=1) < 1:
            raise ValueError("layer_ids must be strictly increasing positive integers")
        if not 1 <= self.ssim_scales <= len(MS_SSIM_WEIGHTS):
            raise ValueError(f"ssim_scales must lie in [1, {len(MS_SSIM_WEIGHTS)}]")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be a positive odd integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_ids"] = list(self.layer_ids)
        d["layer_weights"] = list(self.layer_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        d = dict(d)
        for key in ("layer_ids", "layer_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def replace(self, **changes) -> "LossWeights":
        d = asdict(self)
        d.update(changes)
        return LossWeights(**d)


class BackboneUnavailableError(RuntimeError):
    pass


class VGGFeatures(nn.Module):
    """Frozen VGG-19 feature taps for gray images in [0, 1].

    ``weights`` selects the parameters: ``"imagenet"`` (torchvision cache,
    no silent fallback), a path to a saved ``state_dict``, or ``"random"``
    for a seeded untrained backbone (tests and desk-scale runs only).
    """

    def __init__(self, layer_ids=(2, 7, 12, 21, 30), weights="imagenet", seed: int = 0):
        super().__init__()
        from torchvision.models import vgg19

        self.layer_ids = tuple(layer_ids)
        if not self.layer_ids:
            raise ValueError("need at least one perceptual layer")
        depth = max(self.layer_ids)
        if weights == "imagenet":
            from torchvision.models import VGG19_Weights

            try:
                net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
            except Exception as exc:
                raise BackboneUnavailableError(
                    "pre-trained VGG-19 weights are not available (set TORCH_HOME to a cache "
                    "containing vgg19-dcbb9e9d.pth, or pass a state_dict path)"
                ) from exc
        elif weights == "random":
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                net = vgg19(weights=None)
        else:
            path = Path(weights)
            if not path.is_file():
                raise BackboneUnavailableError(f"backbone weights file not found: {path}")
            net = vgg19(weights=None)
            state = torch.load(path, map_location="cpu", weights_only=True)
            if any(k.startswith("features.") for k in state):
                state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
            # a truncated stack is enough as long as it covers every requested tap
            missing, unexpected = net.features.load_state_dict(state, strict=False)
            needed = {k for k in net.features[:depth].state_dict()}
            short = sorted(needed & set(missing))
            if short or unexpected:
                raise BackboneUnavailableError(
                    f"backbone state_dict does not match VGG-19 features (missing {short}, "
                    f"unexpected {sorted(unexpected)})"
                )
        if depth > len(net.features):
            raise ValueError(f"layer id {depth} exceeds the VGG-19 feature stack ({len(net.features)})")
        self.weights = str(weights)
        self.features = net.features[:depth]
        for m in self.features:
            if isinstance(m, nn.ReLU):
                m.inplace = False
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen backbone stays in inference mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = (x - self.mean) / self.std
        taps = set(self.layer_ids)
        out = []
        for i, layer in enumerate(self.features, start=1):
            x = layer(x)
            if i in taps:
                out.append(x)
        return out


def gram_matrix(feat: torch.Tensor) -> torch.Tensor:
    """``F F^T / (C H W)`` per sample."""
    b, c, h, w = feat.shape
    f = feat.reshape(b, c, h * w)
    return f @ f.transpose(1, 2) / (c * h * w)


def charbonnier(x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    return torch.sqrt(x * x + eps * eps).mean()


def laplacian(img: torch.Tensor) -> torch.Tensor:
    """3x3 Laplacian per channel, replicate-padded to keep the size."""
    c = img.shape[1]
    k = torch.tensor(LAPLACIAN, dtype=img.dtype, device=img.device).view(1, 1, 3, 3).repeat(c, 1, 1, 1)
    return F.conv2d(F.pad(img, (1, 1, 1, 1), mode="replicate"), k, groups=c)


def field_gradient_l1(flow: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """L1 norm of forward first differences of both field planes.

    ``"sum"`` adds every absolute difference; ``"mean"`` divides by the
    number of differences.
    """
    ddx = (flow[..., :, 1:] - flow[..., :, :-1]).abs()
    ddy = (flow[..., 1:, :] - flow[..., :-1, :]).abs()
    total = ddx.sum() + ddy.sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / (ddx.numel() + ddy.numel())
    raise ValueError(f"unknown reduction {reduction!r}")


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    n = win.numel()
    x = F.conv2d(x, win.view(1, 1, 1, n).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, win.view(1, 1, n, 1).repeat(c, 1, 1, 1), groups=c)


def _ssim_maps(x, y, win, data_range=1.0):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mu_x * mu_x
    syy = _filter_valid(y * y, win) - mu_y * mu_y
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return lum * cs, cs


def usable_scales(size: int, scales: int, window: int) -> int:
    """Largest scale count <= ``scales`` whose coarsest level still fits the window."""
    n = scales
    while n > 1 and math.ceil(size / 2 ** (n - 1)) < window:
        n -= 1
    return n


def ms_ssim(x: torch.Tensor, y: torch.Tensor, scales: int = 5, window: int = 11,
            sigma: float = 1.5, data_range: float = 1.0) -> torch.Tensor:
    """Multi-scale SSIM (per-sample values averaged over the batch).

    Uses valid Gaussian filtering and 2x average-pool downsampling. When the
    images are too small for ``scales`` levels the count is reduced with a
    warning and the exponents renormalised; ``scales=1`` is plain SSIM.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    size = min(x.shape[-2:])
    if size < window:
        raise ValueError(f"images of side {size} are smaller than the {window}x{window} SSIM window")
    n = usable_scales(size, scales, window)
    if n < scales:
        warnings.warn(f"MS-SSIM: {size}px images support only {n} of {scales} scales", stacklevel=2)
    weights = torch.tensor(MS_SSIM_WEIGHTS[:n], dtype=x.dtype, device=x.device)
    weights = weights / weights.sum()
    win = _gaussian_window(window, sigma, x.dtype, x.device)
    values = []
    for i in range(n):
        ssim_map, cs_map = _ssim_maps(x, y, win, data_range)
        if i == n - 1:
            values.append(ssim_map.flatten(1).mean(1))
        else:
            values.append(cs_map.flatten(1).mean(1))
            pad = (0, x.shape[-1] % 2, 0, x.shape[-2] % 2)
            x = F.avg_pool2d(F.pad(x, pad, mode="replicate"), 2)
            y = F.avg_pool2d(F.pad(y, pad, mode="replicate"), 2)
    stack = torch.relu(torch.stack(values, dim=0))
    return torch.prod(stack ** weights.view(-1, 1), dim=0).mean()


def histogram_saliency(img: torch.Tensor, bins: int = 256) -> torch.Tensor:
    """Histogram-contrast saliency ``S(p) = sum_i h(i) |I(p) - i|`` per sample.

    Intensities are quantised to ``bins`` levels over [0, 1]; ``h`` is the
    normalised histogram and levels are expressed in [0, 1] units.
    """
    b = img.shape[0]
    q = torch.round(img.detach().clamp(0, 1) * (bins - 1)).long().view(b, -1)
    hist = torch.zeros(b, bins, dtype=img.dtype, device=img.device)
    hist.scatter_add_(1, q, torch.ones_like(q, dtype=img.dtype))
    hist = hist / q.shape[1]
    levels = torch.arange(bins, dtype=img.dtype, device=img.device) / (bins - 1)
    # contrast of every level against the whole histogram, then a lookup
    table = (hist.unsqueeze(1) * (levels.view(1, -1, 1) - levels.view(1, 1, -1)).abs()).sum(-1)
    return table.gather(1, q).view_as(img)


@dataclass
class SaliencyWeights:
    s_ir: torch.Tensor
    s_vis: torch.Tensor
    w_ir: torch.Tensor
    w_vis: torch.Tensor


def saliency_weights(ir_reg: torch.Tensor, vis: torch.Tensor) -> SaliencyWeights:
    """Sum-normalised saliency blend weights (0.5 where both saliencies vanish)."""
    s_ir = histogram_saliency(ir_reg)
    s_vis = histogram_saliency(vis)
    denom = s_ir + s_vis
    w_ir = torch.where(denom > 0, s_ir / torch.where(denom > 0, denom, torch.ones_like(denom)),
                       torch.full_like(denom, 0.5))
    return SaliencyWeights(s_ir, s_vis, w_ir, 1.0 - w_ir)


def gan_loss(real_scores, fake_scores, fake_scores_for_generator=None):
    """Least-squares adversarial terms.

    Returns ``(generator_term, discriminator_term)``; each argument may be a
    tensor or a list of tensors (one per direction), terms are summed over
    directions. ``fake_scores_for_generator`` defaults to ``fake_scores``.
    """
    if isinstance(real_scores, torch.Tensor):
        real_scores, fake_scores = [real_scores], [fake_scores]
        if fake_scores_for_generator is not None:
            fake_scores_for_generator = [fake_scores_for_generator]
    if fake_scores_for_generator is None:
        fake_scores_for_generator = fake_scores
    g = sum(((f - 1.0) ** 2).mean() for f in fake_scores_for_generator)
    d = sum(0.5 * (((r - 1.0) ** 2).mean() + (f**2).mean()) for r, f in zip(real_scores, fake_scores))
    return g, d


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.new_zeros(())


def pst_terms(paths, vis, ir, backbone: VGGFeatures, w: LossWeights) -> dict:
    """Unweighted perceptual and style terms between inputs and their cycle reconstructions."""
    feats_in = backbone(torch.cat([vis, ir], dim=0))
    feats_rec = backbone(torch.cat([paths.cycle_vis, paths.cycle_ir], dim=0))
    b = vis.shape[0]
    pcp = _zero(vis)
    sty = _zero(vis)
    for fi, fr, omega in zip(feats_in, feats_rec, backbone_weights(backbone, w)):
        pcp = pcp + F.mse_loss(fr[:b], fi[:b]) + F.mse_loss(fr[b:], fi[b:])
        gi, gr = gram_matrix(fi), gram_matrix(fr)
        sty = sty + omega * (F.mse_loss(gr[:b], gi[:b]) + F.mse_loss(gr[b:], gi[b:]))
    return {"pcp": pcp, "sty": sty}


def backbone_weights(backbone: VGGFeatures, w: LossWeights):
    if tuple(backbone.layer_ids) != tuple(w.layer_ids):
        raise ValueError(f"backbone taps {backbone.layer_ids} differ from loss layers {w.layer_ids}")
    return w.layer_weights


def pst_loss(paths, vis, ir, backbone, w: LossWeights = LossWeights()) -> torch.Tensor:
    t = pst_terms(paths, vis, ir, backbone, w)
    return w.perceptual * t["pcp"] + w.style * t["sty"]


def cross_terms(paths, w: LossWeights) -> dict:
    con = (paths.fake_ir - paths.rec_ir).abs().mean() + (paths.fake_vis - paths.rec_vis).abs().mean()
    edge = charbonnier(laplacian(paths.fake_ir) - laplacian(paths.rec_ir), w.charbonnier_eps) + charbonnier(
        laplacian(paths.fake_vis) - laplacian(paths.rec_vis), w.charbonnier_eps
    )
    return {"con": con, "edge": edge}


def cross_loss(paths, w: LossWeights = LossWeights()) -> torch.Tensor:
    t = cross_terms(paths, w)
    return w.content * t["con"] + w.edge * t["edge"]


def _feature_l1(fa, fb):
    return sum((a - b).abs().mean() for a, b in zip(fa, fb))


def registration_terms(ir_reg, pseudo_ir, distorted_ir, field, backbone, w: LossWeights) -> dict:
    """Forward/backward perceptual similarity and field smoothness (unweighted).

    The backward term pulls the pseudo-infrared image with the negated
    field (first-order inverse) towards the distorted input.
    """
    if not (ir_reg.shape == pseudo_ir.shape == distorted_ir.shape):
        raise ValueError("registration_loss inputs differ in shape")
    fwd = _feature_l1(backbone(ir_reg), backbone(pseudo_ir))
    if w.reverse > 0:
        back_img = warp_tensor(pseudo_ir, -field)
        bwd = _feature_l1(backbone(back_img), backbone(distorted_ir))
    else:
        bwd = _zero(ir_reg)
    smooth = field_gradient_l1(field) if w.smooth > 0 else _zero(ir_reg)
    return {"sim_fwd": fwd, "sim_bwd": bwd, "smooth": smooth}


def registration_loss(ir_reg, pseudo_ir, distorted_ir, field, backbone, w: LossWeights = LossWeights()):
    t = registration_terms(ir_reg, pseudo_ir, distorted_ir, field, backbone, w)
    return t["sim_fwd"] + w.reverse * t["sim_bwd"] + w.smooth * t["smooth"]


def joint_gradient_l1(fus, ir_reg, vis) -> torch.Tensor:
    """Mean ``| max(|lap ir|, |lap vis|) - |lap fus| |``."""
    target = torch.maximum(laplacian(ir_reg).abs(), laplacian(vis).abs())
    return (target - laplacian(fus).abs()).abs().mean()


def fusion_terms(fus, ir_reg, vis, w: LossWeights) -> dict:
    if not (fus.shape == ir_reg.shape == vis.shape):
        raise ValueError("fusion_loss inputs differ in shape")
    zero = _zero(fus)
    if w.ssim > 0:
        kw = dict(scales=w.ssim_scales, window=w.ssim_window, sigma=w.ssim_sigma)
        ssim_term = (1 - ms_ssim(fus, ir_reg, **kw)) + (1 - ms_ssim(fus, vis, **kw))
    else:
        ssim_term = zero
    jg = joint_gradient_l1(fus, ir_reg, vis) if w.joint_grad > 0 else zero
    if w.saliency > 0:
        sw = saliency_weights(ir_reg, vis)
        blend = sw.w_ir * ir_reg + sw.w_vis * vis
        svs = (blend - fus).abs().mean()
    else:
        svs = zero
    return {"ssim": ssim_term, "jgrad": jg, "svs": svs}


def fusion_loss(fus, ir_reg, vis, w: LossWeights = LossWeights()) -> torch.Tensor:
    t = fusion_terms(fus, ir_reg, vis, w)
    return w.ssim * t["ssim"] + w.joint_grad * t["jgrad"] + w.saliency * t["svs"]


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


TOTAL_KEYS = ("L_pst", "L_cross", "L_GAN", "L_reg", "L_fus")


def total_loss(components: dict) -> tuple[torch.Tensor, dict]:
    """Sum the five top-level objectives; missing ones count as zero.

    Returns the total and a float breakdown (including the total) for logging.
    """
    unknown = set(components) - set(TOTAL_KEYS)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    total = None
    for key in TOTAL_KEYS:
        value = components.get(key)
        if value is None:
            continue
        total = value if total is None else total + value
    if total is None:
        total = torch.zeros(())
    breakdown = {k: _scalar(components[k]) for k in TOTAL_KEYS if components.get(k) is not None}
    breakdown["L_total"] = _scalar(total)
    return total, breakdown


def format_record(step: int, values: dict, **extra) -> str:
    """One line of ``name=value`` pairs for the loss log."""
    parts = [f"step={step}"] + [f"{k}={v}" for k, v in extra.items()]
    parts += [f"{k}={v:.9g}" for k, v in values.items()]
    return " ".join(parts)


def parse_record(line: str) -> dict:
    out = {}
    for token in line.split():
        key, _, value = token.partition("=")
        try:
            out[key] = int(value)
        except ValueError:
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
    return out
