"""Registration and fusion quality measures and corpus aggregation.

Registration: MSE, NCC, MI of the registered infrared image against the
ground-truth aligned infrared image. Fusion: CC, VIF and SSIM of the fused
image against both sources (averaged over the two references).

An undefined value (e.g. correlation with a constant image) is reported as
NaN and skipped, with a warning, when a corpus mean is formed.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .checkpoint import atomic_write

REGISTRATION_METRICS = ("MSE", "NCC", "MI")
FUSION_METRICS = ("CC", "VIF", "SSIM")
HIGHER_IS_BETTER = {"MSE": False, "NCC": True, "MI": True, "CC": True, "VIF": True, "SSIM": True}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def ncc(a, b) -> float:
    """Pearson correlation of the flattened rasters; NaN if either is constant."""
    a, b = _pair(a, b)
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if denom == 0.0:
        warnings.warn("ncc undefined for a constant image", RuntimeWarning, stacklevel=2)
        return float("nan")
    return float(np.dot(a, b) / denom)


def _bin_index(x, bins):
    idx = np.floor(np.clip(x, 0.0, 1.0) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def entropy(x, bins: int = 256) -> float:
    """Shannon entropy (nats) of the ``bins``-bin histogram over [0, 1]."""
    counts = np.bincount(_bin_index(np.asarray(x, np.float64).ravel(), bins), minlength=bins)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def mi(a, b, bins: int = 256) -> float:
    """Mutual information (nats) from the joint ``bins x bins`` histogram over [0, 1]."""
    a, b = _pair(a, b)
    ia = _bin_index(a.ravel(), bins)
    ib = _bin_index(b.ravel(), bins)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins).astype(np.float64)
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    nz = pxy > 0
    return float((pxy[nz] * np.log(pxy[nz] / np.outer(px, py)[nz])).sum())


def cc(fus, ir, vis) -> float:
    """Mean of the correlations of the fused image with each source."""
    return float(np.mean([ncc(fus, ir), ncc(fus, vis)]))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, kernel):
    r = (len(kernel) - 1) // 2
    out = correlate1d(correlate1d(img, kernel, axis=0, mode="nearest"), kernel, axis=1, mode="nearest")
    if r == 0:
        return out
    return out[r:-r, r:-r]


def ssim(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Single-scale SSIM: Gaussian window, K1=0.01, K2=0.03, mean over valid positions."""
    a, b = _pair(a, b)
    if min(a.shape) < window:
        raise ValueError(f"images of shape {a.shape} are smaller than the {window}x{window} window")
    k = gaussian_kernel(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    saa = _filter_valid(a * a, k) - mu_a * mu_a
    sbb = _filter_valid(b * b, k) - mu_b * mu_b
    sab = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def vif(dist, ref, scales: int = 4, sigma_nsq: float = 2.0) -> float:
    """Pixel-domain visual information fidelity of ``dist`` given reference ``ref``.

    Four Gaussian scales (window ``2**(5-s)+1``, std window/5), noise
    variance 2 on the 0-255 intensity scale; images in [0, 1] are rescaled.
    Needs at least ~40 pixels per side for four scales.
    """
    dist, ref = _pair(dist, ref)
    ref = ref * 255.0
    dist = dist * 255.0
    eps = 1e-10
    num = den = 0.0
    for s in range(1, scales + 1):
        n = 2 ** (scales - s + 1) + 1
        k = gaussian_kernel(n, n / 5.0)
        if s > 1:
            ref = _filter_valid(ref, k)[::2, ::2]
            dist = _filter_valid(dist, k)[::2, ::2]
        if min(ref.shape) < n:
            raise ValueError(f"image too small for {scales}-scale VIF")
        mu1 = _filter_valid(ref, k)
        mu2 = _filter_valid(dist, k)
        s1 = np.maximum(_filter_valid(ref * ref, k) - mu1 * mu1, 0.0)
        s2 = np.maximum(_filter_valid(dist * dist, k) - mu2 * mu2, 0.0)
        s12 = _filter_valid(ref * dist, k) - mu1 * mu2
        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        flat_ref = s1 < eps
        g[flat_ref] = 0.0
        sv[flat_ref] = s2[flat_ref]
        s1[flat_ref] = 0.0
        flat_dist = s2 < eps
        g[flat_dist] = 0.0
        sv[flat_dist] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, eps)
        num += np.sum(np.log10(1.0 + g * g * s1 / (sv + sigma_nsq)))
        den += np.sum(np.log10(1.0 + s1 / sigma_nsq))
    if den == 0.0:
        warnings.warn("vif undefined for a flat reference", RuntimeWarning, stacklevel=2)
        return float("nan")
    return float(num / den)


def registration_scores(registered, aligned) -> dict:
    return {"MSE": mse(registered, aligned), "NCC": ncc(registered, aligned), "MI": mi(registered, aligned)}


def fusion_scores(fus, ir, vis) -> dict:
    return {
        "CC": cc(fus, ir, vis),
        "VIF": float(np.mean([vif(fus, ir), vif(fus, vis)])),
        "SSIM": float(np.mean([ssim(fus, ir), ssim(fus, vis)])),
    }


@dataclass
class MetricsReport:
    """Per-item metric values plus metadata; means are NaN-skipping arithmetic means."""

    items: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, item_id: str, scores: dict) -> None:
        self.items[str(item_id)] = {k: float(v) for k, v in scores.items()}

    @property
    def metrics(self) -> list[str]:
        names = []
        for scores in self.items.values():
            names += [k for k in scores if k not in names]
        return names

    @property
    def count(self) -> int:
        return len(self.items)

    def means(self) -> dict:
        out = {}
        for name in self.metrics:
            values = np.array([s.get(name, np.nan) for s in self.items.values()], dtype=np.float64)
            valid = values[~np.isnan(values)]
            if len(valid) < len(values):
                warnings.warn(
                    f"{name}: {len(values) - len(valid)} undefined value(s) excluded from the mean",
                    RuntimeWarning, stacklevel=2,
                )
            out[name] = float(valid.mean()) if len(valid) else float("nan")
        return out

    def to_dict(self) -> dict:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            means = self.means()
        return {"meta": self.meta, "count": self.count, "means": means, "items": self.items}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(items={k: dict(v) for k, v in d["items"].items()}, meta=dict(d.get("meta", {})))


def evaluate_registration(records, aligner, meta=None) -> MetricsReport:
    """Score ``aligner(vis, ir_distorted) -> registered`` against the aligned infrared."""
    report = MetricsReport(meta=dict(meta or {}))
    for r in records:
        registered = np.clip(np.asarray(aligner(r.vis, r.ir_distorted), np.float64), 0.0, 1.0)
        report.add(r.item_id, registration_scores(registered, r.ir_aligned))
    report.meta.setdefault("mode", "registration")
    return report


def evaluate_fusion(records, pipeline, ir_reference: str = "aligned", meta=None) -> MetricsReport:
    """Score ``pipeline(vis, ir_distorted) -> fused`` against both sources.

    ``ir_reference`` picks the infrared source: the ground-truth ``"aligned"``
    image (default) or the ``"distorted"`` input.
    """
    if ir_reference not in ("aligned", "distorted"):
        raise ValueError("ir_reference must be 'aligned' or 'distorted'")
    report = MetricsReport(meta=dict(meta or {}))
    for r in records:
        fused = np.clip(np.asarray(pipeline(r.vis, r.ir_distorted), np.float64), 0.0, 1.0)
        ir = r.ir_aligned if ir_reference == "aligned" else r.ir_distorted
        report.add(r.item_id, fusion_scores(fused, ir, r.vis))
    report.meta.setdefault("mode", "fusion")
    report.meta.setdefault("ir_reference", ir_reference)
    return report


def identity_aligner(vis, ir_distorted):
    """The no-op baseline: leaves the distorted infrared image untouched."""
    return ir_distorted


def build_document(rows: dict, mode: str, meta=None) -> dict:
    """Machine-readable comparison of several methods (row name -> report)."""
    metrics = list(REGISTRATION_METRICS if mode == "registration" else FUSION_METRICS)
    return {
        "mode": mode,
        "metrics": metrics,
        "meta": dict(meta or {}),
        "rows": {name: report.to_dict() for name, report in rows.items()},
    }


def write_document(doc: dict, path) -> None:
    atomic_write(path, (json.dumps(doc, indent=2) + "\n").encode("utf-8"))


def read_document(path) -> dict:
    return json.loads(Path(path).read_text())


def format_table(doc: dict) -> str:
    """Plain-text table, one row per method, one column per metric mean."""
    metrics = doc["metrics"]
    arrows = {m: ("↑" if HIGHER_IS_BETTER.get(m, True) else "↓") for m in metrics}
    header = ["Method"] + [f"{m}{arrows[m]}" for m in metrics] + ["N"]
    lines = []
    for name, row in doc["rows"].items():
        means = row["means"]
        lines.append([name] + [f"{means.get(m, float('nan')):.3f}" for m in metrics] + [str(row["count"])])
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    rule = "-" * len(fmt(header))
    title = f"{doc['mode'].capitalize()} results"
    return "\n".join([title, rule, fmt(header), rule] + [fmt(r) for r in lines] + [rule]) + "\n"
