"""Corpus ingestion, misaligned-pair synthesis, patch sampling and splitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .geometry import (
    AffineParams,
    DeformationField,
    affine_to_field,
    compose,
    elastic_field,
    load_field,
    save_field,
    warp,
)
from .images import check_gray_image, check_same_shape, read_image, read_raw, write_image, write_raw

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


@dataclass
class PairRecord:
    """A registered visible/infrared pair plus its synthetic distortion."""

    vis: np.ndarray
    ir_aligned: np.ndarray
    ir_distorted: np.ndarray
    gt_field: DeformationField
    corpus: str = "unnamed"
    item_id: str = "0"
    seed: int = 0
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        check_same_shape(
            self.vis, self.ir_aligned, self.ir_distorted, self.gt_field.dx,
            names=("vis", "ir_aligned", "ir_distorted", "gt_field"),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.vis.shape

    def check_invariant(self, atol: float = 1e-6) -> bool:
        """True when ``ir_distorted == warp(ir_aligned, gt_field)`` within ``atol``."""
        redone = warp(self.ir_aligned, self.gt_field)
        return bool(np.abs(redone - self.ir_distorted).max() <= atol)


@dataclass
class SplitManifest:
    train: list[str]
    test: list[str]
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.train) & set(self.test)
        if overlap and not _truthy(self.meta.get("overlap", "false")):
            raise ValueError(f"train and test share {len(overlap)} ids but overlap is not enabled")


def _truthy(value) -> bool:
    return str(value).lower() in ("1", "true", "yes")


def synthesize_pair(
    vis,
    ir_aligned,
    affine: AffineParams,
    elastic: tuple[float, float, int],
    corpus: str = "unnamed",
    item_id: str = "0",
) -> PairRecord:
    """Distort a registered infrared image with an affine + elastic field.

    ``elastic`` is ``(sigma, alpha, seed)``. The ground-truth field pulls
    through the affine map first and the elastic map second.
    """
    vis = check_gray_image(vis, "vis")
    ir_aligned = check_gray_image(ir_aligned, "ir_aligned")
    if vis.shape != ir_aligned.shape:
        raise ValueError(f"vis {vis.shape} and ir_aligned {ir_aligned.shape} differ in shape")
    sigma, alpha, seed = elastic
    h, w = vis.shape
    gt = compose(elastic_field(sigma, alpha, seed, h, w), affine_to_field(affine, h, w))
    distorted = np.clip(warp(ir_aligned, gt), 0.0, 1.0)
    meta = {
        "rotation": affine.rotation,
        "translation": f"{affine.translation[0]},{affine.translation[1]}",
        "scale": f"{affine.scale[0]},{affine.scale[1]}",
        "shear": affine.shear,
        "sigma": sigma,
        "alpha": alpha,
    }
    return PairRecord(vis, ir_aligned, distorted, gt, corpus, str(item_id), int(seed), meta)


@dataclass(frozen=True)
class DistortionRanges:
    """Uniform sampling ranges for the per-image distortion.

    Every range is symmetric: rotation in [-max_rotation, max_rotation]
    degrees, and so on. ``scale_jitter`` of 0.05 means scales in [0.95, 1.05].
    """

    max_rotation: float
    max_translation: float
    scale_jitter: float
    max_shear: float
    elastic_sigma: float
    max_elastic_alpha: float

    def sample(self, rng: np.random.Generator) -> tuple[AffineParams, float, float]:
        rot = rng.uniform(-self.max_rotation, self.max_rotation)
        tx, ty = rng.uniform(-self.max_translation, self.max_translation, size=2)
        sx, sy = 1.0 + rng.uniform(-self.scale_jitter, self.scale_jitter, size=2)
        shear = rng.uniform(-self.max_shear, self.max_shear)
        alpha = rng.uniform(0.0, self.max_elastic_alpha)
        return AffineParams(rot, (tx, ty), (sx, sy), shear), self.elastic_sigma, alpha


def distort_corpus(pairs, ranges: DistortionRanges, seed: int, corpus: str = "unnamed") -> list[PairRecord]:
    """Synthesize one fixed distortion per ``(item_id, vis, ir)`` pair."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty corpus")
    children = np.random.SeedSequence(seed).spawn(len(pairs))
    records = []
    for (item_id, vis, ir), child in zip(pairs, children):
        rng = np.random.default_rng(child)
        affine, sigma, alpha = ranges.sample(rng)
        elastic_seed = int(rng.integers(0, 2**31 - 1))
        records.append(synthesize_pair(vis, ir, affine, (sigma, alpha, elastic_seed), corpus, item_id))
    return records


def sample_batch(records, patch: int = 256, count: int = 8, seed=0) -> dict:
    """Crop ``count`` co-located patches from randomly chosen records.

    Returns arrays ``vis``, ``ir_distorted``, ``ir_aligned`` of shape
    ``(count, patch, patch)``, ``gt_field`` of shape ``(count, 2, patch, patch)``
    and the list of ``(record_index, top, left)`` offsets.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to sample from")
    for r in records:
        h, w = r.shape
        if h < patch or w < patch:
            raise ValueError(f"record {r.item_id} is {h}x{w}, smaller than patch {patch}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = {k: np.empty((count, patch, patch), np.float32) for k in ("vis", "ir_distorted", "ir_aligned")}
    out["gt_field"] = np.empty((count, 2, patch, patch), np.float32)
    offsets = []
    for i in range(count):
        idx = int(rng.integers(len(records)))
        r = records[idx]
        h, w = r.shape
        top = int(rng.integers(h - patch + 1))
        left = int(rng.integers(w - patch + 1))
        sl = (slice(top, top + patch), slice(left, left + patch))
        out["vis"][i] = r.vis[sl]
        out["ir_distorted"][i] = r.ir_distorted[sl]
        out["ir_aligned"][i] = r.ir_aligned[sl]
        out["gt_field"][i, 0] = r.gt_field.dx[sl]
        out["gt_field"][i, 1] = r.gt_field.dy[sl]
        offsets.append((idx, top, left))
    out["offsets"] = offsets
    return out


def split_corpus(ids, test_fraction: float = 0.55, seed: int = 0, overlap: bool = False) -> SplitManifest:
    """Random train/test split.

    With ``overlap=True`` every id is used for training and the test set is
    a random subset of them (the unsupervised protocol); by default the two
    sets are disjoint.
    """
    ids = list(ids)
    if not ids:
        raise ValueError("empty corpus")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in corpus")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test_idx = sorted(order[:n_test])
    test = [ids[i] for i in test_idx]
    if overlap:
        train = list(ids)
    else:
        chosen = set(test_idx)
        train = [ids[i] for i in range(len(ids)) if i not in chosen]
    meta = {"test_fraction": test_fraction, "seed": seed, "overlap": str(overlap).lower()}
    return SplitManifest(train, test, meta)


def write_manifest(manifest: SplitManifest, path) -> None:
    lines = [f"# {k}={v}" for k, v in sorted(manifest.meta.items())]
    lines.append("train:")
    lines += manifest.train
    lines.append("test:")
    lines += manifest.test
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> SplitManifest:
    sections = {"train": [], "test": []}
    meta = {}
    current = None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif line in ("train:", "test:"):
            current = line[:-1]
        elif current is None:
            raise ValueError(f"{path}: id {line!r} before any section header")
        else:
            sections[current].append(line)
    return SplitManifest(sections["train"], sections["test"], meta)


def save_record(record: PairRecord, directory) -> None:
    """Write a record as PNGs, single-precision dumps, a DFLD field and meta.txt."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("vis", "ir_aligned", "ir_distorted"):
        arr = getattr(record, name)
        write_image(d / f"{name}.png", arr, bits=16)
        write_raw(d / f"{name}.npy", arr)
    save_field(record.gt_field, d / "field.dfld")
    meta = {"corpus": record.corpus, "item_id": record.item_id, "seed": record.seed, **record.meta}
    (d / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def load_record(directory) -> PairRecord:
    d = Path(directory)
    meta = {}
    meta_path = d / "meta.txt"
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            k, _, v = line.partition("=")
            meta[k] = v
    rasters = {}
    for name in ("vis", "ir_aligned", "ir_distorted"):
        raw = d / f"{name}.npy"
        rasters[name] = read_raw(raw) if raw.exists() else read_image(d / f"{name}.png")
    corpus = meta.pop("corpus", "unnamed")
    item_id = meta.pop("item_id", d.name)
    seed = int(meta.pop("seed", 0))
    return PairRecord(
        rasters["vis"], rasters["ir_aligned"], rasters["ir_distorted"],
        load_field(d / "field.dfld"), corpus, item_id, seed, meta,
    )


def load_records(corpus_dir, ids=None) -> list[PairRecord]:
    """Load records written by :func:`save_record` (optionally only ``ids``)."""
    root = Path(corpus_dir)
    if ids is None:
        ids = sorted(p.name for p in root.iterdir() if (p / "field.dfld").exists())
    missing = [i for i in ids if not (root / i / "field.dfld").exists()]
    if missing:
        raise FileNotFoundError(f"{root}: manifest ids without records: {missing[:5]}")
    return [load_record(root / i) for i in ids]


def scan_pairs(corpus_dir, vis_dir: str = "vis", ir_dir: str = "ir", keep_chroma: bool = False):
    """Read registered pairs from ``corpus_dir/vis`` and ``corpus_dir/ir`` (matched by stem).

    Yields ``(item_id, vis, ir)`` or, with ``keep_chroma``,
    ``(item_id, vis, ir, rgb_or_None)``.
    """
    root = Path(corpus_dir)
    vdir, idir = root / vis_dir, root / ir_dir
    if not vdir.is_dir() or not idir.is_dir():
        raise FileNotFoundError(f"{root}: expected '{vis_dir}/' and '{ir_dir}/' subdirectories")
    ir_files = {p.stem: p for p in idir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    out = []
    for vp in sorted(p for p in vdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        if vp.stem not in ir_files:
            logger.warning("no infrared counterpart for %s; skipped", vp.name)
            continue
        vis, rgb = read_image(vp, keep_chroma=True)
        ir = read_image(ir_files[vp.stem])
        if vis.shape != ir.shape:
            raise ValueError(f"{vp.stem}: visible {vis.shape} and infrared {ir.shape} differ in size")
        out.append((vp.stem, vis, ir, rgb) if keep_chroma else (vp.stem, vis, ir))
    return out


def synthetic_scene(size: int, seed, n_objects: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """A registered toy visible/infrared pair.

    Elliptical objects carry a temperature and a reflectance that are
    positively but imperfectly correlated. The infrared image renders
    smoothed temperature; the visible image renders reflectance with
    fine texture and a brighter, graded background.
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    temp = np.full((size, size), 0.15)
    refl = 0.35 + 0.25 * gaussian_filter(rng.uniform(-1, 1, (size, size)), size / 8) * 8
    for _ in range(n_objects):
        cx, cy = rng.uniform(0.1, 0.9, 2) * size
        ax, ay = rng.uniform(0.06, 0.2, 2) * size
        th = rng.uniform(0, np.pi)
        u = (xs - cx) * np.cos(th) + (ys - cy) * np.sin(th)
        v = -(xs - cx) * np.sin(th) + (ys - cy) * np.cos(th)
        inside = expit((1.0 - (u / ax) ** 2 - (v / ay) ** 2) * 8.0)
        t = rng.uniform(0.3, 1.0)
        r = np.clip(0.2 + 0.6 * t + rng.normal(0, 0.1), 0.05, 0.95)
        temp = temp * (1 - inside) + t * inside
        refl = refl * (1 - inside) + r * inside
    texture = gaussian_filter(rng.normal(0, 1, (size, size)), 0.8)
    ir = 0.1 + 0.8 * gaussian_filter(temp, 1.2)
    vis = refl + 0.06 * texture / (texture.std() + 1e-8)
    return np.clip(vis, 0, 1).astype(np.float32), np.clip(ir, 0, 1).astype(np.float32)


def synthetic_corpus(n: int, size: int = 64, seed: int = 0) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """``n`` registered toy pairs as ``(item_id, vis, ir)`` tuples."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [(f"syn{i:04d}", *synthetic_scene(size, c)) for i, c in enumerate(children)]
