"""Deformation fields, composition and differentiable pull-warping.

Conventions used throughout the package:

* an image tensor is ``(B, C, H, W)``; a 2-D numpy array is a single gray image;
* a field tensor is ``(B, 2, H, W)`` with channel 0 = dx (columns) and
  channel 1 = dy (rows), in pixels;
* warping *pulls*: ``out(p) = img(p + field(p))``, with border replication
  for samples that land outside the raster.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

FIELD_MAGIC = b"DFLD"


@dataclass
class DeformationField:
    """Per-pixel displacement map in pixel units (pull convention)."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.float32)
        self.dy = np.asarray(self.dy, dtype=np.float32)
        if self.dx.ndim != 2 or self.dx.shape != self.dy.shape:
            raise ValueError(
                f"dx and dy must be 2-D with identical shapes, got {self.dx.shape} and {self.dy.shape}"
            )
        if not (np.isfinite(self.dx).all() and np.isfinite(self.dy).all()):
            raise ValueError("deformation field contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "DeformationField":
        return cls(np.zeros((height, width), np.float32), np.zeros((height, width), np.float32))

    @classmethod
    def from_tensor(cls, flow: torch.Tensor) -> "DeformationField":
        """Build from a ``(2, H, W)`` or ``(1, 2, H, W)`` tensor."""
        flow = flow.detach().cpu()
        if flow.dim() == 4:
            if flow.shape[0] != 1:
                raise ValueError("from_tensor expects a single field, got a batch")
            flow = flow[0]
        return cls(flow[0].numpy(), flow[1].numpy())

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Return a ``(1, 2, H, W)`` tensor."""
        return torch.from_numpy(np.stack([self.dx, self.dy])).to(dtype).unsqueeze(0)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)

    def __neg__(self) -> "DeformationField":
        return DeformationField(-self.dx, -self.dy)


@dataclass(frozen=True)
class AffineParams:
    """Affine distortion about the image centre.

    rotation and shear are in degrees, translation in pixels ``(tx, ty)``,
    scale is a per-axis factor ``(sx, sy)``.
    """

    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    scale: tuple[float, float] = (1.0, 1.0)
    shear: float = 0.0

    def __post_init__(self):
        if len(self.scale) != 2 or min(self.scale) <= 0:
            raise ValueError(f"scale components must be positive, got {self.scale}")
        if len(self.translation) != 2:
            raise ValueError("translation must be a 2-vector")

    def matrix(self) -> np.ndarray:
        """Linear part ``rotation @ shear @ scale`` acting on ``(x, y)``."""
        th = math.radians(self.rotation)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        shear = np.array([[1.0, math.tan(math.radians(self.shear))], [0.0, 1.0]])
        scale = np.diag(self.scale)
        return rot @ shear @ scale


def _as_field_tensor(field, like: torch.Tensor) -> torch.Tensor:
    if isinstance(field, DeformationField):
        field = field.to_tensor()
    elif isinstance(field, np.ndarray):
        field = torch.from_numpy(field)
    if field.dim() == 3:
        field = field.unsqueeze(0)
    return field.to(device=like.device, dtype=like.dtype)


def _check_field_shape(img: torch.Tensor, flow: torch.Tensor):
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"field must be (B, 2, H, W), got {tuple(flow.shape)}")
    if img.shape[-2:] != flow.shape[-2:]:
        raise ValueError(
            f"image {tuple(img.shape[-2:])} and field {tuple(flow.shape[-2:])} differ in height/width"
        )
    if flow.shape[0] not in (1, img.shape[0]) and img.shape[0] != 1:
        raise ValueError(f"batch sizes differ: image {img.shape[0]}, field {flow.shape[0]}")


def warp_tensor(img: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear pull-warp of ``img (B, C, H, W)`` by ``flow (B, 2, H, W)``.

    Differentiable w.r.t. both arguments. Out-of-range sample positions are
    clamped to the raster (border replication), so the output stays within
    the input's value range.
    """
    if img.dim() != 4:
        raise ValueError(f"image tensor must be (B, C, H, W), got {tuple(img.shape)}")
    _check_field_shape(img, flow)
    batch = max(img.shape[0], flow.shape[0])
    img = img.expand(batch, -1, -1, -1)
    flow = flow.expand(batch, -1, -1, -1)
    _, C, H, W = img.shape

    ys = torch.arange(H, device=img.device, dtype=flow.dtype).view(1, H, 1)
    xs = torch.arange(W, device=img.device, dtype=flow.dtype).view(1, 1, W)
    x = (xs + flow[:, 0]).clamp(0, W - 1)
    y = (ys + flow[:, 1]).clamp(0, H - 1)

    x0 = x.detach().floor()
    y0 = y.detach().floor()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)

    flat = img.reshape(batch, C, H * W)

    def gather(yi, xi):
        idx = (yi * W + xi).view(batch, 1, H * W).expand(-1, C, -1)
        return flat.gather(2, idx).view(batch, C, H, W)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def warp(img, field, mode: str = "bilinear", padding: str = "border"):
    """Pull-warp an image by a deformation field.

    ``img`` may be a 2-D numpy array (returns numpy) or a ``(B, C, H, W)``
    tensor (returns a tensor, gradients preserved). ``field`` may be a
    :class:`DeformationField`, a ``(2, H, W)`` array or a field tensor.
    """
    if mode != "bilinear" or padding != "border":
        raise ValueError("only bilinear sampling with border padding is supported")
    if isinstance(img, np.ndarray):
        if img.ndim != 2:
            raise ValueError(f"numpy images must be 2-D, got shape {img.shape}")
        t = torch.from_numpy(np.ascontiguousarray(img)).to(torch.float64)[None, None]
        flow = _as_field_tensor(field, t)
        return warp_tensor(t, flow)[0, 0].numpy().astype(img.dtype, copy=False)
    return warp_tensor(img, _as_field_tensor(field, img))


def compose(a, b):
    """Compose two fields: displacement ``b(p) + a(p + b(p))``.

    Pulling with the result equals pulling with ``a`` first and then with
    ``b``: ``warp(img, compose(a, b)) ~ warp(warp(img, a), b)``.
    Accepts :class:`DeformationField` pairs or ``(B, 2, H, W)`` tensors.
    """
    if isinstance(a, DeformationField) and isinstance(b, DeformationField):
        if a.shape != b.shape:
            raise ValueError(f"field shapes differ: {a.shape} vs {b.shape}")
        ta, tb = a.to_tensor(torch.float64), b.to_tensor(torch.float64)
        return DeformationField.from_tensor(tb + warp_tensor(ta, tb))
    if a.shape != b.shape:
        raise ValueError(f"field shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return b + warp_tensor(a, b)


def identity_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinate grids ``(xs, ys)`` of shape ``(H, W)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def affine_to_field(params: AffineParams, height: int, width: int) -> DeformationField:
    """Displacement of ``p -> A (p - c) + c + t`` with ``c`` the raster centre."""
    if height < 2 or width < 2:
        raise ValueError("affine_to_field needs H, W >= 2")
    xs, ys = identity_grid(height, width)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    a = params.matrix()
    u, v = xs - cx, ys - cy
    tx, ty = params.translation
    x_new = a[0, 0] * u + a[0, 1] * v + cx + tx
    y_new = a[1, 0] * u + a[1, 1] * v + cy + ty
    return DeformationField(x_new - xs, y_new - ys)


def elastic_field(sigma: float, alpha: float, seed, height: int, width: int) -> DeformationField:
    """Random smooth field whose largest displacement magnitude equals ``alpha``.

    Uniform noise in [-1, 1] per plane, Gaussian-smoothed with std ``sigma``
    (reflect boundary, truncated at 4 sigma), then rescaled.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0:
        return DeformationField.zeros(height, width)
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-1.0, 1.0, size=(2, height, width))
    dx = gaussian_filter(noise[0], sigma, mode="reflect", truncate=4.0)
    dy = gaussian_filter(noise[1], sigma, mode="reflect", truncate=4.0)
    peak = np.hypot(dx, dy).max()
    if peak == 0:
        return DeformationField.zeros(height, width)
    return DeformationField(dx * (alpha / peak), dy * (alpha / peak))


def upsample_field(flow: torch.Tensor, size=None) -> torch.Tensor:
    """Upsample a field to ``size`` (default 2x) and rescale displacements.

    Displacements scale with resolution, so a 2x upsample doubles them.
    """
    h, w = flow.shape[-2:]
    if size is None:
        size = (2 * h, 2 * w)
    up = torch.nn.functional.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    sx = size[1] / w
    sy = size[0] / h
    if sx == sy:
        return up * sx
    return torch.cat([up[:, :1] * sx, up[:, 1:] * sy], dim=1)


def save_field(field: DeformationField, path) -> None:
    """Write the little-endian ``DFLD`` format: magic, u32 H, u32 W, dx plane, dy plane."""
    h, w = field.shape
    payload = (
        FIELD_MAGIC
        + struct.pack("<II", h, w)
        + field.dx.astype("<f4").tobytes(order="C")
        + field.dy.astype("<f4").tobytes(order="C")
    )
    Path(path).write_bytes(payload)


def load_field(path) -> DeformationField:
    data = Path(path).read_bytes()
    if data[:4] != FIELD_MAGIC:
        raise ValueError(f"{path}: not a DFLD file (magic {data[:4]!r})")
    h, w = struct.unpack("<II", data[4:12])
    n = h * w
    expected = 12 + 8 * n
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {h}x{w}, found {len(data)}")
    planes = np.frombuffer(data, dtype="<f4", offset=12, count=2 * n).reshape(2, h, w)
    return DeformationField(planes[0].astype(np.float32), planes[1].astype(np.float32))
