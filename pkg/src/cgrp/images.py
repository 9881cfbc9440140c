"""Gray raster type, PNG/raw IO and input validation helpers."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

PROVENANCES = ("real-ir", "real-vis", "pseudo-ir", "registered", "fused")


@dataclass
class GrayImage:
    """Single-channel raster with values in [0, 1]."""

    pixels: np.ndarray
    provenance: str = "real-ir"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}; expected one of {PROVENANCES}")
        self.pixels = check_gray_image(self.pixels, name=self.provenance)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def check_gray_image(img, name: str = "image") -> np.ndarray:
    """Validate a single gray image and return it as a float32 array.

    Accepts ``(H, W)`` or ``(1, H, W)`` arrays (or tensors) with values in [0, 1].
    """
    if isinstance(img, GrayImage):
        return img.pixels
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D gray image, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name}: empty image")
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: values must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]")
    return arr


def check_same_shape(*arrays, names=None):
    shapes = [tuple(a.shape[-2:]) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(f"{n}={s}" for n, s in zip(names or range(len(shapes)), shapes))
        raise ValueError(f"height/width mismatch: {label}")


def check_pair_stack(X, name: str = "X") -> np.ndarray:
    """Validate an estimator input of shape ``(n_samples, 2, H, W)``.

    Channel 0 is the visible image, channel 1 the infrared image. A single
    pair ``(2, H, W)`` is promoted to a batch of one.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 2:
        raise ValueError(f"{name}: expected shape (n_samples, 2, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name}: no samples")
    if not np.isfinite(X).all():
        raise ValueError(f"{name}: contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name}: values must lie in [0, 1]")
    return X


def check_image_stack(X, name: str = "X") -> np.ndarray:
    """Validate ``(n_samples, H, W)`` gray images (a single ``(H, W)`` is promoted)."""
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3 or X.shape[0] == 0:
        raise ValueError(f"{name}: expected shape (n_samples, H, W), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name}: values must lie in [0, 1]")
    return X


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(H, W)`` -> ``(1, 1, H, W)``; ``(N, H, W)`` -> ``(N, 1, H, W)``."""
    t = torch.from_numpy(np.ascontiguousarray(img)).to(dtype)
    if t.dim() == 2:
        return t[None, None]
    if t.dim() == 3:
        return t[:, None]
    return t


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_tensor` for single-channel batches, clamped to [0, 1]."""
    arr = t.detach().cpu().clamp(0.0, 1.0).numpy().astype(np.float32)
    arr = arr[:, 0]
    return arr[0] if arr.shape[0] == 1 else arr


def luminance(rgb: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an ``(H, W, 3)`` array in [0, 1]."""
    return (rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114).astype(np.float32)


def read_image(path, keep_chroma: bool = False):
    """Read an 8/16-bit PNG (or any PIL-readable file) as a [0, 1] gray array.

    Colour inputs are reduced to luminance; with ``keep_chroma`` the
    original RGB array is returned as a second value (``None`` for gray).
    """
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0 if arr.max() > 255 or mode.startswith("I;16") else 255.0
            gray = (arr / scale).astype(np.float32)
            rgb = None
        elif mode in ("L", "LA", "P", "1"):
            gray = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
            rgb = None
        else:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            gray = luminance(rgb)
    gray = np.clip(gray, 0.0, 1.0)
    return (gray, rgb) if keep_chroma else gray


def write_image(path, img: np.ndarray, bits: int = 8) -> None:
    """Write a [0, 1] gray array as an 8- or 16-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path, format="PNG")
    elif bits == 16:
        data = np.round(arr * 65535).astype(np.uint16)
        Image.fromarray(data).save(path, format="PNG")
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")


def write_raw(path, img: np.ndarray) -> None:
    """Single-precision dump (``.npy``) for metric fidelity."""
    np.save(Path(path), np.asarray(img, dtype=np.float32), allow_pickle=False)


def read_raw(path) -> np.ndarray:
    return np.load(Path(path), allow_pickle=False).astype(np.float32)


def recolor(fused: np.ndarray, rgb: np.ndarray) -> np.ndarray:
    """Reinject visible chroma into a fused luminance image (YCbCr swap)."""
    if fused.shape != rgb.shape[:2]:
        raise ValueError(f"fused image {fused.shape} and chroma {rgb.shape[:2]} differ in size")
    y = luminance(rgb)
    cb = (rgb[..., 2] - y) * 0.564
    cr = (rgb[..., 0] - y) * 0.713
    r = fused + 1.403 * cr
    b = fused + 1.773 * cb
    g = (fused - 0.299 * r - 0.114 * b) / 0.587
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0).astype(np.float32)
