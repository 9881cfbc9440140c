"""Independent reference computations used by the tests.

Each function is written from the textbook definition with explicit loops
or plain numpy/scipy calls, sharing no code with the package.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d


def bilinear_pull(img, dx, dy):
    """Brute-force bilinear sampling of ``img`` at ``(x + dx, y + dy)``, clamped to the raster."""
    h, w = img.shape
    out = np.empty((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            sx = min(max(x + float(dx[y, x]), 0.0), w - 1.0)
            sy = min(max(y + float(dy[y, x]), 0.0), h - 1.0)
            x0, y0 = int(math.floor(sx)), int(math.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            fx, fy = sx - x0, sy - y0
            out[y, x] = (
                img[y0, x0] * (1 - fx) * (1 - fy)
                + img[y0, x1] * fx * (1 - fy)
                + img[y1, x0] * (1 - fx) * fy
                + img[y1, x1] * fx * fy
            )
    return out


def gram(feat):
    """Gram matrix of a ``(C, H, W)`` array by explicit channel inner products."""
    c, h, w = feat.shape
    g = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            g[i, j] = np.sum(feat[i] * feat[j]) / (c * h * w)
    return g


def gaussian_1d(size, sigma):
    r = (size - 1) / 2
    g = np.array([math.exp(-((i - r) ** 2) / (2 * sigma * sigma)) for i in range(size)])
    return g / g.sum()


def ssim_direct(a, b, window=11, sigma=1.5, data_range=1.0):
    """SSIM by evaluating the windowed statistics at every valid position."""
    g = gaussian_1d(window, sigma)
    w2 = np.outer(g, g)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    h, wd = a.shape
    vals = []
    for y in range(h - window + 1):
        for x in range(wd - window + 1):
            pa = a[y:y + window, x:x + window]
            pb = b[y:y + window, x:x + window]
            ma, mb = np.sum(w2 * pa), np.sum(w2 * pb)
            va = np.sum(w2 * (pa - ma) ** 2)
            vb = np.sum(w2 * (pb - mb) ** 2)
            cov = np.sum(w2 * (pa - ma) * (pb - mb))
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def ms_ssim_reference(a, b, scales=5, window=11, sigma=1.5, weights=(0.0448, 0.2856, 0.3001, 0.2363, 0.1333)):
    """Multi-scale SSIM with 2-D valid convolution and 2x2 mean downsampling."""
    g = gaussian_1d(window, sigma)
    w2 = np.outer(g, g)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    w = np.asarray(weights[:scales], dtype=np.float64)
    w = w / w.sum()
    result = 1.0
    for s in range(scales):
        f = lambda z: convolve2d(z, w2[::-1, ::-1], mode="valid")
        ma, mb = f(a), f(b)
        va, vb, cov = f(a * a) - ma ** 2, f(b * b) - mb ** 2, f(a * b) - ma * mb
        cs = np.mean((2 * cov + c2) / (va + vb + c2))
        if s == scales - 1:
            lum = (2 * ma * mb + c1) / (ma ** 2 + mb ** 2 + c1)
            full = np.mean(lum * (2 * cov + c2) / (va + vb + c2))
            result *= max(full, 0.0) ** w[s]
        else:
            result *= max(cs, 0.0) ** w[s]
            a = _down2(a)
            b = _down2(b)
    return result


def _down2(z):
    h, w = z.shape
    if h % 2:
        z = np.vstack([z, z[-1:]])
    if w % 2:
        z = np.hstack([z, z[:, -1:]])
    return 0.25 * (z[0::2, 0::2] + z[1::2, 0::2] + z[0::2, 1::2] + z[1::2, 1::2])


def mutual_information(a, b, bins=256):
    """MI in nats by summing over the explicit joint histogram."""
    ia = np.minimum((np.clip(a.ravel(), 0, 1) * bins).astype(int), bins - 1)
    ib = np.minimum((np.clip(b.ravel(), 0, 1) * bins).astype(int), bins - 1)
    n = len(ia)
    joint = {}
    for x, y in zip(ia, ib):
        joint[(x, y)] = joint.get((x, y), 0) + 1
    pa, pb = {}, {}
    for (x, y), c in joint.items():
        pa[x] = pa.get(x, 0) + c
        pb[y] = pb.get(y, 0) + c
    total = 0.0
    for (x, y), c in joint.items():
        pxy = c / n
        total += pxy * math.log(pxy / ((pa[x] / n) * (pb[y] / n)))
    return total


def histogram_entropy(a, bins=256):
    idx = np.minimum((np.clip(a.ravel(), 0, 1) * bins).astype(int), bins - 1)
    counts = {}
    for i in idx:
        counts[i] = counts.get(i, 0) + 1
    n = len(idx)
    return -sum((c / n) * math.log(c / n) for c in counts.values())


def pearson(a, b):
    a = a.ravel().astype(np.float64)
    b = b.ravel().astype(np.float64)
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    den = math.sqrt(sum((x - ma) ** 2 for x in a) * sum((y - mb) ** 2 for y in b))
    return num / den


def laplacian_direct(img):
    """3x3 Laplacian with edge replication, by explicit neighbour sums."""
    h, w = img.shape
    p = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            out[y, x] = p[y, x + 1] + p[y + 2, x + 1] + p[y + 1, x] + p[y + 1, x + 2] - 4 * p[y + 1, x + 1]
    return out


def central_difference_check(fn, params, probes=20, eps=1e-6, seed=0):
    """Compare autograd gradients with central differences at random coordinates.

    ``fn`` maps the list of double tensors ``params`` to a scalar tensor.
    Returns the list of relative errors ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, 1e-8)``
    (absolute error is used when both are below ``1e-8``).
    """
    import torch

    for p in params:
        p.requires_grad_(True)
        if p.grad is not None:
            p.grad = None
    loss = fn(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    errors = []
    sizes = [p.numel() for p in params]
    for _ in range(probes):
        k = int(rng.choice(len(params), p=np.array(sizes) / sum(sizes)))
        i = int(rng.integers(sizes[k]))
        p = params[k]
        flat = p.data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            up = fn(params).item()
            flat[i] = orig - eps
            down = fn(params).item()
            flat[i] = orig
        fd = (up - down) / (2 * eps)
        g = 0.0 if grads[k] is None else grads[k].reshape(-1)[i].item()
        scale = max(abs(g), abs(fd))
        errors.append(abs(g - fd) if scale < 1e-8 else abs(g - fd) / scale)
    return errors


def vif_reference(dist, ref, sigma_nsq=2.0):
    """Four-scale pixel-domain VIF in the classic ``vifp_mscale`` formulation."""
    ref = np.asarray(ref, np.float64) * 255.0
    dist = np.asarray(dist, np.float64) * 255.0
    eps = 1e-10
    num = den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = np.outer(gaussian_1d(n, n / 5.0), gaussian_1d(n, n / 5.0))
        f = lambda z: convolve2d(z, np.rot90(win, 2), mode="valid")
        if scale > 1:
            ref = f(ref)[::2, ::2]
            dist = f(dist)[::2, ::2]
        mu1, mu2 = f(ref), f(dist)
        s1 = f(ref * ref) - mu1 * mu1
        s2 = f(dist * dist) - mu2 * mu2
        s12 = f(ref * dist) - mu1 * mu2
        s1 = np.maximum(s1, 0)
        s2 = np.maximum(s2, 0)
        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        for y in range(g.shape[0]):
            for x in range(g.shape[1]):
                if s1[y, x] < eps:
                    g[y, x] = 0
                    sv[y, x] = s2[y, x]
                    s1[y, x] = 0
                if s2[y, x] < eps:
                    g[y, x] = 0
                    sv[y, x] = 0
                if g[y, x] < 0:
                    sv[y, x] = s2[y, x]
                    g[y, x] = 0
                sv[y, x] = max(sv[y, x], eps)
        num += np.sum(np.log10(1 + g * g * s1 / (sv + sigma_nsq)))
        den += np.sum(np.log10(1 + s1 / sigma_nsq))
    return num / den
