"""Image quality metrics."""
import math

import numpy as np

from .exceptions import IdenticalImages, InvalidParam, ShapeMismatch


def _pair(u, ref):
    u = np.asarray(u, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if u.shape != ref.shape:
        raise ShapeMismatch(f"images of shape {u.shape} and {ref.shape}")
    return u, ref


def mse(u, ref):
    u, ref = _pair(u, ref)
    return float(np.mean((u - ref) ** 2))


def psnr(u, ref, peak=1.0, strict=False):
    """Peak signal-to-noise ratio in dB.

    Identical images give ``inf``, or raise IdenticalImages if ``strict``.
    """
    if not peak > 0:
        raise InvalidParam("peak must be positive")
    err = mse(u, ref)
    if err == 0.0:
        if strict:
            raise IdenticalImages("PSNR of identical images is unbounded")
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def _windows(x, window):
    m1, m2 = x.shape
    w1, w2 = min(window, m1), min(window, m2)
    k1, k2 = m1 // w1, m2 // w2
    x = x[:k1 * w1, :k2 * w2]
    return x.reshape(k1, w1, k2, w2).transpose(0, 2, 1, 3).reshape(k1 * k2, w1 * w2)


def ssim(u, ref, window=8, peak=1.0, k1=0.01, k2=0.03):
    """Mean structural similarity over non-overlapping ``window``-square tiles.

    Rows and columns beyond the last full tile are ignored; images smaller
    than a tile form a single tile. Moments are population moments.
    """
    u, ref = _pair(u, ref)
    if u.ndim == 1:
        u, ref = u[None, :], ref[None, :]
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    a = _windows(u, window)
    b = _windows(ref, window)
    mu_a = a.mean(axis=1)
    mu_b = b.mean(axis=1)
    da = a - mu_a[:, None]
    db = b - mu_b[:, None]
    var_a = np.mean(da * da, axis=1)
    var_b = np.mean(db * db, axis=1)
    cov = np.mean(da * db, axis=1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
