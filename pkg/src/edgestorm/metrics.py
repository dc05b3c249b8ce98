"""Image degradation measurements: normalized L2, SSIM, Laplacian and Edge-SSIM."""

import numpy as np
from scipy import ndimage

from edgestorm.errors import RejectedInput, UndefinedMetric

LUMA = np.array([0.299, 0.587, 0.114])
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
# Laplacian maps are compared with the 8-bit SSIM constants; the full
# -1020..1020 span would inflate C1/C2 64-fold and hide structural change
EDGE_DATA_RANGE = 255.0
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def luma(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[2] == 1:
            return x[..., 0]
        return x @ LUMA
    return x


def normalized_l2(x, x_adv):
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise RejectedInput("images differ in extent")
    denom = np.linalg.norm(x.ravel())
    if denom == 0:
        raise UndefinedMetric("normalized L2 is undefined for an all-zero reference image")
    return float(np.linalg.norm((x - x_adv).ravel()) / denom)


def gaussian_window(size=WINDOW, sigma=SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(a, win):
    return ndimage.correlate(a, win, mode="constant")[
        win.shape[0] // 2 : a.shape[0] - win.shape[0] // 2, win.shape[1] // 2 : a.shape[1] - win.shape[1] // 2
    ]


def ssim_map(x, y, data_range=255.0):
    x, y = luma(x), luma(y)
    if x.shape != y.shape:
        raise RejectedInput("images differ in extent")
    if min(x.shape) < WINDOW:
        raise RejectedInput(f"image {x.shape} is smaller than the {WINDOW}x{WINDOW} window")
    win = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(x, y, data_range=255.0):
    """Mean SSIM over all fully-covered 11x11 Gaussian windows (sigma 1.5)."""
    return float(np.mean(ssim_map(x, y, data_range)))


def laplacian_map(x):
    return ndimage.correlate(luma(x), LAPLACIAN, mode="nearest")


def mean_abs_laplacian(x):
    return float(np.mean(np.abs(laplacian_map(x))))


def essim(x, y):
    """SSIM of the two Laplacian maps."""
    return ssim(laplacian_map(x), laplacian_map(y), data_range=EDGE_DATA_RANGE)


def degradation_row(x, x_adv):
    """Metrics in reporting order: l2, ssim, essim, laplacian (of the attacked image)."""
    return {
        "l2": normalized_l2(x, x_adv),
        "ssim": ssim(x, x_adv),
        "essim": essim(x, x_adv),
        "laplacian": mean_abs_laplacian(x_adv),
    }
