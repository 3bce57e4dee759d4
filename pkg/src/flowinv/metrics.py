"""Reconstruction and edit-quality metrics."""
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels

PSNR_CAP = 99.0
SSIM_WIN = 8
SSIM_STRIDE = 4
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err, max_val=1.0):
    if err <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val * max_val / err))


def psnr(a, b, max_val=1.0):
    """PSNR in dB; identical inputs report the 99 dB cap."""
    return psnr_from_mse(mse(a, b), max_val)


def ssim(a, b, data_range=1.0):
    """Windowed SSIM: 8x8 uniform windows at stride 4, unbiased window
    (co)variances, averaged over windows and then channels. Accepts [C, H, W] or [H, W]."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3 or a.shape[1] < SSIM_WIN or a.shape[2] < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return float(np.mean([kernels.ssim_channel(a[c], b[c], SSIM_WIN, SSIM_STRIDE, c1, c2) for c in range(a.shape[0])]))


@dataclass
class RegionReport:
    bg_mse: float
    bg_psnr: float
    bg_ssim: float
    edit_score: float

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def row(self):
        return [getattr(self, c) for c in self.columns()]

    def as_dict(self):
        return asdict(self)


def attribute_score(image, region_mask, source_channel, target_channel):
    """Mean target-channel minus mean source-channel intensity inside the region,
    on the image clipped to [0, 1] (so the score lies in [-1, 1])."""
    region = np.asarray(region_mask, dtype=bool)
    if not region.any():
        raise ValueError("empty edit region")
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return float(img[target_channel][region].mean() - img[source_channel][region].mean())


def region_report(original, edited, region_mask, source_color, target_color):
    """Background fidelity outside ``region_mask`` and attribute change inside it.

    Background SSIM is taken between the original and the edited image with
    the region pasted back from the original, so only background pixels differ.
    """
    original, edited = _pair(original, edited)
    region = np.asarray(region_mask, dtype=bool)
    if region.shape != original.shape[1:]:
        raise ValueError(f"mask shape {region.shape} does not match spatial dims {original.shape[1:]}")
    bg = ~region
    if not bg.any():
        raise ValueError("empty background")
    err = float(np.mean((original[:, bg] - edited[:, bg]) ** 2))
    pasted = np.where(region[None], original, edited)
    return RegionReport(
        bg_mse=err,
        bg_psnr=psnr_from_mse(err),
        bg_ssim=ssim(original, pasted),
        edit_score=attribute_score(edited, region, source_color, target_color),
    )
