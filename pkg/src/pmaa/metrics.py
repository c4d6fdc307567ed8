"""Peak signal-to-noise ratio, structural similarity, and dataset evaluation.

Metrics are computed on [0, 1]-mapped images (``data_range = 1``) across all
four spectral channels.  SSIM uses the canonical settings of the measure:
an 11x11 Gaussian window with sigma 1.5 normalized to sum 1, K1 = 0.01,
K2 = 0.03, biased (weighted) moments, and valid window positions only.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pmaa.tensor import Tensor, no_grad

__all__ = ["psnr", "ssim", "MetricsReport", "evaluate_dataset",
           "SSIM_WINDOW", "SSIM_SIGMA"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"metrics expect rank-4 arrays, got rank {arr.ndim}")
    return arr


def psnr(a, b, data_range: float = 1.0) -> float:
    """10 * log10(range^2 / MSE), in dB; +inf for identical images."""
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ValueError(f"psnr: shape mismatch {av.shape} vs {bv.shape}")
    if data_range <= 0:
        raise ValueError(f"psnr: data_range must be > 0, got {data_range}")
    mse = float(np.mean((av - bv) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """2-D Gaussian kernel normalized to sum 1."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean structural similarity over valid window positions, channels, batch."""
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ValueError(f"ssim: shape mismatch {av.shape} vs {bv.shape}")
    if data_range <= 0:
        raise ValueError(f"ssim: data_range must be > 0, got {data_range}")
    h, w = av.shape[2], av.shape[3]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim: spatial size {h}x{w} smaller than the {SSIM_WINDOW}-pixel window")

    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(img):
        views = sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW), axis=(2, 3))
        return np.tensordot(views, win, axes=([4, 5], [0, 1]))

    mu_a = filt(av)
    mu_b = filt(bv)
    # Biased weighted moments.
    var_a = filt(av * av) - mu_a * mu_a
    var_b = filt(bv * bv) - mu_b * mu_b
    cov = filt(av * bv) - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    """Per-sample PSNR (dB) and SSIM plus dataset means.

    Samples with identical prediction and target report PSNR = +inf; such
    entries are excluded from the PSNR mean and counted in ``psnr_inf_count``.
    """

    sample_ids: list[str] = field(default_factory=list)
    psnr_values: list[float] = field(default_factory=list)
    ssim_values: list[float] = field(default_factory=list)

    def add(self, sample_id: str, psnr_db: float, ssim_value: float) -> None:
        self.sample_ids.append(sample_id)
        self.psnr_values.append(psnr_db)
        self.ssim_values.append(ssim_value)

    @property
    def psnr_inf_count(self) -> int:
        return sum(1 for v in self.psnr_values if math.isinf(v))

    @property
    def mean_psnr(self) -> float:
        finite = [v for v in self.psnr_values if not math.isinf(v)]
        if not finite:
            return math.inf if self.psnr_values else 0.0
        return sum(finite) / len(finite)

    @property
    def mean_ssim(self) -> float:
        if not self.ssim_values:
            return 0.0
        return sum(self.ssim_values) / len(self.ssim_values)

    def to_text(self) -> str:
        lines = []
        for sid, p, s in zip(self.sample_ids, self.psnr_values, self.ssim_values):
            p_txt = "inf" if math.isinf(p) else f"{p:.6f}"
            lines.append(f"sample.{sid}.psnr\t{p_txt}")
            lines.append(f"sample.{sid}.ssim\t{s:.6f}")
        mean_p = self.mean_psnr
        lines.append(f"mean.psnr\t{'inf' if math.isinf(mean_p) else f'{mean_p:.6f}'}")
        lines.append(f"mean.ssim\t{self.mean_ssim:.6f}")
        lines.append(f"psnr.inf_count\t{self.psnr_inf_count}")
        return "\n".join(lines) + "\n"


def to_unit_range(x) -> np.ndarray:
    """Map a [-1, 1] model-range image to [0, 1] for metric computation."""
    return (_as_array(x) + 1.0) / 2.0


def evaluate_dataset(model, samples) -> MetricsReport:
    """Run the model per sample in manifest order; report PSNR/SSIM on [0, 1]."""
    if not samples:
        raise ValueError("evaluate_dataset: dataset is empty")
    report = MetricsReport()
    with no_grad():
        for sample in samples:
            pred, _ = model(*sample.cloudy)
            pv = to_unit_range(pred)
            tv = to_unit_range(sample.target)
            report.add(sample.id, psnr(pv, tv, 1.0), ssim(pv, tv, 1.0))
    return report
