"""PSNR, SSIM and spectral angle, per band and averaged.

PSNR and SSIM come from :mod:`skimage.metrics`, computed band by band in
float64. SSIM uses the Gaussian-weighted 11x11 window (sigma 1.5) with
population statistics.
"""

import csv
import dataclasses
import math
import os

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from .cube import HSICube
from .errors import IoError, ParamError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SAM_EPS = 1e-8
CSV_FIELDS = ("band", "psnr_db", "ssim", "sam_rad")


def _arrays(est, ref, data_range=None) -> tuple[np.ndarray, np.ndarray]:
    e = est.data if isinstance(est, HSICube) else np.asarray(est)
    r = ref.data if isinstance(ref, HSICube) else np.asarray(ref)
    if e.shape != r.shape:
        raise ShapeError("Shapes differ: %r vs %r." % (e.shape, r.shape))
    if e.ndim != 3:
        raise ShapeError("Expected (bands, height, width) arrays, got shape %r." % (e.shape,))
    if data_range is not None and not data_range > 0:
        raise ParamError("data_range must be positive, got %g." % data_range)
    return e.astype(np.float64), r.astype(np.float64)


def psnr(est, ref, data_range: float = 1.0) -> tuple[float, list[float]]:
    """Mean and per-band PSNR in dB.

    A band with zero error scores ``inf`` and is left out of the mean; the
    mean is ``inf`` only if every band is exact.
    """
    e, r = _arrays(est, ref, data_range)
    with np.errstate(divide="ignore"):
        per_band = [float(peak_signal_noise_ratio(rb, eb, data_range=data_range)) for eb, rb in zip(e, r)]
    finite = [p for p in per_band if math.isfinite(p)]
    mean = float(np.mean(finite)) if finite else math.inf
    return mean, per_band


def ssim(est, ref, data_range: float = 1.0) -> tuple[float, list[float]]:
    e, r = _arrays(est, ref, data_range)
    if min(e.shape[1:]) < SSIM_WINDOW:
        raise ShapeError(
            "SSIM needs height and width >= %d, got %dx%d." % ((SSIM_WINDOW,) + e.shape[1:])
        )
    per_band = [
        float(
            structural_similarity(
                rb,
                eb,
                data_range=data_range,
                gaussian_weights=True,
                sigma=SSIM_SIGMA,
                use_sample_covariance=False,
            )
        )
        for eb, rb in zip(e, r)
    ]
    return float(np.mean(per_band)), per_band


def sam(est, ref) -> tuple[float, np.ndarray]:
    """Spectral angle in radians: the mean and the per-pixel ``(H, W)`` map.

    Pixels where either spectrum is (nearly) zero count as angle 0.
    """
    e, r = _arrays(est, ref)
    if e.shape[0] < 2:
        raise ShapeError("SAM needs at least 2 bands, got %d." % e.shape[0])
    dot = np.sum(e * r, axis=0)
    norms = np.linalg.norm(e, axis=0) * np.linalg.norm(r, axis=0)
    valid = (np.linalg.norm(e, axis=0) >= SAM_EPS) & (np.linalg.norm(r, axis=0) >= SAM_EPS)
    cosine = np.divide(dot, norms, out=np.ones_like(dot), where=valid)
    angles = np.where(valid, np.arccos(np.clip(cosine, -1.0, 1.0)), 0.0)
    return float(angles.mean()), angles


@dataclasses.dataclass
class MetricsTable:
    psnr_mean: float
    ssim_mean: float
    sam_mean: float
    per_band_psnr: list[float]
    per_band_ssim: list[float]

    @property
    def infinite_bands(self) -> int:
        return sum(1 for p in self.per_band_psnr if math.isinf(p))

    def summary_line(self) -> str:
        return "PSNR=%.2f SSIM=%.4f SAM=%.4f" % (self.psnr_mean, self.ssim_mean, self.sam_mean)

    def save(self, path: str | os.PathLike) -> None:
        """Write one row per band and a closing ``mean`` row holding SAM."""
        try:
            with open(path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(CSV_FIELDS)
                for band, (p, s) in enumerate(zip(self.per_band_psnr, self.per_band_ssim)):
                    writer.writerow([band, repr(p), repr(s), ""])
                writer.writerow(["mean", repr(self.psnr_mean), repr(self.ssim_mean), repr(self.sam_mean)])
        except OSError as err:
            raise IoError(err.errno, "Cannot write metrics table: %s" % err.strerror, str(path)) from err

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MetricsTable":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        bands, summary = rows[:-1], rows[-1]
        return cls(
            psnr_mean=float(summary["psnr_db"]),
            ssim_mean=float(summary["ssim"]),
            sam_mean=float(summary["sam_rad"]),
            per_band_psnr=[float(r["psnr_db"]) for r in bands],
            per_band_ssim=[float(r["ssim"]) for r in bands],
        )


def compute_metrics(est, ref, data_range: float = 1.0) -> MetricsTable:
    psnr_mean, per_band_psnr = psnr(est, ref, data_range)
    ssim_mean, per_band_ssim = ssim(est, ref, data_range)
    sam_mean, _ = sam(est, ref)
    return MetricsTable(psnr_mean, ssim_mean, sam_mean, per_band_psnr, per_band_ssim)
