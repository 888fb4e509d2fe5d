"""Per-band metric curves and training loss curves, written as SVG.

Each figure stores its axis limits and data range as JSON in the SVG
``Description`` metadata, so the limits can be read back without rendering.
"""

import json
import logging
import math
import os
import re
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import FormatError, IoError, ParamError  # noqa: E402
from .metrics import MetricsTable  # noqa: E402

logger = logging.getLogger(__name__)

GOLDEN_RATIO = (math.sqrt(5) - 1.0) / 2.0
_DESCRIPTION = re.compile(r"<dc:description>(.*?)</dc:description>", re.S)


def _figure(width: float = 6.0):
    fig, ax = plt.subplots(figsize=(width, width * GOLDEN_RATIO))
    ax.grid(True, linewidth=0.5, alpha=0.5)
    return fig, ax


def _limits(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    margin = 0.05 * (hi - lo) if hi > lo else max(abs(hi) * 0.05, 1e-3)
    return lo - margin, hi + margin


def savefig(fig, path: str | os.PathLike, data: Sequence[float]) -> None:
    ax = fig.axes[0]
    ax.set_ylim(*_limits(data))
    info = {
        "xlim": [float(v) for v in ax.get_xlim()],
        "ylim": [float(v) for v in ax.get_ylim()],
        "data_min": float(min(data)),
        "data_max": float(max(data)),
    }
    with matplotlib.rc_context({"svg.hashsalt": "mafnet", "svg.fonttype": "none"}):
        try:
            fig.savefig(path, format="svg", metadata={"Date": None, "Description": json.dumps(info)})
        except OSError as err:
            raise IoError(err.errno, "Cannot write figure: %s" % err.strerror, str(path)) from err
        finally:
            plt.close(fig)
    logger.debug("Figure saved to `%s`", path)


def read_limits(path: str | os.PathLike) -> dict:
    """Read back the limits that :func:`savefig` stored in an SVG file."""
    with open(path) as f:
        match = _DESCRIPTION.search(f.read())
    if match is None:
        raise FormatError("%s carries no figure description." % os.fspath(path))
    return json.loads(match.group(1).replace("&quot;", '"'))


def plot_band_metrics(table: MetricsTable, outdir: str | os.PathLike, prefix: str = "") -> list[str]:
    """Write ``psnr_per_band.svg`` and ``ssim_per_band.svg``.

    Bands with infinite PSNR are left out of the PSNR curve.
    """
    paths = []
    series = (
        ("psnr_per_band", "PSNR (dB)", table.per_band_psnr),
        ("ssim_per_band", "SSIM", table.per_band_ssim),
    )
    for name, label, values in series:
        points = [(b, v) for b, v in enumerate(values) if math.isfinite(v)]
        if not points:
            logger.warning("No finite values for %s, skipping", name)
            continue
        bands, ys = zip(*points)
        fig, ax = _figure()
        ax.plot(bands, ys, marker="o", markersize=3)
        ax.set_xlabel("Band")
        ax.set_ylabel(label)
        path = os.path.join(outdir, prefix + name + ".svg")
        savefig(fig, path, ys)
        paths.append(path)
    return paths


def parse_training_log(path: str | os.PathLike) -> list[tuple[str, int, float, float, float, float]]:
    """Parse ``stage epoch lr loss_rec loss_grad loss_total`` lines."""
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 6:
                raise FormatError("%s:%d is not a training log line." % (os.fspath(path), lineno))
            stage, epoch, *numbers = fields
            rows.append((stage, int(epoch), *(float(n) for n in numbers)))
    return rows


def plot_loss_curves(curves: Mapping[str, Sequence[float]], path: str | os.PathLike) -> str:
    """Overlay total-loss curves, one per label, against the running epoch."""
    if not curves:
        raise ParamError("No loss curves to plot.")
    fig, ax = _figure()
    everything = []
    for label, losses in curves.items():
        ax.plot(range(1, len(losses) + 1), losses, label=label)
        everything.extend(losses)
    if not everything:
        plt.close(fig)
        raise ParamError("Loss curves are empty.")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Loss")
    ax.legend(loc="upper right")
    savefig(fig, path, everything)
    return os.fspath(path)
