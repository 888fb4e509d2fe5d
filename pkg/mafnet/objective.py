"""Training losses: L1 reconstruction plus a spatial-spectral gradient term.

All functions take tensors whose last three axes are (band, row, column);
leading batch axes are allowed. :class:`~mafnet.cube.HSICube` arguments
are converted on the way in.
"""

import dataclasses

import torch

from .cube import HSICube
from .errors import ParamError, ShapeError

DEFAULT_GRAD_WEIGHT = 0.01
_AXES = {"horizontal": -1, "vertical": -2, "spectral": -3}


def _tensor(x) -> torch.Tensor:
    if isinstance(x, HSICube):
        return torch.from_numpy(x.data.astype("float64"))
    return x


def _pair(est, ref) -> tuple[torch.Tensor, torch.Tensor]:
    est, ref = _tensor(est), _tensor(ref)
    if est.shape != ref.shape:
        raise ShapeError("Shapes differ: %r vs %r." % (tuple(est.shape), tuple(ref.shape)))
    if est.dim() < 3:
        raise ShapeError("Expected (..., B, H, W) tensors, got shape %r." % (tuple(est.shape),))
    return est, ref


def forward_difference(x: torch.Tensor, axis: int) -> torch.Tensor:
    """``x[k + 1] - x[k]`` along ``axis``, with a zero last slice."""
    if x.shape[axis] < 2:
        raise ShapeError("Axis %d has length %d; a difference needs at least 2." % (axis, x.shape[axis]))
    diff = torch.diff(x, dim=axis)
    pad = torch.zeros_like(x.narrow(axis, 0, 1))
    return torch.cat([diff, pad], dim=axis)


def spatial_spectral_gradients(cube) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Horizontal, vertical and spectral forward differences of ``cube``."""
    x = _tensor(cube)
    return tuple(forward_difference(x, axis) for axis in _AXES.values())


def rec_loss(est, ref) -> torch.Tensor:
    est, ref = _pair(est, ref)
    return (est - ref).abs().mean()


def grad_loss(est, ref) -> torch.Tensor:
    """Sum over the three directions of the mean squared gradient mismatch."""
    est, ref = _pair(est, ref)
    total = est.new_zeros(())
    for axis in _AXES.values():
        total = total + (forward_difference(est, axis) - forward_difference(ref, axis)).pow(2).mean()
    return total


@dataclasses.dataclass
class LossBreakdown:
    rec: torch.Tensor
    grad: torch.Tensor
    total: torch.Tensor
    weight: float

    def as_floats(self) -> tuple[float, float, float]:
        return self.rec.item(), self.grad.item(), self.total.item()

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total)) and bool(torch.isfinite(self.grad))


def total_loss(est, ref, weight: float = DEFAULT_GRAD_WEIGHT) -> LossBreakdown:
    """``rec + weight * grad``."""
    if weight < 0:
        raise ParamError("Gradient loss weight must be >= 0, got %g." % weight)
    rec = rec_loss(est, ref)
    grad = grad_loss(est, ref)
    return LossBreakdown(rec=rec, grad=grad, total=rec + weight * grad, weight=float(weight))
