"""Learnable building blocks of the denoiser.

Feature maps are batched ``(N, C, H, W)`` tensors. Scale ``s`` carries
``C * 2**s`` channels at ``1 / 2**s`` of the full resolution.
"""

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError

LEAKY_SLOPE = 0.2
AIN_EPS = 1e-5
NUM_SCALES = 3
FUSION_MODES = ("split", "channel", "concat", "multiply", "sum")


def act(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


def conv3x3(in_channels: int, out_channels: int, stride: int = 1, **kwargs) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, **kwargs)


def conv1x1(in_channels: int, out_channels: int) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, 1)


def _check_map(x: torch.Tensor, channels: int, name: str) -> None:
    if x.dim() != 4:
        raise ShapeError("%s must be an (N, C, H, W) tensor, got shape %r." % (name, tuple(x.shape)))
    if x.shape[1] != channels:
        raise ShapeError("%s must have %d channels, got %d." % (name, channels, x.shape[1]))


def instance_stats(h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample, per-channel spatial mean and population standard deviation.

    Returns two ``(N, C)`` tensors.
    """
    if h.dim() != 4 or h.shape[-1] * h.shape[-2] < 1:
        raise ShapeError("instance_stats needs a non-empty (N, C, H, W) tensor, got %r." % (tuple(h.shape),))
    mu = h.mean(dim=(2, 3))
    sigma = h.var(dim=(2, 3), unbiased=False).sqrt()
    return mu, sigma


def instance_normalize(h: torch.Tensor, eps: float = AIN_EPS) -> torch.Tensor:
    """``(h - mu) / sqrt(sigma**2 + eps)`` per sample and channel."""
    mu = h.mean(dim=(2, 3), keepdim=True)
    var = h.var(dim=(2, 3), unbiased=False, keepdim=True)
    return (h - mu) / torch.sqrt(var + eps)


class AIN(nn.Module):
    """Adaptive instance normalization guided by the next coarser scale.

    ``h'`` (2C channels, half resolution) is brought to ``h``'s shape with a
    transposed convolution, two 3x3 heads read pixel-wise ``gamma`` and
    ``beta`` maps off it, and the instance-normalized ``h`` is modulated by
    them. The result passes one more convolution and is added back onto ``h``.

    With ``adaptive=False`` the normalization and modulation are skipped and
    the upsampled ``h'`` is fused directly.
    """

    def __init__(self, channels: int, eps: float = AIN_EPS, adaptive: bool = True):
        super().__init__()
        if eps <= 0:
            raise ConfigError("AIN epsilon must be positive, got %g." % eps)
        self.channels = channels
        self.eps = eps
        self.adaptive = adaptive
        self.upsample = nn.ConvTranspose2d(2 * channels, channels, 4, stride=2, padding=1)
        if adaptive:
            self.gamma_head = conv3x3(channels, channels, padding_mode="reflect")
            self.beta_head = conv3x3(channels, channels, padding_mode="reflect")
            nn.init.ones_(self.gamma_head.bias)
            nn.init.zeros_(self.beta_head.bias)
        self.out_conv = conv3x3(channels, channels)

    def _check(self, h, h_prime):
        _check_map(h, self.channels, "h")
        _check_map(h_prime, 2 * self.channels, "h'")
        if h.shape[0] != h_prime.shape[0] or tuple(h.shape[2:]) != tuple(2 * s for s in h_prime.shape[2:]):
            raise ShapeError(
                "h' must be half the size of h, got %r and %r." % (tuple(h_prime.shape), tuple(h.shape))
            )

    def affine_maps(self, h_prime: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        up = act(self.upsample(h_prime))
        return self.gamma_head(up), self.beta_head(up)

    def modulate(self, h: torch.Tensor, h_prime: torch.Tensor) -> torch.Tensor:
        """Return ``h_new``, the feature that goes into the output convolution."""
        self._check(h, h_prime)
        if not self.adaptive:
            return act(self.upsample(h_prime))
        gamma, beta = self.affine_maps(h_prime)
        return gamma * instance_normalize(h, self.eps) + beta

    def forward(self, h: torch.Tensor, h_prime: torch.Tensor) -> torch.Tensor:
        return h + self.out_conv(self.modulate(h, h_prime))


class ScaleTransform(nn.Module):
    """Resolve a feature map from one scale to another.

    Going down uses one strided 3x3 convolution per halving, going up a 1x1
    convolution followed by nearest-neighbour upsampling. Staying on the same
    scale is the identity and holds no parameters.
    """

    def __init__(self, base_channels: int, from_scale: int, to_scale: int):
        super().__init__()
        for s in (from_scale, to_scale):
            if not 0 <= s < NUM_SCALES:
                raise ConfigError("Scale index must be in [0, %d), got %d." % (NUM_SCALES, s))
        self.from_scale = from_scale
        self.to_scale = to_scale
        self.in_channels = base_channels << from_scale
        self.out_channels = base_channels << to_scale
        steps = to_scale - from_scale
        if steps > 0:
            layers = [conv3x3(self.in_channels, self.in_channels, stride=2) for _ in range(steps - 1)]
            layers.append(conv3x3(self.in_channels, self.out_channels, stride=2))
            self.down = nn.ModuleList(layers)
        elif steps < 0:
            self.conv = conv1x1(self.in_channels, self.out_channels)
            self.factor = 2 ** -steps

    @property
    def is_identity(self) -> bool:
        return self.from_scale == self.to_scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_map(x, self.in_channels, "Scale %d input" % self.from_scale)
        if self.is_identity:
            return x
        if self.to_scale > self.from_scale:
            for i, conv in enumerate(self.down):
                x = conv(x)
                if i < len(self.down) - 1:
                    x = act(x)
            return x
        return F.interpolate(self.conv(x), scale_factor=self.factor, mode="nearest")


class SelfCalibration(nn.Module):
    """Self-calibrated convolution over a channel-split feature map.

    One half is gated by ``sigmoid(A + up(conv(avgpool(A))))``, a response
    that sees a 4x larger field of view, before a 1x1 projection. The other
    half goes through a plain 1x1 convolution.
    """

    def __init__(self, channels: int, pooling: int = 4):
        super().__init__()
        if channels % 2:
            raise ShapeError("Self-calibration splits channels in half, got %d channels." % channels)
        half = channels // 2
        self.channels = channels
        self.pooling = pooling
        self.calibrate = conv3x3(half, half)
        self.transform = conv3x3(half, half)
        self.project = conv1x1(half, half)
        self.plain = conv1x1(half, half)

    def gate(self, a: torch.Tensor) -> torch.Tensor:
        k = min(self.pooling, a.shape[-2], a.shape[-1])
        latent = F.avg_pool2d(a, k, stride=k, ceil_mode=True)
        up = F.interpolate(self.calibrate(latent), size=a.shape[-2:], mode="nearest")
        return torch.sigmoid(a + up)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() != 4 or y.shape[1] % 2:
            raise ShapeError("Self-calibration needs an even channel count, got shape %r." % (tuple(y.shape),))
        _check_map(y, self.channels, "Self-calibration input")
        a, b = y.chunk(2, dim=1)
        a = self.project(self.transform(a) * self.gate(a))
        b = self.plain(b)
        return torch.cat([a, b], dim=1)


class CoAttention(nn.Module):
    """Fuse three same-shape feature maps with per-channel branch weights.

    The default ``split`` fusion pools the concatenated inputs, squeezes the
    descriptor by ``reduction``, predicts one logit per branch and channel and
    takes a softmax across the branches. The weighted sum is then passed
    through :class:`SelfCalibration`.

    The other ``fusion`` modes are kept for ablations: ``channel`` is
    squeeze-and-excitation on the summed inputs, ``concat`` a 1x1 convolution
    over the concatenation, ``multiply`` the element-wise product and ``sum``
    the plain sum.
    """

    def __init__(
        self,
        channels: int,
        reduction: int = 4,
        branches: int = NUM_SCALES,
        fusion: str = "split",
        self_calibration: bool = True,
    ):
        super().__init__()
        if reduction < 1:
            raise ConfigError("Reduction ratio must be at least 1, got %d." % reduction)
        if fusion not in FUSION_MODES:
            raise ConfigError("Unknown fusion mode %r, expected one of %s." % (fusion, ", ".join(FUSION_MODES)))
        self.channels = channels
        self.branches = branches
        self.reduction = reduction
        self.fusion = fusion
        if fusion == "split":
            hidden = math.ceil(branches * channels / reduction)
            self.reduce = conv1x1(branches * channels, hidden)
            self.heads = nn.ModuleList(conv1x1(hidden, channels) for _ in range(branches))
        elif fusion == "channel":
            hidden = math.ceil(channels / reduction)
            self.squeeze = conv1x1(channels, hidden)
            self.excite = conv1x1(hidden, channels)
        elif fusion == "concat":
            self.merge = conv1x1(branches * channels, channels)
        self.calibration = SelfCalibration(channels) if self_calibration else None

    def _check(self, ys: Sequence[torch.Tensor]) -> None:
        if len(ys) != self.branches:
            raise ShapeError("Expected %d branches, got %d." % (self.branches, len(ys)))
        for k, y in enumerate(ys):
            _check_map(y, self.channels, "Branch %d" % k)
            if y.shape != ys[0].shape:
                raise ShapeError(
                    "All branches must share one shape, got %r and %r." % (tuple(ys[0].shape), tuple(y.shape))
                )

    def branch_logits(self, ys: Sequence[torch.Tensor]) -> torch.Tensor:
        """Per-branch, per-channel logits as an ``(N, branches, C, 1, 1)`` tensor."""
        self._check(ys)
        s = F.adaptive_avg_pool2d(torch.cat(list(ys), dim=1), 1)
        u = act(self.reduce(s))
        return torch.stack([head(u) for head in self.heads], dim=1)

    def attention(self, ys: Sequence[torch.Tensor]) -> torch.Tensor:
        return torch.softmax(self.branch_logits(ys), dim=1)

    def combine(self, ys: Sequence[torch.Tensor]) -> torch.Tensor:
        """The fused map before self-calibration."""
        self._check(ys)
        if self.fusion == "split":
            alpha = self.attention(ys)
            return sum(alpha[:, k] * y for k, y in enumerate(ys))
        if self.fusion == "channel":
            total = sum(ys)
            s = F.adaptive_avg_pool2d(total, 1)
            return total * torch.sigmoid(self.excite(act(self.squeeze(s))))
        if self.fusion == "concat":
            return self.merge(torch.cat(list(ys), dim=1))
        if self.fusion == "multiply":
            out = ys[0]
            for y in ys[1:]:
                out = out * y
            return out
        return sum(ys)

    def forward(self, *ys: torch.Tensor) -> torch.Tensor:
        fused = self.combine(ys)
        if self.calibration is None:
            return fused
        return self.calibration(fused)


def ain_forward(h: torch.Tensor, h_prime: torch.Tensor, params: AIN) -> torch.Tensor:
    return params(h, h_prime)


def scale_transform(x: torch.Tensor, from_scale: int, to_scale: int, params: ScaleTransform) -> torch.Tensor:
    if (params.from_scale, params.to_scale) != (from_scale, to_scale):
        raise ShapeError(
            "Transform maps scale %d to %d, asked for %d to %d."
            % (params.from_scale, params.to_scale, from_scale, to_scale)
        )
    return params(x)


def co_attention_fuse(y1: torch.Tensor, y2: torch.Tensor, y3: torch.Tensor, params: CoAttention) -> torch.Tensor:
    return params(y1, y2, y3)


def self_calibrate(y: torch.Tensor, params: SelfCalibration) -> torch.Tensor:
    return params(y)
