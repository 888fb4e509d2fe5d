"""The multiscale adaptive fusion denoiser.

A noisy cube goes through three stages:

* an initial layer that lifts the full, 1/2 and 1/4 resolution pyramid
  levels to ``(C, 2C, 4C)`` feature channels;
* a coarse-fusion network where information flows only from low to high
  resolution, through :class:`~mafnet.blocks.AIN` stages;
* a fine-fusion network where every scale is rebuilt from all three with
  co-attention.

The full-resolution result is fused once more and a last convolution
predicts the noise, which is subtracted from the input.
"""

import dataclasses
import logging
import os
from collections import OrderedDict
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn

from ._codec import decode_mafw, encode_mafw
from .blocks import AIN, FUSION_MODES, NUM_SCALES, CoAttention, ScaleTransform, act, conv3x3
from .cube import HSICube, _mirror_indices, pyramid_down
from .errors import ConfigError, FormatError, IoError, ShapeError

logger = logging.getLogger(__name__)

VARIANTS = {"S": 32, "B": 64, "L": 128}


@dataclasses.dataclass(frozen=True)
class NetworkConfig:
    bands: int = 31
    base_channels: int = 64
    coarse_blocks: int = 4
    fine_layers: int = 3
    reduction: int = 4
    seed: int = 0
    use_ain: bool = True
    fusion: str = "split"
    self_calibration: bool = True

    @classmethod
    def variant(cls, name: str, **overrides) -> "NetworkConfig":
        """The S, B and L widths: 32, 64 and 128 channels at full resolution."""
        try:
            base = VARIANTS[name.upper()]
        except KeyError:
            raise ConfigError("Unknown variant %r, expected one of S, B, L." % name) from None
        return cls(base_channels=base, **overrides)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels << s for s in range(NUM_SCALES))

    def validate(self) -> "NetworkConfig":
        if self.bands < 1:
            raise ConfigError("bands must be >= 1, got %d." % self.bands)
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError("base_channels must be a positive even number, got %d." % self.base_channels)
        if self.coarse_blocks < 0:
            raise ConfigError("coarse_blocks must be >= 0, got %d." % self.coarse_blocks)
        if self.fine_layers < 1:
            raise ConfigError("fine_layers must be >= 1, got %d." % self.fine_layers)
        if self.reduction < 1:
            raise ConfigError("reduction must be >= 1, got %d." % self.reduction)
        if self.fusion not in FUSION_MODES:
            raise ConfigError("Unknown fusion mode %r." % self.fusion)
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError("Unknown network config keys: %s." % ", ".join(sorted(unknown)))
        return cls(**data).validate()


class CoarseFusion(nn.Module):
    """Low-to-high resolution fusion.

    Each block runs the 1/4 scale through a residual 3x3 convolution, then
    feeds it to the 1/2 scale AIN, whose output guides the full-scale AIN.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        c0, c1, c2 = config.channels
        n = config.coarse_blocks
        self.low = nn.ModuleList(conv3x3(c2, c2) for _ in range(n))
        self.mid = nn.ModuleList(AIN(c1, adaptive=config.use_ain) for _ in range(n))
        self.high = nn.ModuleList(AIN(c0, adaptive=config.use_ain) for _ in range(n))

    def forward(self, x0, x1, x2):
        for low, mid, high in zip(self.low, self.mid, self.high):
            x2 = x2 + act(low(x2))
            x1 = mid(x1, x2)
            x0 = high(x0, x1)
        return x0, x1, x2


class FineFusionLayer(nn.Module):
    """Rebuild every scale from all three with one co-attention module each."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        c = config.base_channels
        self.transforms = nn.ModuleList(
            nn.ModuleList(ScaleTransform(c, src, dst) for src in range(NUM_SCALES))
            for dst in range(NUM_SCALES)
        )
        self.fuse = nn.ModuleList(
            CoAttention(
                ch,
                reduction=config.reduction,
                fusion=config.fusion,
                self_calibration=config.self_calibration,
            )
            for ch in config.channels
        )

    def resolved(self, xs, dst: int) -> list[torch.Tensor]:
        return [t(x) for t, x in zip(self.transforms[dst], xs)]

    def forward(self, x0, x1, x2):
        xs = (x0, x1, x2)
        return tuple(fuse(*self.resolved(xs, dst)) for dst, fuse in enumerate(self.fuse))


class MAFNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config.validate()
        self.initial = nn.ModuleList(conv3x3(config.bands, ch) for ch in config.channels)
        self.coarse = CoarseFusion(config)
        self.fine = nn.ModuleList(FineFusionLayer(config) for _ in range(config.fine_layers))
        c = config.base_channels
        self.final_transforms = nn.ModuleList(ScaleTransform(c, src, 0) for src in range(NUM_SCALES))
        self.final_fuse = CoAttention(
            c, reduction=config.reduction, fusion=config.fusion, self_calibration=config.self_calibration
        )
        self.reconstruct = conv3x3(c, config.bands)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.config.bands:
            raise ShapeError(
                "Expected an (N, %d, H, W) input, got shape %r." % (self.config.bands, tuple(x.shape))
            )
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError("Height and width must be multiples of 4, got %dx%d." % tuple(x.shape[2:]))

    def initial_features(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        levels = [x]
        for _ in range(NUM_SCALES - 1):
            levels.append(pyramid_down(levels[-1]))
        return tuple(act(conv(level)) for conv, level in zip(self.initial, levels))

    def features(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        self.check_input(x)
        xs = self.coarse(*self.initial_features(x))
        for layer in self.fine:
            xs = layer(*xs)
        return xs

    def attention_weights(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Softmax branch weights of every fine-fusion co-attention module."""
        self.check_input(x)
        weights = []
        xs = self.coarse(*self.initial_features(x))
        for layer in self.fine:
            for dst, fuse in enumerate(layer.fuse):
                if fuse.fusion == "split":
                    weights.append(fuse.attention(layer.resolved(xs, dst)))
            xs = layer(*xs)
        return weights

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Predict the noise in ``x``; the clean estimate is ``x`` minus this."""
        xs = self.features(x)
        fused = self.final_fuse(*(t(f) for t, f in zip(self.final_transforms, xs)))
        return self.reconstruct(fused)


class NetworkHandle:
    """A built network together with its configuration."""

    def __init__(self, config: NetworkConfig, module: MAFNet):
        self.config = config
        self.module = module

    @property
    def weights(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((k, v.detach()) for k, v in self.module.state_dict().items())

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def forward(self, noisy: HSICube) -> tuple[HSICube, HSICube]:
        return forward(self, noisy)

    def __repr__(self) -> str:
        return "NetworkHandle(%r, param_count=%d)" % (self.config, self.param_count)


def build_network(config: NetworkConfig) -> NetworkHandle:
    """Build a network whose initial weights depend only on ``config``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        module = MAFNet(config)
    handle = NetworkHandle(config, module)
    logger.debug("Built %r", handle)
    return handle


def forward(net: NetworkHandle, noisy: HSICube) -> tuple[HSICube, HSICube]:
    """Return ``(residual, denoised)`` with ``denoised = noisy - residual``.

    No padding happens here, see :func:`denoise_cube` for arbitrary sizes.
    """
    if noisy.bands != net.config.bands:
        raise ShapeError("Network expects %d bands, cube has %d." % (net.config.bands, noisy.bands))
    x = noisy.to_tensor()
    with torch.no_grad():
        residual = net.module(x)
    return HSICube.from_tensor(residual), HSICube.from_tensor(x - residual)


def coarse_fusion(features, params: CoarseFusion) -> tuple[torch.Tensor, ...]:
    return params(*features)


def fine_fusion_layer(x1, x2, x3, params: FineFusionLayer) -> tuple[torch.Tensor, ...]:
    return params(x1, x2, x3)


def band_groups(bands: int, group: int) -> list[int]:
    """Start indices of overlapping windows of ``group`` bands, half a window
    apart, the last one flush with the final band."""
    if bands <= group:
        return [0]
    stride = max(1, group // 2)
    starts = list(range(0, bands - group + 1, stride))
    if starts[-1] != bands - group:
        starts.append(bands - group)
    return starts


def _blend_weights(group: int) -> np.ndarray:
    k = np.arange(group)
    return np.minimum(k + 1, group - k).astype(np.float64)


def denoise_cube(net: NetworkHandle, cube: HSICube) -> HSICube:
    """Denoise a cube of any size and band count.

    Height and width are reflected up to multiples of 4 and cropped back.
    Cubes with more bands than the network are processed in overlapping
    band groups whose residuals are blended with triangular weights. Cubes
    with fewer bands (but at least 2) are mirrored along the spectral axis.
    """
    group = net.config.bands
    bands, height, width = cube.shape
    if bands < 2:
        raise ShapeError("Denoising needs at least 2 bands, got %d." % bands)
    data = cube.data.astype(np.float32)
    padded = data[:, _extend(height, -height % 4)][:, :, _extend(width, -width % 4)]

    if bands < group:
        residual = _run(net, padded[_extend(bands, group - bands)])[:bands]
    else:
        weights = _blend_weights(group)
        residual = np.zeros(padded.shape, dtype=np.float64)
        total = np.zeros(bands, dtype=np.float64)
        for start in band_groups(bands, group):
            residual[start : start + group] += weights[:, None, None] * _run(net, padded[start : start + group])
            total[start : start + group] += weights
        residual = residual / total[:, None, None]
    residual = residual[:, :height, :width].astype(np.float32)
    logger.debug("Denoised %r in %d band group(s)", cube, len(band_groups(bands, group)))
    return HSICube(data - residual)


def _extend(size: int, pad: int) -> np.ndarray:
    # indices 0..size+pad-1, reflected past the end
    return _mirror_indices(size, pad)[pad:]


def _run(net: NetworkHandle, block: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(block)).unsqueeze(0)
    with torch.no_grad():
        return net.module(x)[0].numpy()


def save_weights(net: NetworkHandle, path: str | os.PathLike, extra: Mapping[str, Any] | None = None) -> None:
    """Write the network as a MAFW file; ``extra`` goes to its JSON trailer."""
    tensors = {k: v.cpu().numpy() for k, v in net.weights.items()}
    raw = encode_mafw(net.config.to_dict(), tensors, extra)
    try:
        with open(path, "wb") as f:
            f.write(raw)
    except OSError as err:
        raise IoError(err.errno, "Cannot write weights: %s" % err.strerror, str(path)) from err


def load_weights(path: str | os.PathLike) -> tuple[NetworkHandle, dict]:
    """Read a MAFW file back into a network, returning it with the trailer."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as err:
        raise IoError(err.errno, "Cannot read weights: %s" % err.strerror, str(path)) from err
    config_dict, tensors, extra = decode_mafw(raw)
    try:
        config = NetworkConfig.from_dict(config_dict)
    except (ConfigError, TypeError) as err:
        raise FormatError("Weight file %s has a bad config: %s" % (os.fspath(path), err)) from err
    net = build_network(config)
    expected = set(net.module.state_dict())
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        unexpected = sorted(set(tensors) - expected)
        raise FormatError("Weight file %s does not match its config (missing %s, unexpected %s)."
                          % (os.fspath(path), missing[:3], unexpected[:3]))
    state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
    try:
        net.module.load_state_dict(state)
    except RuntimeError as err:
        raise FormatError("Weight file %s has mismatched tensor shapes: %s" % (os.fspath(path), err)) from err
    return net, extra
