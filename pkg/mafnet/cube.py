"""Hyperspectral cubes, their normalization, the HSD file and the image pyramid."""

import enum
import json
import os
from typing import Sequence

import numpy as np
import scipy.ndimage
import torch
import torch.nn.functional as F

from ._codec import decode_hsd, encode_hsd
from .errors import DataError, DegenerateRangeError, IoError, ParamError, ShapeError

BINOMIAL_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
PYRAMID_LEVELS = 3


class HSICube:
    """A hyperspectral image volume indexed ``(band, row, column)``.

    The data is held as a read-only float32 array, so a cube never changes
    after construction. Non-finite values are rejected with
    :exc:`DataError`.
    """

    def __init__(self, data, value_range: tuple[float, float] = (0.0, 1.0)):
        array = np.array(data, dtype=np.float32)
        if array.ndim != 3:
            raise ShapeError(
                "A cube needs (bands, height, width) data, got shape %r." % (array.shape,)
            )
        if min(array.shape) < 1:
            raise ShapeError("Cube dimensions must be positive, got %r." % (array.shape,))
        if not np.isfinite(array).all():
            raise DataError("Cube data contains NaN or infinity.")
        lo, hi = float(value_range[0]), float(value_range[1])
        if not hi > lo:
            raise ParamError("value_range must satisfy hi > lo, got (%g, %g)." % (lo, hi))
        array.setflags(write=False)
        self._data = array
        self.value_range = (lo, hi)

    @classmethod
    def constant(cls, value: float, bands: int, height: int, width: int) -> "HSICube":
        return cls(np.full((bands, height, width), value, dtype=np.float32))

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor, value_range=(0.0, 1.0)) -> "HSICube":
        """Build a cube from a ``(B, H, W)`` or ``(1, B, H, W)`` tensor."""
        array = tensor.detach().cpu().numpy()
        if array.ndim == 4 and array.shape[0] == 1:
            array = array[0]
        return cls(array, value_range)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def bands(self) -> int:
        return self._data.shape[0]

    @property
    def height(self) -> int:
        return self._data.shape[1]

    @property
    def width(self) -> int:
        return self._data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Return the cube as a ``(1, B, H, W)`` tensor with its own storage."""
        return torch.tensor(self._data, dtype=dtype).unsqueeze(0)

    def __repr__(self) -> str:
        return "HSICube(bands=%d, height=%d, width=%d, value_range=%r)" % (
            self.bands,
            self.height,
            self.width,
            self.value_range,
        )


class NormalizationMode(str, enum.Enum):
    GLOBAL_MINMAX = "global_minmax"
    FIXED_RANGE = "fixed_range"


class NormalizationRecord:
    """The affine map applied by :func:`normalize`, kept so it can be undone."""

    def __init__(self, lo: float, hi: float, mode: NormalizationMode):
        if not hi > lo:
            raise DegenerateRangeError("Normalization range is empty: (%r, %r)." % (lo, hi))
        self.lo = float(lo)
        self.hi = float(hi)
        self.mode = NormalizationMode(mode)

    def __repr__(self) -> str:
        return "NormalizationRecord(lo=%r, hi=%r, mode=%r)" % (self.lo, self.hi, self.mode.value)


def normalize(
    cube: HSICube,
    mode: NormalizationMode | str = NormalizationMode.GLOBAL_MINMAX,
    fixed_range: tuple[float, float] = (0.0, 1.0),
) -> tuple[HSICube, NormalizationRecord]:
    """Map cube values onto [0, 1].

    ``global_minmax`` uses the cube's own minimum and maximum and raises
    :exc:`DegenerateRangeError` for a constant cube. ``fixed_range`` uses
    ``fixed_range`` and refuses values that fall outside it, since clipping
    them would make the map impossible to invert.
    """
    mode = NormalizationMode(mode)
    data = cube.data.astype(np.float64)
    if mode is NormalizationMode.GLOBAL_MINMAX:
        lo, hi = float(data.min()), float(data.max())
        if not hi > lo:
            raise DegenerateRangeError("Cannot min-max normalize a constant cube (value %g)." % lo)
    else:
        lo, hi = float(fixed_range[0]), float(fixed_range[1])
        if not hi > lo:
            raise DegenerateRangeError("Fixed range is empty: (%g, %g)." % (lo, hi))
        if data.min() < lo or data.max() > hi:
            raise DataError(
                "Cube values [%g, %g] fall outside the fixed range (%g, %g)."
                % (data.min(), data.max(), lo, hi)
            )
    record = NormalizationRecord(lo, hi, mode)
    scaled = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    return HSICube(scaled), record


def denormalize(cube: HSICube, record: NormalizationRecord) -> HSICube:
    """Invert :func:`normalize` using its record."""
    data = cube.data.astype(np.float64) * (record.hi - record.lo) + record.lo
    return HSICube(data, value_range=(record.lo, record.hi))


def load_cube(path: str | os.PathLike) -> HSICube:
    """Read an HSD file.

    Raises :exc:`FormatError` when the layout is wrong and :exc:`DataError`
    when the payload holds NaN or infinity.
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as err:
        raise IoError(err.errno, "Cannot read cube file: %s" % err.strerror, str(path)) from err
    data = decode_hsd(raw)
    if not np.isfinite(data).all():
        raise DataError("Cube file %s contains NaN or infinity." % os.fspath(path))
    return HSICube(data)


def save_cube(cube, path: str | os.PathLike, meta: dict | None = None) -> None:
    """Write ``cube`` as an HSD file.

    ``meta``, when given, goes to a ``<name>.meta.json`` sidecar. Nothing is
    written if the data is not finite.
    """
    if not isinstance(cube, HSICube):
        data = np.asarray(cube, dtype=np.float32)
        if not np.isfinite(data).all():
            raise DataError("Refusing to save a cube that contains NaN or infinity.")
        cube = HSICube(data)
    raw = encode_hsd(cube.data)
    try:
        with open(path, "wb") as f:
            f.write(raw)
        if meta is not None:
            with open(meta_path(path), "w") as f:
                json.dump(meta, f, indent=2, sort_keys=True)
    except OSError as err:
        raise IoError(err.errno, "Cannot write cube file: %s" % err.strerror, str(path)) from err


def meta_path(path: str | os.PathLike) -> str:
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".meta.json"


def _mirror_indices(size: int, pad: int) -> np.ndarray:
    # reflection without repeating the edge sample, folded as often as needed
    idx = np.arange(-pad, size + pad)
    if size == 1:
        return np.zeros_like(idx)
    period = 2 * (size - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= size, period - idx, idx)


def pyramid_down(x: torch.Tensor) -> torch.Tensor:
    """Smooth the last two axes with the 5-tap binomial kernel and keep every
    second sample, starting at index 0.

    Borders are reflected, so a constant input stays constant. Output sizes
    are ``ceil(H / 2) x ceil(W / 2)``.
    """
    *lead, height, width = x.shape
    flat = x.reshape(-1, 1, height, width)
    kernel = torch.as_tensor(BINOMIAL_KERNEL, dtype=x.dtype, device=x.device)
    pad = len(BINOMIAL_KERNEL) // 2
    rows = torch.as_tensor(_mirror_indices(height, pad), device=x.device)
    cols = torch.as_tensor(_mirror_indices(width, pad), device=x.device)
    padded = flat.index_select(2, rows).index_select(3, cols)
    out = F.conv2d(padded, kernel.view(1, 1, -1, 1), stride=(2, 1))
    out = F.conv2d(out, kernel.view(1, 1, 1, -1), stride=(1, 2))
    return out.reshape(*lead, out.shape[-2], out.shape[-1])


class ImagePyramid:
    """Full, 1/2 and 1/4 resolution versions of one cube."""

    def __init__(self, levels: Sequence[HSICube], kernel: np.ndarray = BINOMIAL_KERNEL):
        self.levels = tuple(levels)
        self.kernel = np.asarray(kernel)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> HSICube:
        return self.levels[index]

    def __repr__(self) -> str:
        return "ImagePyramid(%s)" % ", ".join(str(level.shape) for level in self.levels)


def build_pyramid(cube: HSICube) -> ImagePyramid:
    """Build the three-level Gaussian pyramid of ``cube``.

    Each coarser level is the previous one smoothed and subsampled by
    :func:`pyramid_down`. Both spatial dimensions must be at least 4.
    """
    if cube.height < 4 or cube.width < 4:
        raise ShapeError(
            "A pyramid needs height and width >= 4, got %dx%d." % (cube.height, cube.width)
        )
    current = torch.tensor(cube.data, dtype=torch.float64)
    levels = [cube]
    for _ in range(PYRAMID_LEVELS - 1):
        current = pyramid_down(current)
        levels.append(HSICube(current.numpy(), value_range=cube.value_range))
    return ImagePyramid(levels)


def smooth_random_cube(
    bands: int,
    height: int,
    width: int,
    seed: int = 0,
    spatial_sigma: float = 3.0,
    spectral_sigma: float = 2.0,
) -> HSICube:
    """A synthetic clean cube: white noise smoothed along all three axes and
    min-max scaled onto [0, 1]."""
    if min(bands, height, width) < 1:
        raise ShapeError("Cube dimensions must be positive, got %r." % ((bands, height, width),))
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    field = rng.standard_normal((bands, height, width))
    field = scipy.ndimage.gaussian_filter(field, sigma=(spectral_sigma, spatial_sigma, spatial_sigma), mode="reflect")
    return normalize(HSICube(field))[0]
