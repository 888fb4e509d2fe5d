"""Seedable synthetic noise for hyperspectral cubes.

Noise levels are quoted on the 0-255 scale and divided by 255 before they
touch the [0, 1] data. Every random draw comes from a generator keyed by
``(seed, component, band)``, so each component of a composite case can be
reproduced on its own.
"""

import dataclasses
import enum
import json
import math
import os
from typing import Iterable

import numpy as np

from .cube import HSICube
from .errors import IoError, ParamError, ShapeError

INTENSITY_SCALE = 255.0
COLUMN_FRACTION = (0.05, 0.15)
STRIPE_AMPLITUDE = 0.25
DEADLINE_WIDTHS = (1, 3)
IMPULSE_INTENSITY = (0.10, 0.70)
CASE1_SIGMA = (30.0, 70.0)
BLIND_LEVELS = (30.0, 50.0, 70.0)
STRUCTURED_BAND_FRACTION = 1.0 / 3.0
MIXTURE_INCLUSION = 0.5
MIN_STRUCTURED_WIDTH = 20

# component keys for seed splitting
_GAUSS, _BLIND, _STRIPE, _DEADLINE, _IMPULSE, _MIXTURE = range(6)
_SELECT = -1


class NoiseCase(str, enum.Enum):
    GAUSS_FIXED = "gauss_fixed"
    GAUSS_BLIND = "gauss_blind"
    CASE1_NONIID = "case1_noniid"
    CASE2_STRIPE = "case2_stripe"
    CASE3_DEADLINE = "case3_deadline"
    CASE4_IMPULSE = "case4_impulse"
    CASE5_MIXTURE = "case5_mixture"


_CODES = {
    "g30": (NoiseCase.GAUSS_FIXED, 30.0),
    "g50": (NoiseCase.GAUSS_FIXED, 50.0),
    "g70": (NoiseCase.GAUSS_FIXED, 70.0),
    "blind": (NoiseCase.GAUSS_BLIND, BLIND_LEVELS),
    "1": (NoiseCase.CASE1_NONIID, CASE1_SIGMA),
    "2": (NoiseCase.CASE2_STRIPE, CASE1_SIGMA),
    "3": (NoiseCase.CASE3_DEADLINE, CASE1_SIGMA),
    "4": (NoiseCase.CASE4_IMPULSE, CASE1_SIGMA),
    "5": (NoiseCase.CASE5_MIXTURE, CASE1_SIGMA),
}
CASE_CODES = tuple(_CODES)
COMPLEX_CODES = ("1", "2", "3", "4", "5")


def _generator(seed: int, *key: int) -> np.random.Generator:
    entropy = [seed] + [k % (1 << 32) for k in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < 1 << 64:
        raise ParamError("Noise seeds must be 64-bit unsigned integers, got %d." % seed)
    return seed


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not 0.0 < sigma <= INTENSITY_SCALE:
        raise ParamError("sigma must lie in (0, 255], got %g." % sigma)
    return sigma


def _check_fraction(band_fraction: float) -> float:
    band_fraction = float(band_fraction)
    if not 0.0 < band_fraction <= 1.0:
        raise ParamError("band_fraction must lie in (0, 1], got %g." % band_fraction)
    return band_fraction


@dataclasses.dataclass
class NoiseSpec:
    """One noise case and the seed that fixes its realization.

    ``sigma`` is a single level for ``gauss_fixed``, candidate levels for
    ``gauss_blind`` and a ``(lo, hi)`` range for the five complex cases.
    """

    case: NoiseCase
    sigma: float | tuple[float, ...] | None = None
    seed: int = 0
    band_fraction: float = STRUCTURED_BAND_FRACTION

    def __post_init__(self):
        self.case = NoiseCase(self.case)
        if self.sigma is None:
            self.sigma = {
                NoiseCase.GAUSS_FIXED: 30.0,
                NoiseCase.GAUSS_BLIND: BLIND_LEVELS,
            }.get(self.case, CASE1_SIGMA)
        self.seed = _check_seed(self.seed)
        _check_fraction(self.band_fraction)
        if self.case is NoiseCase.GAUSS_FIXED:
            self.sigma = _check_sigma(self.sigma)
        else:
            levels = tuple(_check_sigma(s) for s in np.atleast_1d(self.sigma))
            if self.case is not NoiseCase.GAUSS_BLIND:
                if len(levels) != 2 or levels[0] > levels[1]:
                    raise ParamError("A sigma range must be (lo, hi) with lo <= hi, got %r." % (levels,))
            self.sigma = levels

    @classmethod
    def from_code(cls, code: str, seed: int = 0) -> "NoiseSpec":
        """Build a spec from a CLI case code: g30, g50, g70, blind or 1-5."""
        try:
            case, sigma = _CODES[str(code)]
        except KeyError:
            raise ParamError(
                "Unknown noise case %r, expected one of %s." % (code, ", ".join(CASE_CODES))
            ) from None
        return cls(case, sigma, seed)

    @property
    def code(self) -> str:
        for code, (case, sigma) in _CODES.items():
            if case is self.case and (case is not NoiseCase.GAUSS_FIXED or sigma == self.sigma):
                return code
        return self.case.value

    def with_seed(self, seed: int) -> "NoiseSpec":
        return dataclasses.replace(self, seed=seed)


@dataclasses.dataclass
class StripeRecord:
    band: int
    columns: list[int]
    offsets: list[float]


@dataclasses.dataclass
class DeadlineRecord:
    band: int
    columns: list[int]
    widths: list[int]

    def dead_columns(self) -> list[int]:
        return [c + k for c, w in zip(self.columns, self.widths) for k in range(w)]


@dataclasses.dataclass
class ImpulseRecord:
    band: int
    intensity: float
    pixels: int


@dataclasses.dataclass
class NoiseReport:
    """The corruption a synthesis call actually applied.

    ``per_band_sigma`` is on the 0-255 scale, with 0 for bands left free of
    Gaussian noise.
    """

    per_band_sigma: list[float]
    striped_bands: list[StripeRecord] = dataclasses.field(default_factory=list)
    deadline_bands: list[DeadlineRecord] = dataclasses.field(default_factory=list)
    impulse_bands: list[ImpulseRecord] = dataclasses.field(default_factory=list)

    @classmethod
    def empty(cls, bands: int) -> "NoiseReport":
        return cls(per_band_sigma=[0.0] * bands)

    def records(self) -> Iterable[dict]:
        """Yield one flat record per corruption, using the fixed field names
        band, kind, columns, width, sigma and intensity."""
        for band, sigma in enumerate(self.per_band_sigma):
            if sigma:
                yield {"band": band, "kind": "gaussian", "sigma": sigma}
        for r in self.striped_bands:
            yield {"band": r.band, "kind": "stripe", "columns": r.columns, "offsets": r.offsets}
        for r in self.deadline_bands:
            yield {"band": r.band, "kind": "deadline", "columns": r.columns, "width": r.widths}
        for r in self.impulse_bands:
            yield {"band": r.band, "kind": "impulse", "intensity": r.intensity, "pixels": r.pixels}

    def save(self, path: str | os.PathLike) -> None:
        """Write the report as JSON lines, one record per corruption."""
        header = {"kind": "header", "bands": len(self.per_band_sigma)}
        try:
            with open(path, "w") as f:
                for record in [header, *self.records()]:
                    f.write(json.dumps(record, sort_keys=True) + "\n")
        except OSError as err:
            raise IoError(err.errno, "Cannot write noise report: %s" % err.strerror, str(path)) from err

    @classmethod
    def load(cls, path: str | os.PathLike) -> "NoiseReport":
        with open(path) as f:
            records = [json.loads(line) for line in f if line.strip()]
        report = cls.empty(records[0]["bands"])
        for r in records[1:]:
            kind = r["kind"]
            if kind == "gaussian":
                report.per_band_sigma[r["band"]] = r["sigma"]
            elif kind == "stripe":
                report.striped_bands.append(StripeRecord(r["band"], r["columns"], r["offsets"]))
            elif kind == "deadline":
                report.deadline_bands.append(DeadlineRecord(r["band"], r["columns"], r["width"]))
            elif kind == "impulse":
                report.impulse_bands.append(ImpulseRecord(r["band"], r["intensity"], r["pixels"]))
        return report


def _finish(data: np.ndarray, clip: bool) -> HSICube:
    if clip:
        np.clip(data, 0.0, 1.0, out=data)
    return HSICube(data)


def _gaussian(data: np.ndarray, sigmas: list[float], seed: int, component: int) -> None:
    for band, sigma in enumerate(sigmas):
        rng = _generator(seed, component, band)
        data[band] += rng.standard_normal(data.shape[1:]) * (sigma / INTENSITY_SCALE)


def _select_bands(bands: int, band_fraction: float, seed: int, component: int) -> list[int]:
    count = math.floor(band_fraction * bands + 1e-9)
    rng = _generator(seed, component, _SELECT)
    return sorted(int(b) for b in rng.choice(bands, size=count, replace=False))


def _column_count(width: int, rng: np.random.Generator) -> int:
    lo = math.ceil(COLUMN_FRACTION[0] * width - 1e-9)
    hi = math.floor(COLUMN_FRACTION[1] * width + 1e-9)
    return int(rng.integers(lo, hi + 1))


def _check_width(width: int) -> None:
    if width < MIN_STRUCTURED_WIDTH:
        raise ShapeError(
            "Column noise needs width >= %d to honour 5%%-15%% column fractions, got %d."
            % (MIN_STRUCTURED_WIDTH, width)
        )


def _stripe_band(data: np.ndarray, band: int, seed: int) -> StripeRecord:
    rng = _generator(seed, _STRIPE, band)
    width = data.shape[2]
    columns = np.sort(rng.choice(width, size=_column_count(width, rng), replace=False))
    offsets = rng.uniform(-STRIPE_AMPLITUDE, STRIPE_AMPLITUDE, size=len(columns))
    data[band][:, columns] += offsets
    return StripeRecord(band, [int(c) for c in columns], [float(o) for o in offsets])


def _deadline_band(data: np.ndarray, band: int, seed: int) -> DeadlineRecord:
    rng = _generator(seed, _DEADLINE, band)
    width = data.shape[2]
    remaining = _column_count(width, rng)
    used = np.zeros(width, dtype=bool)
    starts, widths = [], []
    while remaining:
        run = int(rng.integers(DEADLINE_WIDTHS[0], min(DEADLINE_WIDTHS[1], remaining) + 1))
        # runs never touch, so each one stays a separate dead line
        for start in rng.permutation(width - run + 1):
            lo, hi = max(start - 1, 0), min(start + run + 1, width)
            if not used[lo:hi].any():
                break
        else:
            run = 1
            start = int(np.flatnonzero(~used)[0])
        used[start : start + run] = True
        starts.append(int(start))
        widths.append(run)
        remaining -= run
    order = np.argsort(starts)
    record = DeadlineRecord(band, [starts[i] for i in order], [widths[i] for i in order])
    data[band][:, record.dead_columns()] = 0.0
    return record


def _impulse_band(data: np.ndarray, band: int, seed: int) -> ImpulseRecord:
    rng = _generator(seed, _IMPULSE, band)
    height, width = data.shape[1:]
    intensity = float(rng.uniform(*IMPULSE_INTENSITY))
    count = int(round(intensity * height * width))
    flat = rng.choice(height * width, size=count, replace=False)
    salt = rng.random(count) < 0.5
    plane = data[band].reshape(-1)
    plane[flat] = np.where(salt, 1.0, 0.0)
    return ImpulseRecord(band, intensity, count)


def add_gaussian(cube: HSICube, sigma: float, seed: int, clip: bool = True) -> tuple[HSICube, NoiseReport]:
    """Add i.i.d. Gaussian noise of standard deviation ``sigma / 255``."""
    sigma = _check_sigma(sigma)
    seed = _check_seed(seed)
    data = cube.data.astype(np.float64)
    sigmas = [sigma] * cube.bands
    _gaussian(data, sigmas, seed, _GAUSS)
    return _finish(data, clip), NoiseReport(per_band_sigma=sigmas)


def add_noniid_gaussian(
    cube: HSICube,
    sigma_lo: float = CASE1_SIGMA[0],
    sigma_hi: float = CASE1_SIGMA[1],
    seed: int = 0,
    clip: bool = True,
) -> tuple[HSICube, NoiseReport]:
    """Add Gaussian noise whose level is drawn per band from
    ``Uniform[sigma_lo, sigma_hi]``."""
    sigma_lo, sigma_hi = _check_sigma(sigma_lo), _check_sigma(sigma_hi)
    if sigma_lo > sigma_hi:
        raise ParamError("sigma_lo %g exceeds sigma_hi %g." % (sigma_lo, sigma_hi))
    seed = _check_seed(seed)
    data = cube.data.astype(np.float64)
    sigmas = _noniid_levels(cube.bands, sigma_lo, sigma_hi, seed)
    _gaussian(data, sigmas, seed, _GAUSS)
    return _finish(data, clip), NoiseReport(per_band_sigma=sigmas)


def _noniid_levels(bands: int, sigma_lo: float, sigma_hi: float, seed: int) -> list[float]:
    levels = []
    for band in range(bands):
        rng = _generator(seed, _GAUSS, band, _SELECT)
        levels.append(float(rng.uniform(sigma_lo, sigma_hi)) if sigma_hi > sigma_lo else sigma_lo)
    return levels


def _structured(cube, band_fraction, seed, clip, component, apply):
    _check_width(cube.width)
    band_fraction = _check_fraction(band_fraction)
    seed = _check_seed(seed)
    data = cube.data.astype(np.float64)
    records = [apply(data, b, seed) for b in _select_bands(cube.bands, band_fraction, seed, component)]
    return _finish(data, clip), records


def add_stripes(
    cube: HSICube, band_fraction: float = STRUCTURED_BAND_FRACTION, seed: int = 0, clip: bool = True
) -> tuple[HSICube, NoiseReport]:
    """Add column stripes to ``floor(band_fraction * B)`` random bands.

    Each striped band gets 5%-15% of its columns shifted, every column by one
    offset drawn from ``Uniform[-0.25, 0.25]``.
    """
    out, records = _structured(cube, band_fraction, seed, clip, _STRIPE, _stripe_band)
    report = NoiseReport.empty(cube.bands)
    report.striped_bands = records
    return out, report


def add_deadlines(
    cube: HSICube, band_fraction: float = STRUCTURED_BAND_FRACTION, seed: int = 0, clip: bool = True
) -> tuple[HSICube, NoiseReport]:
    """Zero runs of 1-3 columns, 5%-15% of the columns in total, in
    ``floor(band_fraction * B)`` random bands."""
    out, records = _structured(cube, band_fraction, seed, clip, _DEADLINE, _deadline_band)
    report = NoiseReport.empty(cube.bands)
    report.deadline_bands = records
    return out, report


def add_impulse(
    cube: HSICube, band_fraction: float = STRUCTURED_BAND_FRACTION, seed: int = 0, clip: bool = True
) -> tuple[HSICube, NoiseReport]:
    """Salt-and-pepper noise on ``floor(band_fraction * B)`` random bands.

    A band with intensity ``p ~ Uniform[0.10, 0.70]`` has ``round(p * H * W)``
    pixels set to 0 or 1 with equal probability.
    """
    band_fraction = _check_fraction(band_fraction)
    seed = _check_seed(seed)
    data = cube.data.astype(np.float64)
    records = [
        _impulse_band(data, b, seed)
        for b in _select_bands(cube.bands, band_fraction, seed, _IMPULSE)
    ]
    report = NoiseReport.empty(cube.bands)
    report.impulse_bands = records
    return _finish(data, clip), report


def synthesize_case(cube: HSICube, spec: NoiseSpec, clip: bool = True) -> tuple[HSICube, NoiseReport]:
    """Corrupt ``cube`` as ``spec`` describes.

    Gaussian noise is applied first, structured corruptions follow band by
    band in the order stripe, deadline, impulse, and the result is clipped to
    [0, 1] once at the end. Cases 2-4 reuse the Case 1 draw for the same seed,
    so subtracting a Case 1 realization isolates the structured part.
    """
    case = spec.case
    seed = spec.seed
    data = cube.data.astype(np.float64)
    if case is NoiseCase.GAUSS_FIXED:
        sigmas = [spec.sigma] * cube.bands
    elif case is NoiseCase.GAUSS_BLIND:
        rng = _generator(seed, _BLIND)
        sigmas = [float(rng.choice(spec.sigma))] * cube.bands
    else:
        sigmas = _noniid_levels(cube.bands, spec.sigma[0], spec.sigma[1], seed)
    _gaussian(data, sigmas, seed, _GAUSS)
    report = NoiseReport(per_band_sigma=sigmas)

    plan: dict[int, list[int]] = {}
    if case in (NoiseCase.CASE2_STRIPE, NoiseCase.CASE3_DEADLINE, NoiseCase.CASE4_IMPULSE):
        component = {
            NoiseCase.CASE2_STRIPE: _STRIPE,
            NoiseCase.CASE3_DEADLINE: _DEADLINE,
            NoiseCase.CASE4_IMPULSE: _IMPULSE,
        }[case]
        for band in _select_bands(cube.bands, spec.band_fraction, seed, component):
            plan[band] = [component]
    elif case is NoiseCase.CASE5_MIXTURE:
        for band in range(cube.bands):
            rng = _generator(seed, _MIXTURE, band)
            chosen = [c for c in (_STRIPE, _DEADLINE, _IMPULSE) if rng.random() < MIXTURE_INCLUSION]
            if chosen:
                plan[band] = chosen

    if any(c in (_STRIPE, _DEADLINE) for comps in plan.values() for c in comps):
        _check_width(cube.width)
    for band in sorted(plan):
        for component in plan[band]:
            if component == _STRIPE:
                report.striped_bands.append(_stripe_band(data, band, seed))
            elif component == _DEADLINE:
                report.deadline_bands.append(_deadline_band(data, band, seed))
            else:
                report.impulse_bands.append(_impulse_band(data, band, seed))
    return _finish(data, clip), report
