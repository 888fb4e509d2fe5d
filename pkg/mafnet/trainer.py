"""Patch sampling and the staged training loop.

Training moves from easy to hard noise: fixed Gaussian levels 30, 50 and
70, then blind Gaussian noise, then the five complex cases. Every stage
starts from the weights the previous one ended with.

All randomness comes from seed sequences keyed by the stage seed and the
``(epoch, batch)`` position, so a run can be checkpointed and resumed
mid-stage without changing a single bit of the result (in single-threaded
mode).
"""

import copy
import dataclasses
import hashlib
import logging
import math
import os
from typing import Any, Callable, Sequence

import numpy as np
import scipy.ndimage
import torch

from .cube import HSICube
from .errors import ConfigError, DivergenceError, FormatError, IoError, ShapeError
from .metrics import MetricsTable, compute_metrics, psnr
from .network import NetworkConfig, NetworkHandle, build_network, denoise_cube, load_weights, save_weights
from .noise import BLIND_LEVELS, COMPLEX_CODES, MIN_STRUCTURED_WIDTH, NoiseCase, NoiseSpec, synthesize_case
from .objective import DEFAULT_GRAD_WEIGHT, total_loss

logger = logging.getLogger(__name__)

STAGE_NAMES = ("fixed_sigma_30", "fixed_sigma_50", "fixed_sigma_70", "blind_gaussian", "complex")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
VALIDATION_FRACTION = 0.1
AUGMENTATIONS = ("identity", "rot90", "rot180", "rot270", "hflip", "scale")
SCALES = (0.75, 1.0, 1.25)

# seed-sequence keys that keep the streams apart
_VALIDATION_KEY = 1 << 20
_SPLIT_KEY = (1 << 20) + 1


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit seed derived from ``seed`` and a position."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0])


@dataclasses.dataclass
class StageConfig:
    name: str
    epochs: int = 5
    lr_init: float = 1e-4
    lr_decay: float = 0.97
    batch_size: int = 4
    patch: tuple[int, int, int] = (64, 64, 16)
    seed: int = 0
    grad_weight: float = DEFAULT_GRAD_WEIGHT
    init_from: str | None = None

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)

    @classmethod
    def desk(cls, name: str, **overrides) -> "StageConfig":
        """Laptop-sized stage: 64x64x16 patches, batch 4, 5 epochs."""
        return cls(name, **overrides)

    @classmethod
    def full(cls, name: str, **overrides) -> "StageConfig":
        """Full-sized stage: 128x128x31 patches, batch 16. The four Gaussian
        stages share 100 epochs and the complex stage gets 150."""
        epochs = 150 if name == "complex" else 25
        options = dict(epochs=epochs, batch_size=16, patch=(128, 128, 31))
        options.update(overrides)
        return cls(name, **options)

    def validate(self) -> "StageConfig":
        if self.name not in STAGE_NAMES:
            raise ConfigError("Unknown stage %r, expected one of %s." % (self.name, ", ".join(STAGE_NAMES)))
        if self.epochs < 1:
            raise ConfigError("Stage %s needs at least one epoch, got %d." % (self.name, self.epochs))
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1], got %g." % self.lr_decay)
        if not self.lr_init > 0:
            raise ConfigError("lr_init must be positive, got %g." % self.lr_init)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1, got %d." % self.batch_size)
        if self.grad_weight < 0:
            raise ConfigError("grad_weight must be >= 0, got %g." % self.grad_weight)
        height, width, bands = self.patch
        if height < 4 or width < 4 or height % 4 or width % 4 or bands < 1:
            raise ConfigError("Patch %r must have height and width divisible by 4." % (self.patch,))
        if self.name == "complex" and width < MIN_STRUCTURED_WIDTH:
            raise ConfigError(
                "The complex stage adds column noise and needs patch width >= %d, got %d."
                % (MIN_STRUCTURED_WIDTH, width)
            )
        return self

    def noise_for_batch(self, batch_seed: int, index: int) -> NoiseSpec:
        """The noise applied to patch ``index`` of the batch seeded ``batch_seed``."""
        seed = derive_seed(batch_seed, index)
        if self.name.startswith("fixed_sigma_"):
            return NoiseSpec(NoiseCase.GAUSS_FIXED, float(self.name.rsplit("_", 1)[1]), seed)
        if self.name == "blind_gaussian":
            return NoiseSpec(NoiseCase.GAUSS_BLIND, BLIND_LEVELS, seed)
        rng = np.random.default_rng(np.random.SeedSequence([batch_seed]))
        return NoiseSpec.from_code(COMPLEX_CODES[rng.integers(len(COMPLEX_CODES))], seed)


def default_schedule(desk: bool = True, seed: int = 0, **overrides) -> list[StageConfig]:
    """The five stages in easy-to-hard order."""
    make = StageConfig.desk if desk else StageConfig.full
    return [make(name, seed=derive_seed(seed, i), **overrides).validate() for i, name in enumerate(STAGE_NAMES)]


@dataclasses.dataclass
class StageRecord:
    name: str
    epochs: int
    final_loss: float
    curve: list[float]
    val_psnr_noisy: float | None = None
    val_psnr_denoised: float | None = None
    initial_digest: str = ""
    final_digest: str = ""

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data) -> "StageRecord":
        return cls(**data)


def weights_digest(net: NetworkHandle) -> str:
    """SHA-256 of the weights, by sorted path and float32 bytes."""
    digest = hashlib.sha256()
    weights = net.weights
    for path in sorted(weights):
        digest.update(path.encode("utf-8"))
        digest.update(weights[path].cpu().numpy().astype("<f4").tobytes())
    return digest.hexdigest()


def state_path(path: str | os.PathLike) -> str:
    return os.fspath(path) + ".state"


@dataclasses.dataclass
class Checkpoint:
    """Weights plus everything needed to continue training.

    ``optimizer_state`` holds the Adam moments and the learning-rate
    schedule; ``rng_state`` holds the stage position. Both are ``None`` once
    a stage has finished.
    """

    net: NetworkHandle
    stage_history: list[StageRecord]
    optimizer_state: dict | None = None
    rng_state: dict | None = None

    @property
    def config(self) -> NetworkConfig:
        return self.net.config

    @property
    def weights(self):
        return self.net.weights

    def save(self, path: str | os.PathLike) -> None:
        """Write a MAFW weight file carrying the stage history, and a
        ``.state`` sidecar when there is training state to resume."""
        save_weights(self.net, path, extra={"stage_history": [r.to_dict() for r in self.stage_history]})
        if self.optimizer_state is not None:
            try:
                torch.save({"optimizer": self.optimizer_state, "progress": self.rng_state}, state_path(path))
            except OSError as err:
                raise IoError(err.errno, "Cannot write training state: %s" % err.strerror, state_path(path)) from err

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        net, extra = load_weights(path)
        history = [StageRecord.from_dict(r) for r in extra.get("stage_history", [])]
        optimizer_state = rng_state = None
        if os.path.exists(state_path(path)):
            state = torch.load(state_path(path), map_location="cpu", weights_only=False)
            optimizer_state, rng_state = state["optimizer"], state["progress"]
        return cls(net, history, optimizer_state, rng_state)


def _check_fits(cube: HSICube, patch) -> None:
    height, width, bands = patch
    if cube.height < height or cube.width < width or cube.bands < bands:
        raise ShapeError("Cube %r is smaller than the patch %r." % (cube, tuple(patch)))


def sample_patches(cubes: Sequence[HSICube], patch: tuple[int, int, int], count: int, seed: int) -> list[HSICube]:
    """Cut ``count`` augmented ``(h, w, b)`` patches out of ``cubes``.

    Each patch comes from a random cube, a random window of ``b`` contiguous
    bands and a random spatial position, and gets one augmentation: a
    rotation by 90, 180 or 270 degrees, a horizontal flip, a rescale by
    0.75, 1.0 or 1.25 followed by a re-crop, or nothing.
    """
    if count and not cubes:
        raise ShapeError("No cubes to sample patches from.")
    for cube in cubes:
        _check_fits(cube, patch)
    height, width, bands = patch
    patches = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        source = cubes[int(rng.integers(len(cubes)))].data
        band0 = int(rng.integers(source.shape[0] - bands + 1))
        augmentation = AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))]
        factor = float(SCALES[int(rng.integers(len(SCALES)))]) if augmentation == "scale" else 1.0
        region = (height, width)
        if augmentation in ("rot90", "rot270"):
            region = (width, height)
        elif factor != 1.0:
            region = (math.ceil(height / factor), math.ceil(width / factor))
        if region[0] > source.shape[1] or region[1] > source.shape[2]:
            augmentation, factor, region = "identity", 1.0, (height, width)
        row = int(rng.integers(source.shape[1] - region[0] + 1))
        col = int(rng.integers(source.shape[2] - region[1] + 1))
        out = source[band0 : band0 + bands, row : row + region[0], col : col + region[1]]
        if augmentation.startswith("rot"):
            out = np.rot90(out, int(augmentation[3:]) // 90, axes=(1, 2))
        elif augmentation == "hflip":
            out = out[:, :, ::-1]
        elif factor != 1.0:
            out = scipy.ndimage.zoom(out, (1.0, factor, factor), order=1)[:, :height, :width]
        patches.append(HSICube(np.ascontiguousarray(out), value_range=cubes[0].value_range))
    return patches


class Trainer:
    """Runs one stage on a network.

    The loop position is the ``(epoch, batch)`` pair; the shuffling of each
    epoch and the noise of each batch are derived from it, so
    :meth:`state_dict` plus the weights are enough to resume.
    """

    def __init__(
        self,
        net: NetworkHandle,
        patches: Sequence[HSICube],
        stage: StageConfig,
        history: Sequence[StageRecord] = (),
    ):
        self.stage = stage.validate()
        self.net = net
        self.history = list(history)
        if not patches:
            raise ShapeError("Stage %s got no training patches." % stage.name)
        height, width, bands = stage.patch
        for p in patches:
            if p.shape != (bands, height, width):
                raise ShapeError("Patch shape %r does not match stage patch %r." % (p.shape, stage.patch))
        if bands != net.config.bands:
            raise ConfigError("Stage patches have %d bands, network expects %d." % (bands, net.config.bands))
        order = np.random.default_rng(np.random.SeedSequence([stage.seed, _SPLIT_KEY])).permutation(len(patches))
        n_val = int(len(patches) * VALIDATION_FRACTION)
        self.validation = [patches[i] for i in sorted(order[:n_val])]
        self.train_set = [patches[i] for i in sorted(order[n_val:])]

        self.optimizer = torch.optim.Adam(
            net.module.parameters(), lr=stage.lr_init, betas=ADAM_BETAS, eps=ADAM_EPS
        )
        self.scheduler = torch.optim.lr_scheduler.ExponentialLR(self.optimizer, gamma=stage.lr_decay)
        self.epoch = 0
        self.batch = 0
        self.step_index = 0
        self.curve: list[float] = []
        self._sums = [0.0, 0.0, 0.0, 0]
        self.initial_digest = weights_digest(net)

    @property
    def lr(self) -> float:
        return self.scheduler.get_last_lr()[0]

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.train_set) / self.stage.batch_size)

    @property
    def finished(self) -> bool:
        return self.epoch >= self.stage.epochs

    def batch_seed(self, epoch: int, batch: int) -> int:
        return derive_seed(self.stage.seed, epoch, batch)

    def _order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.stage.seed, epoch]))
        return rng.permutation(len(self.train_set))

    def make_batch(self, epoch: int, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Build the ``(noisy, clean)`` tensors for one position of the loop."""
        size = self.stage.batch_size
        indices = self._order(epoch)[batch * size : (batch + 1) * size]
        seed = self.batch_seed(epoch, batch)
        clean, noisy = [], []
        for k, i in enumerate(indices):
            patch = self.train_set[i]
            corrupted, _ = synthesize_case(patch, self.stage.noise_for_batch(seed, k))
            clean.append(patch.data)
            noisy.append(corrupted.data)
        return torch.from_numpy(np.stack(noisy)), torch.from_numpy(np.stack(clean))

    def step(self, noisy: torch.Tensor, clean: torch.Tensor):
        """One optimizer update on a batch; returns the loss breakdown."""
        module = self.net.module
        module.train()
        self.optimizer.zero_grad()
        residual = module(noisy)
        loss = total_loss(noisy - residual, clean, self.stage.grad_weight)
        if not loss.is_finite():
            raise DivergenceError(self.stage.name, self.epoch, self.batch, self.batch_seed(self.epoch, self.batch))
        loss.total.backward()
        self.optimizer.step()
        self.step_index += 1
        return loss

    def train_steps(self, count: int) -> None:
        """Advance the loop by ``count`` batches, stopping at the stage end."""
        for _ in range(count):
            if self.finished:
                return
            noisy, clean = self.make_batch(self.epoch, self.batch)
            loss = self.step(noisy, clean)
            rec, grad, total = loss.as_floats()
            n = noisy.shape[0]
            self._sums[0] += rec * n
            self._sums[1] += grad * n
            self._sums[2] += total * n
            self._sums[3] += n
            self.batch += 1
            if self.batch == self.batches_per_epoch:
                self._end_epoch()

    def _end_epoch(self) -> None:
        rec, grad, total, n = self._sums
        rec, grad, total = rec / n, grad / n, total / n
        logger.info("%s %d %.6e %.6f %.6f %.6f", self.stage.name, self.epoch + 1, self.lr, rec, grad, total)
        self.curve.append(total)
        self.scheduler.step()
        self.epoch += 1
        self.batch = 0
        self._sums = [0.0, 0.0, 0.0, 0]

    def validation_psnr(self) -> tuple[float | None, float | None]:
        """Mean PSNR of the noisy and the denoised held-out patches."""
        if not self.validation:
            return None, None
        module = self.net.module
        module.eval()
        noisy_scores, denoised_scores = [], []
        seed = derive_seed(self.stage.seed, _VALIDATION_KEY)
        for k, patch in enumerate(self.validation):
            noisy, _ = synthesize_case(patch, self.stage.noise_for_batch(seed, k))
            x = noisy.to_tensor()
            with torch.no_grad():
                denoised = HSICube.from_tensor((x - module(x)).clamp(0.0, 1.0))
            noisy_scores.append(psnr(noisy, patch)[0])
            denoised_scores.append(psnr(denoised, patch)[0])
        return float(np.mean(noisy_scores)), float(np.mean(denoised_scores))

    def run(self) -> Checkpoint:
        """Train to the end of the stage and return the final checkpoint."""
        logger.debug(
            "Stage %s: %d train and %d validation patches, %d batches per epoch",
            self.stage.name,
            len(self.train_set),
            len(self.validation),
            self.batches_per_epoch,
        )
        while not self.finished:
            self.train_steps(self.batches_per_epoch - self.batch)
        val_noisy, val_denoised = self.validation_psnr()
        record = StageRecord(
            name=self.stage.name,
            epochs=self.stage.epochs,
            final_loss=self.curve[-1],
            curve=list(self.curve),
            val_psnr_noisy=val_noisy,
            val_psnr_denoised=val_denoised,
            initial_digest=self.initial_digest,
            final_digest=weights_digest(self.net),
        )
        if val_noisy is not None:
            logger.debug("Stage %s validation PSNR %.2f -> %.2f dB", self.stage.name, val_noisy, val_denoised)
        return Checkpoint(copy.deepcopy(self.net), self.history + [record])

    def state_dict(self) -> dict:
        return {
            "stage": self.stage.name,
            "seed": self.stage.seed,
            "epoch": self.epoch,
            "batch": self.batch,
            "step": self.step_index,
            "curve": list(self.curve),
            "sums": list(self._sums),
            "initial_digest": self.initial_digest,
        }

    def checkpoint(self) -> Checkpoint:
        """A mid-stage checkpoint that :meth:`resume` can pick up.

        The weights and optimizer state are copied, so later steps of this
        trainer leave the checkpoint unchanged.
        """
        optimizer_state = {"adam": self.optimizer.state_dict(), "scheduler": self.scheduler.state_dict()}
        return Checkpoint(
            copy.deepcopy(self.net), list(self.history), copy.deepcopy(optimizer_state), self.state_dict()
        )

    @classmethod
    def resume(cls, checkpoint: Checkpoint, patches: Sequence[HSICube], stage: StageConfig) -> "Trainer":
        progress = checkpoint.rng_state
        if checkpoint.optimizer_state is None or progress is None:
            raise FormatError("Checkpoint carries no training state to resume from.")
        if (progress["stage"], progress["seed"]) != (stage.name, stage.seed):
            raise ConfigError(
                "Checkpoint belongs to stage %s (seed %d), not %s (seed %d)."
                % (progress["stage"], progress["seed"], stage.name, stage.seed)
            )
        trainer = cls(copy.deepcopy(checkpoint.net), patches, stage, checkpoint.stage_history)
        trainer.optimizer.load_state_dict(copy.deepcopy(checkpoint.optimizer_state["adam"]))
        trainer.scheduler.load_state_dict(checkpoint.optimizer_state["scheduler"])
        trainer.epoch = progress["epoch"]
        trainer.batch = progress["batch"]
        trainer.step_index = progress["step"]
        trainer.curve = list(progress["curve"])
        trainer._sums = list(progress["sums"])
        trainer.initial_digest = progress["initial_digest"]
        return trainer


def run_stage(
    net: NetworkHandle, data: Sequence[HSICube], stage: StageConfig, history: Sequence[StageRecord] = ()
) -> Checkpoint:
    return Trainer(net, data, stage, history).run()


def run_incremental_schedule(
    net_config: NetworkConfig,
    data: Sequence[HSICube],
    stages: Sequence[StageConfig],
    on_stage_end: Callable[[Checkpoint], None] | None = None,
) -> Checkpoint:
    """Run ``stages`` in order, each starting from the previous stage's
    final weights.

    ``on_stage_end`` is called with every stage's checkpoint, e.g. to write
    it to disk.
    """
    if not stages:
        raise ConfigError("The schedule needs at least one stage.")
    for stage in stages:
        stage.validate()
        if stage.patch[2] != net_config.bands:
            raise ConfigError(
                "Stage %s uses %d-band patches, network has %d bands." % (stage.name, stage.patch[2], net_config.bands)
            )
    net = build_network(net_config)
    history: list[StageRecord] = []
    checkpoint = None
    for stage in stages:
        if stage.init_from:
            loaded, _ = load_weights(stage.init_from)
            if loaded.config != net.config:
                raise ConfigError("Weights in %s were built for a different network." % stage.init_from)
            net = loaded
        logger.debug("Starting stage %s from weights %s", stage.name, weights_digest(net)[:12])
        checkpoint = run_stage(net, data, stage, history)
        history = checkpoint.stage_history
        if on_stage_end is not None:
            on_stage_end(checkpoint)
    return checkpoint


@dataclasses.dataclass
class CaseResult:
    spec: NoiseSpec | None
    noisy: MetricsTable
    denoised: MetricsTable


def _average(tables: Sequence[MetricsTable]) -> MetricsTable:
    if len(tables) == 1:
        return tables[0]

    def mean(values):
        finite = [v for v in values if math.isfinite(v)]
        return float(np.mean(finite)) if finite else math.inf

    return MetricsTable(
        psnr_mean=mean([t.psnr_mean for t in tables]),
        ssim_mean=float(np.mean([t.ssim_mean for t in tables])),
        sam_mean=float(np.mean([t.sam_mean for t in tables])),
        per_band_psnr=[mean(col) for col in zip(*(t.per_band_psnr for t in tables))],
        per_band_ssim=[float(np.mean(col)) for col in zip(*(t.per_band_ssim for t in tables))],
    )


def evaluate(
    net: NetworkHandle, test_cubes: Sequence[HSICube], cases: Sequence[NoiseSpec | None]
) -> list[CaseResult]:
    """Corrupt each test cube with each case, denoise it and score both the
    noisy input and the result against the clean cube.

    A ``None`` case is the noise-free control: the clean cube itself goes
    through the network. Noise seeds come from each case's seed and the cube
    index, so results are deterministic.
    """
    net.module.eval()
    results = []
    for spec in cases:
        noisy_tables, denoised_tables = [], []
        for i, clean in enumerate(test_cubes):
            if spec is None:
                noisy = clean
            else:
                noisy, _ = synthesize_case(clean, spec.with_seed(derive_seed(spec.seed, i)))
            denoised = denoise_cube(net, noisy)
            noisy_tables.append(compute_metrics(noisy, clean))
            denoised_tables.append(compute_metrics(denoised, clean))
        result = CaseResult(spec, _average(noisy_tables), _average(denoised_tables))
        label = "control" if spec is None else spec.code
        logger.debug("case %s noisy %s denoised %s", label, result.noisy.summary_line(), result.denoised.summary_line())
        results.append(result)
    return results
