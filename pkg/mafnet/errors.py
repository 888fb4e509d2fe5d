"""Exceptions raised by mafnet."""


class MafnetError(Exception):
    """Generic error class for this package."""


class FormatError(MafnetError):
    """A file does not follow the HSD or MAFW layout."""


class DataError(MafnetError):
    """Values are unusable: NaN, infinity, or an empty range."""


class DegenerateRangeError(DataError):
    """A cube has no dynamic range to normalize over."""


class ShapeError(MafnetError, ValueError):
    """Array or tensor dimensions do not fit the operation."""


class ParamError(MafnetError, ValueError):
    """A numeric parameter is outside its allowed range."""


class ConfigError(MafnetError):
    """A network, stage or run configuration is inconsistent."""


class UsageError(ConfigError):
    """A command was invoked without a setting it cannot run without."""


class IoError(MafnetError, OSError):
    """A file could not be written or read."""


class DivergenceError(MafnetError):
    """Training produced a non-finite loss.

    The attributes name the batch that diverged, so the run can be replayed
    from its seed.
    """

    def __init__(self, stage: str, epoch: int, batch: int, batch_seed: int):
        self.stage = stage
        self.epoch = epoch
        self.batch = batch
        self.batch_seed = batch_seed
        super().__init__(
            "Loss is not finite in stage %r, epoch %d, batch %d (batch seed %d)."
            % (stage, epoch, batch, batch_seed)
        )
