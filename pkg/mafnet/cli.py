"""Command-line entry point: ``mafnet <command> [options]``.

Exit codes:

====  ==========================================
0     success
2     bad usage, configuration or parameter
3     file could not be read or written
4     malformed file, bad data or shape mismatch
5     training diverged
====  ==========================================
"""

import argparse
import dataclasses
import logging
import os
import sys
from typing import Any

import torch

from . import __version__
from .cube import load_cube, normalize, save_cube, smooth_random_cube
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    FormatError,
    IoError,
    MafnetError,
    ParamError,
    ShapeError,
    UsageError,
)
from .metrics import MetricsTable, compute_metrics
from .network import NetworkConfig, denoise_cube, load_weights
from .noise import CASE_CODES, NoiseSpec, synthesize_case
from .plotting import parse_training_log, plot_band_metrics, plot_loss_curves
from .trainer import STAGE_NAMES, StageConfig, derive_seed, run_incremental_schedule, sample_patches

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5

THREADS_ENV = "MAFNET_THREADS"
TRAIN_LOG = "train.log"

# built-in defaults, overridden by --config files and then by flags
DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": {"seed": 0, "case": "", "normalize": "none"},
    "synth-data": {"seed": 0, "count": 4, "bands": 31, "height": 64, "width": 64},
    "train": {
        "seed": 0,
        "variant": "S",
        "stages": ",".join(STAGE_NAMES),
        "desk_scale": False,
        "patches": 200,
        "epochs": 0,
        "batch_size": 0,
        "patch": "",
        "lr_init": 1e-4,
        "lr_decay": 0.97,
        "grad_weight": 0.01,
    },
    "denoise": {"seed": 0},
    "eval": {"seed": 0, "data_range": 1.0},
    "plot": {"seed": 0},
}


@dataclasses.dataclass
class RunConfig:
    """The resolved settings of one invocation."""

    command: str
    values: dict[str, Any]

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def dump(self) -> str:
        lines = ["command=%s" % self.command]
        lines.extend("%s=%s" % (k, self.values[k]) for k in sorted(self.values))
        return "\n".join(lines)


def _coerce(key: str, raw: str, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError("Config key %s has a bad value %r." % (key, raw)) from None
    return raw


def read_config_file(path: str, defaults: dict[str, Any]) -> dict[str, Any]:
    """Read ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as err:
        raise IoError(err.errno, "Cannot read config file: %s" % err.strerror, path) from err
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError("%s:%d: expected key=value." % (path, lineno))
        if key not in defaults:
            raise ConfigError("%s:%d: unknown key %r." % (path, lineno, key))
        values[key] = _coerce(key, raw.strip(), defaults[key])
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    defaults = DEFAULTS[args.command]
    values = dict(defaults)
    if args.config:
        values.update(read_config_file(args.config, defaults))
    for key, value in vars(args).items():
        if key in ("command", "config", "print_config", "verbose", "func", "usage"):
            continue
        if value is not None:
            values[key] = value
    return RunConfig(args.command, values)


def configure_threads() -> None:
    """Apply ``MAFNET_THREADS``: 0 selects single-threaded deterministic mode."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError("%s must be an integer, got %r." % (THREADS_ENV, raw)) from None
    if threads < 0:
        raise ConfigError("%s must be >= 0, got %d." % (THREADS_ENV, threads))
    if threads == 0:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(threads)


def report_path(output: str) -> str:
    root, _ = os.path.splitext(output)
    return root + ".noise.txt"


def cmd_synth(config: RunConfig) -> int:
    if not config.case:
        raise UsageError("synth needs --case.")
    cube = load_cube(config.input)
    if config.normalize == "global_minmax":
        cube, _ = normalize(cube)
    elif config.normalize != "none":
        raise ConfigError("normalize must be 'none' or 'global_minmax', got %r." % config.normalize)
    spec = NoiseSpec.from_code(config.case, config.seed)
    noisy, report = synthesize_case(cube, spec)
    save_cube(noisy, config.output)
    report.save(report_path(config.output))
    logger.debug("Wrote %s and %s", config.output, report_path(config.output))
    return EXIT_OK


def cmd_synth_data(config: RunConfig) -> int:
    os.makedirs(config.output, exist_ok=True)
    for i in range(config.count):
        cube = smooth_random_cube(config.bands, config.height, config.width, seed=derive_seed(config.seed, i))
        save_cube(cube, os.path.join(config.output, "cube_%03d.hsd" % i))
    return EXIT_OK


def _stages(config: RunConfig) -> list[StageConfig]:
    names = [n.strip() for n in config.stages.split(",") if n.strip()]
    if not names:
        raise ConfigError("--stages names no stage.")
    make = StageConfig.desk if config.desk_scale else StageConfig.full
    stages = []
    for i, name in enumerate(names):
        overrides = dict(
            seed=derive_seed(config.seed, i),
            lr_init=config.lr_init,
            lr_decay=config.lr_decay,
            grad_weight=config.grad_weight,
        )
        if config.epochs:
            overrides["epochs"] = config.epochs
        if config.batch_size:
            overrides["batch_size"] = config.batch_size
        if config.patch:
            overrides["patch"] = _patch(config.patch)
        stages.append(make(name, **overrides).validate())
    return stages


def _patch(raw: str) -> tuple[int, int, int]:
    try:
        height, width, bands = (int(v) for v in raw.split(","))
    except ValueError:
        raise ConfigError("--patch must be HEIGHT,WIDTH,BANDS, got %r." % raw) from None
    return height, width, bands


def _data_cubes(directory: str):
    try:
        names = sorted(n for n in os.listdir(directory) if n.endswith(".hsd"))
    except OSError as err:
        raise IoError(err.errno, "Cannot list data directory: %s" % err.strerror, directory) from err
    if not names:
        raise DataError("No .hsd cubes in %s." % directory)
    return [load_cube(os.path.join(directory, n)) for n in names]


def cmd_train(config: RunConfig) -> int:
    stages = _stages(config)
    cubes = _data_cubes(config.data)
    net_config = NetworkConfig.variant(config.variant, bands=stages[0].patch[2], seed=config.seed).validate()
    patches = sample_patches(cubes, stages[0].patch, config.patches, derive_seed(config.seed, len(stages)))
    os.makedirs(config.output, exist_ok=True)

    trainer_logger = logging.getLogger("mafnet.trainer")
    handler = logging.FileHandler(os.path.join(config.output, TRAIN_LOG), mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    handler.setLevel(logging.INFO)
    previous_level = trainer_logger.level
    trainer_logger.addHandler(handler)
    trainer_logger.setLevel(min(logging.INFO, trainer_logger.getEffectiveLevel()))
    counter = iter(range(len(stages)))

    def save_stage(checkpoint):
        index = next(counter)
        record = checkpoint.stage_history[-1]
        path = os.path.join(config.output, "stage_%d_%s.mafw" % (index + 1, record.name))
        checkpoint.save(path)
        logger.debug("Saved %s", path)

    try:
        run_incremental_schedule(net_config, patches, stages, on_stage_end=save_stage)
    finally:
        trainer_logger.removeHandler(handler)
        trainer_logger.setLevel(previous_level)
        handler.close()
    return EXIT_OK


def cmd_denoise(config: RunConfig) -> int:
    net, _ = load_weights(config.weights)
    cube = load_cube(config.input)
    save_cube(denoise_cube(net, cube), config.output)
    return EXIT_OK


def cmd_eval(config: RunConfig) -> int:
    table = compute_metrics(load_cube(config.denoised), load_cube(config.reference), config.data_range)
    table.save(config.table)
    print(table.summary_line())
    return EXIT_OK


def cmd_plot(config: RunConfig) -> int:
    tables = config.values.get("table") or []
    logs = config.values.get("log") or []
    if not tables and not logs:
        raise ConfigError("plot needs at least one --table or --log.")
    os.makedirs(config.output, exist_ok=True)
    for path in tables:
        prefix = ""
        if len(tables) > 1:
            prefix = os.path.splitext(os.path.basename(path))[0] + "_"
        plot_band_metrics(MetricsTable.load(path), config.output, prefix)
    if logs:
        curves = {}
        for path in logs:
            label = os.path.basename(os.path.dirname(os.path.abspath(path))) or path
            if label in curves:
                label = path
            curves[label] = [row[5] for row in parse_training_log(path)]
        plot_loss_curves(curves, os.path.join(config.output, "loss_curves.svg"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--config", help="key=value file with default settings")
    common.add_argument("--print-config", action="store_true", help="print the resolved settings and exit")
    common.add_argument("-v", "--verbose", action="store_true", help="log debug messages")

    parser = argparse.ArgumentParser(prog="mafnet", description="Hyperspectral image denoising.")
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="add synthetic noise to a cube")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--case", choices=CASE_CODES, help="noise case code")
    p.add_argument("--normalize", choices=("none", "global_minmax"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("synth-data", parents=[common], help="write smooth random clean cubes")
    p.add_argument("output")
    p.add_argument("--count", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="run the staged training schedule")
    p.add_argument("data", help="directory of clean .hsd cubes")
    p.add_argument("output", help="directory for checkpoints and train.log")
    p.add_argument("--variant", choices=("S", "B", "L"))
    p.add_argument("--stages", help="comma-separated stage names")
    p.add_argument("--desk-scale", action="store_true", default=None, help="small patches and few epochs")
    p.add_argument("--patches", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch", help="patch size as HEIGHT,WIDTH,BANDS")
    p.add_argument("--lr-init", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--grad-weight", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", parents=[common], help="denoise a cube with trained weights")
    p.add_argument("weights")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", parents=[common], help="score a cube against a reference")
    p.add_argument("denoised")
    p.add_argument("reference")
    p.add_argument("table", help="metrics table to write")
    p.add_argument("--data-range", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", parents=[common], help="plot metrics tables and training logs")
    p.add_argument("output", help="directory for the SVG files")
    p.add_argument("--table", action="append", help="metrics table (repeatable)")
    p.add_argument("--log", action="append", help="training log (repeatable)")
    p.set_defaults(func=cmd_plot)

    for p in sub.choices.values():
        p.set_defaults(usage=p.format_usage)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    command = args.func
    try:
        config = resolve_config(args)
        if args.print_config:
            print(config.dump())
            return EXIT_OK
        configure_threads()
        return command(config)
    except DivergenceError as err:
        logger.error("%s", err)
        return EXIT_DIVERGED
    except UsageError as err:
        print(args.usage(), end="", file=sys.stderr)
        logger.error("%s", err)
        return EXIT_USAGE
    except (ConfigError, ParamError) as err:
        logger.error("%s", err)
        return EXIT_USAGE
    except (IoError, OSError) as err:
        logger.error("%s", err)
        return EXIT_IO
    except (FormatError, DataError, ShapeError, MafnetError) as err:
        logger.error("%s", err)
        return EXIT_DATA
