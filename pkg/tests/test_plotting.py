import math
import os
import shutil
import tempfile
import unittest

from mafnet.errors import FormatError, ParamError
from mafnet.metrics import MetricsTable
from mafnet.plotting import parse_training_log, plot_band_metrics, plot_loss_curves, read_limits

LOG = """\
fixed_sigma_30 1 1.000000e-04 0.051200 0.003100 0.051231
fixed_sigma_30 2 9.700000e-05 0.042000 0.002500 0.042025

complex 1 1.000000e-04 0.081000 0.004000 0.081040
"""


class PlottingTestCase(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.tmpdir)
        self.table = MetricsTable(
            psnr_mean=35.0,
            ssim_mean=0.9,
            sam_mean=0.05,
            per_band_psnr=[30.0, math.inf, 40.0, 35.0],
            per_band_ssim=[0.85, 1.0, 0.92, 0.83],
        )

    def test_band_metric_limits_cover_data(self):
        paths = plot_band_metrics(self.table, self.tmpdir, prefix="run_")
        assert [os.path.basename(p) for p in paths] == ["run_psnr_per_band.svg", "run_ssim_per_band.svg"]
        psnr_info = read_limits(paths[0])
        assert (psnr_info["data_min"], psnr_info["data_max"]) == (30.0, 40.0)
        assert psnr_info["ylim"][0] <= 30.0 and psnr_info["ylim"][1] >= 40.0
        ssim_info = read_limits(paths[1])
        assert ssim_info["ylim"][0] <= 0.83 and ssim_info["ylim"][1] >= 1.0

    def test_all_infinite_bands_are_skipped(self):
        table = MetricsTable(math.inf, 1.0, 0.0, [math.inf, math.inf], [1.0, 1.0])
        paths = plot_band_metrics(table, self.tmpdir)
        assert [os.path.basename(p) for p in paths] == ["ssim_per_band.svg"]

    def test_parse_training_log(self):
        path = os.path.join(self.tmpdir, "train.log")
        with open(path, "w") as f:
            f.write(LOG)
        rows = parse_training_log(path)
        assert len(rows) == 3
        assert rows[1] == ("fixed_sigma_30", 2, 9.7e-05, 0.042, 0.0025, 0.042025)

    def test_bad_log_line(self):
        path = os.path.join(self.tmpdir, "train.log")
        with open(path, "w") as f:
            f.write("fixed_sigma_30 1 0.1\n")
        with self.assertRaises(FormatError):
            parse_training_log(path)

    def test_loss_curves(self):
        path = os.path.join(self.tmpdir, "loss.svg")
        plot_loss_curves({"a": [0.5, 0.25, 0.125], "b": [0.75]}, path)
        info = read_limits(path)
        assert (info["data_min"], info["data_max"]) == (0.125, 0.75)
        assert info["ylim"][0] < 0.125 and info["ylim"][1] > 0.75
        with self.assertRaises(ParamError):
            plot_loss_curves({}, path)
        with self.assertRaises(ParamError):
            plot_loss_curves({"a": []}, path)

    def test_figures_are_reproducible(self):
        first = os.path.join(self.tmpdir, "one.svg")
        second = os.path.join(self.tmpdir, "two.svg")
        plot_loss_curves({"a": [0.5, 0.25]}, first)
        plot_loss_curves({"a": [0.5, 0.25]}, second)
        with open(first) as f, open(second) as g:
            assert f.read() == g.read()
