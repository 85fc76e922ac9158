import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nf3d.config import RunConfig
from nf3d.evaluation import (CSV_HEADER, PSNR_CAP, RDPoint, attribute_psnr, chamfer, rd_sweep,
                             write_rd_csv, write_rd_svg)
from nf3d.geometry_io import PointCloud, colors_to_8bit
from nf3d.shapes import icosphere

from oracles import chamfer_scan, psnr_scan


def gray(level8):
    return np.full((1, 3), 2 * level8 / 255 - 1)


class TestChamfer:
    def test_identity(self, rng):
        p = rng.normal(size=(300, 3))
        assert chamfer(p, p) == 0.0

    def test_single_pair(self):
        assert chamfer(np.zeros((1, 3)), np.array([[0.1, 0, 0]])) == pytest.approx(0.01, abs=1e-17)

    def test_brute_force(self, rng):
        a, b = rng.normal(size=(500, 3)), rng.normal(size=(500, 3))
        assert abs(chamfer(a, b) - chamfer_scan(a, b)) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(1, 40), st.integers(1, 40))
    def test_symmetric(self, seed, n, m):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(n, 3)), r.normal(size=(m, 3))
        assert chamfer(a, b) == chamfer(b, a)

    def test_quadratic_scaling(self, rng):
        a, b = rng.normal(size=(200, 3)), rng.normal(size=(150, 3))
        assert chamfer(3 * a, 3 * b) == pytest.approx(9 * chamfer(a, b), rel=1e-12)

    def test_accepts_point_clouds(self, rng):
        a, b = rng.normal(size=(20, 3)), rng.normal(size=(30, 3))
        assert chamfer(PointCloud(a), PointCloud(b)) == chamfer(a, b)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), np.zeros((1, 3)))


class TestPSNR:
    def test_identical_is_capped(self, rng):
        pc = PointCloud(rng.normal(size=(50, 3)), rng.uniform(-1, 1, (50, 3)))
        assert attribute_psnr(pc, pc) == PSNR_CAP == 100.0

    def test_single_point(self):
        a = PointCloud(np.zeros((1, 3)), gray(0))
        b = PointCloud(np.zeros((1, 3)), gray(16))
        assert attribute_psnr(a, b) == pytest.approx(10 * math.log10(255 ** 2 / 256), abs=1e-6)
        assert attribute_psnr(a, b) == pytest.approx(24.05, abs=5e-3)

    def test_symmetric(self, rng):
        a = PointCloud(rng.normal(size=(60, 3)), rng.uniform(-1, 1, (60, 3)))
        b = PointCloud(rng.normal(size=(40, 3)), rng.uniform(-1, 1, (40, 3)))
        assert attribute_psnr(a, b) == attribute_psnr(b, a)

    def test_brute_force(self, rng):
        a = PointCloud(rng.normal(size=(120, 3)), rng.uniform(-1, 1, (120, 3)))
        b = PointCloud(rng.normal(size=(90, 3)), rng.uniform(-1, 1, (90, 3)))
        ref = psnr_scan(colors_to_8bit(a.colors), a.points, colors_to_8bit(b.colors), b.points)
        assert attribute_psnr(a, b) == pytest.approx(ref, abs=1e-9)

    def test_noise_monotone(self, rng):
        pts = rng.normal(size=(2000, 3))
        col = rng.uniform(-0.5, 0.5, (2000, 3))
        gt = PointCloud(pts, col)
        vals = []
        for amp in (0.02, 0.1, 0.3):
            noisy = PointCloud(pts, col + rng.uniform(-amp, amp, col.shape))
            vals.append(attribute_psnr(gt, noisy))
        assert vals[0] > vals[1] > vals[2]

    def test_needs_colors(self):
        with pytest.raises(ValueError):
            attribute_psnr(PointCloud(np.zeros((1, 3))), PointCloud(np.zeros((1, 3))))


TINY = RunConfig(width=8, epochs=2, m_total=2000, batch_size=1000, r_mc=24, n_points=2000,
                 qat_epochs=1, levels=2, param_seed=1, data_seed=2)


@pytest.fixture(scope="module")
def sphere():
    return icosphere(2, 0.5)


class TestSweep:
    def test_single_width(self, sphere):
        pts = rd_sweep(sphere, [8], "sdf", TINY)
        assert len(pts) == 1 and pts[0].ok and pts[0].width == 8 and pts[0].bitwidth == 8

    def test_bytes_grow_with_width(self, sphere):
        pts = rd_sweep(sphere, [4, 8, 16], "sdf", TINY.replace(epochs=1))
        assert all(p.ok for p in pts)
        sizes = [p.bytes for p in pts]
        assert sizes[0] < sizes[1] < sizes[2]

    def test_bitwidth_ablation(self, sphere):
        pts = rd_sweep(sphere, [8], "sdf", TINY.replace(epochs=1), bitwidths=[6, 10])
        assert [p.bitwidth for p in pts] == [6, 10] and {p.width for p in pts} == {8}

    def test_failure_recorded(self, sphere, monkeypatch):
        import nf3d.codec

        real = nf3d.codec.roundtrip

        def flaky(shape, cfg):
            if cfg.width == 4:
                raise RuntimeError("boom")
            return real(shape, cfg)

        monkeypatch.setattr(nf3d.codec, "roundtrip", flaky)
        seen = []
        pts = rd_sweep(sphere, [4, 8], "sdf", TINY.replace(epochs=1), log_fn=seen.append)
        assert len(seen) == 2
        assert not pts[0].ok and math.isnan(pts[0].cd) and "boom" in pts[0].error
        assert pts[1].ok

    def test_parallel_matches_sequential(self, sphere):
        cfg = TINY.replace(epochs=1)
        seq = rd_sweep(sphere, [4, 8], "sdf", cfg)
        par = rd_sweep(sphere, [4, 8], "sdf", cfg, workers=2)
        assert [(p.bytes, p.cd) for p in seq] == [(p.bytes, p.cd) for p in par]


class TestOutputs:
    def points(self):
        return [RDPoint(16, 2000, 1e-4, None, 1.5, 0.25, bitwidth=8),
                RDPoint(32, 5000, 2e-5, 30.5, 3.0, 0.5, bitwidth=8),
                RDPoint(64, 0, float("nan"), error="boom")]

    def test_csv(self, tmp_path):
        write_rd_csv(self.points(), tmp_path / "rd.csv")
        rows = list(csv.reader(open(tmp_path / "rd.csv")))
        assert tuple(rows[0]) == CSV_HEADER == ("width", "bytes", "cd", "psnr", "t_encode_s",
                                                "t_decode_s")
        assert rows[1] == ["16", "2000", "0.0001", "", "1.500", "0.250"]
        assert rows[2][3] == "30.500000"
        assert rows[3][2] == "nan"

    def test_svg(self, tmp_path):
        write_rd_svg(self.points(), tmp_path / "rd.svg")
        text = (tmp_path / "rd.svg").read_text()
        assert text.startswith("<svg") and text.count("<circle") == 2

    def test_svg_without_points(self, tmp_path):
        write_rd_svg([], tmp_path / "rd.svg")
        assert "<circle" not in (tmp_path / "rd.svg").read_text()
