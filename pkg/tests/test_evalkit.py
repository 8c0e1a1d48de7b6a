import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embdepth.dataio import DataError
from embdepth.evalkit import (
    AnalysisTables,
    CropSpec,
    MetricAccumulator,
    analysis_tables,
    bilinear_resize,
    compute_metrics,
    crop_mask,
    format_report,
    tta_and_merge,
    upsample_to_pixels,
    write_analysis_csv,
    write_pgm,
)
from embdepth.tensorcore import ParameterError, ShapeError


class TestComputeMetrics:
    def test_perfect_prediction(self):
        gt = np.random.default_rng(0).uniform(0.5, 9.5, size=(20, 20))
        r = compute_metrics(gt.copy(), gt)
        assert (r.abs_rel, r.rmse, r.log10) == (0.0, 0.0, 0.0)
        assert (r.d1, r.d2, r.d3) == (1.0, 1.0, 1.0)
        assert r.n_pixels == 400

    def test_constant_ratio(self):
        gt = np.random.default_rng(1).uniform(1.0, 8.0, size=200)
        r = compute_metrics(1.3 * gt, gt)
        assert r.abs_rel == pytest.approx(0.3, abs=1e-9)
        assert r.d1 == 0.0
        assert r.d2 == 1.0 and r.d3 == 1.0  # 1.3 < 1.5625
        assert r.log10 == pytest.approx(0.11394335230683677, abs=1e-5)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(2)
        gt = rng.uniform(1.0, 9.0, size=300)
        pred = gt * rng.uniform(0.8, 1.3, size=300)
        a = compute_metrics(pred, gt)
        b = compute_metrics(2.5 * pred, 2.5 * gt)
        assert b.abs_rel == pytest.approx(a.abs_rel, rel=1e-12)
        assert b.log10 == pytest.approx(a.log10, rel=1e-12)
        assert (b.d1, b.d2, b.d3) == (a.d1, a.d2, a.d3)
        assert b.rmse == pytest.approx(2.5 * a.rmse, rel=1e-12)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_delta_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(0.5, 9.5, size=100)
        pred = gt * np.exp(rng.standard_normal(100) * 0.3)
        r = compute_metrics(pred, gt)
        assert r.d1 <= r.d2 <= r.d3 <= 1.0

    def test_masked_pixels_ignored(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(1.0, 9.0, size=100)
        pred = gt * 1.1
        mask = rng.integers(0, 2, size=100).astype(bool)
        a = compute_metrics(pred, gt, mask=mask)
        pred2 = pred.copy()
        pred2[~mask] = 999.0
        b = compute_metrics(pred2, gt, mask=mask)
        assert a == b

    def test_depth_bounds_filter(self):
        gt = np.array([0.0005, 2.0, 11.0])
        pred = np.array([1.0, 2.0, 1.0])
        r = compute_metrics(pred, gt, d_min=0.001, d_max=10.0)
        assert r.n_pixels == 1 and r.abs_rel == 0.0

    def test_nan_gt_excluded(self):
        gt = np.array([np.nan, 3.0])
        r = compute_metrics(np.array([7.0, 3.0]), gt)
        assert r.n_pixels == 1 and r.rmse == 0.0

    def test_empty_selection_names_frame(self):
        with pytest.raises(DataError, match="frame 17"):
            compute_metrics(np.ones(4), np.full(4, np.nan), frame_id=17)

    def test_accumulator_matches_pooled(self):
        rng = np.random.default_rng(4)
        gt1, gt2 = rng.uniform(1, 9, 50), rng.uniform(1, 9, 70)
        p1, p2 = gt1 * 1.1, gt2 * 0.85
        acc = MetricAccumulator()
        acc.add(p1, gt1)
        acc.add(p2, gt2)
        pooled = compute_metrics(np.concatenate([p1, p2]), np.concatenate([gt1, gt2]))
        got = acc.report()
        assert got.abs_rel == pytest.approx(pooled.abs_rel, rel=1e-12)
        assert got.rmse == pytest.approx(pooled.rmse, rel=1e-12)
        assert got.n_pixels == pooled.n_pixels

    def test_format_report_keys(self):
        r = compute_metrics(np.ones(4), np.ones(4))
        text = format_report(r)
        for key in ("abs_rel", "rmse", "log10", "d1", "d2", "d3", "n_pixels"):
            assert key in text.split()


class TestCropMask:
    def test_none_keeps_all(self):
        assert crop_mask("none", 10, 20).all()

    def test_eigen_region(self):
        mask = crop_mask("eigen", 480, 640)
        rows = mask.any(axis=1).sum()
        cols = mask.any(axis=0).sum()
        assert (rows, cols) == (426, 560)

    def test_garg_scales_with_size(self):
        small = crop_mask("garg", 100, 200)
        big = crop_mask("garg", 200, 400)
        assert abs(big.any(axis=1).sum() - 2 * small.any(axis=1).sum()) <= 1
        assert abs(big.any(axis=0).sum() - 2 * small.any(axis=0).sum()) <= 1

    def test_unknown_crop(self):
        with pytest.raises(ParameterError):
            crop_mask("bogus", 10, 10)

    def test_cropspec_type(self):
        assert crop_mask(CropSpec("none"), 4, 4).all()
        with pytest.raises(ParameterError):
            CropSpec("weird")


class TestUpsample:
    def test_constant_grid(self):
        px = upsample_to_pixels(np.full((2, 2), 3.7), 28, 28)
        np.testing.assert_allclose(px, 3.7)

    def test_single_patch(self):
        px = upsample_to_pixels(np.array([[2.5]]), 14, 14)
        assert px.shape == (14, 14)
        np.testing.assert_allclose(px, 2.5)

    def test_block_replication_exact(self):
        rng = np.random.default_rng(0)
        grid = rng.uniform(1, 9, size=(3, 2))
        px = upsample_to_pixels(grid, 42, 28, gt_h=42, gt_w=28)
        for r in range(3):
            for c in range(2):
                block = px[r * 14 : (r + 1) * 14, c * 14 : (c + 1) * 14]
                np.testing.assert_array_equal(block, grid[r, c])

    def test_resize_to_other_resolution(self):
        grid = np.full((2, 2), 5.0)
        px = upsample_to_pixels(grid, 28, 28, gt_h=50, gt_w=60)
        assert px.shape == (50, 60)
        np.testing.assert_allclose(px, 5.0)

    def test_geometry_checked(self):
        with pytest.raises(ShapeError):
            upsample_to_pixels(np.ones((2, 2)), 30, 28)

    def test_bilinear_identity(self):
        img = np.random.default_rng(1).uniform(0, 1, size=(9, 7))
        np.testing.assert_array_equal(bilinear_resize(img, 9, 7), img)

    def test_bilinear_preserves_mean_roughly(self):
        img = np.random.default_rng(2).uniform(0, 1, size=(20, 20))
        out = bilinear_resize(img, 40, 40)
        assert abs(out.mean() - img.mean()) < 0.01


class TestTtaAndMerge:
    def test_average_of_two_maps(self):
        a = np.random.default_rng(0).uniform(1, 9, size=(4, 4))
        b = np.random.default_rng(1).uniform(1, 9, size=(4, 4))
        # un-flipping the flipped map means the average uses b mirrored back
        out = tta_and_merge([a], [b])
        np.testing.assert_allclose(out, 0.5 * (a + b[:, ::-1]))

    def test_mirrored_flip_equals_direct(self):
        a = np.random.default_rng(2).uniform(1, 9, size=(6, 6))
        out = tta_and_merge([a], [a[:, ::-1].copy()])
        np.testing.assert_allclose(out, a)

    def test_four_tiles_merge(self):
        tiles = [np.full((24, 24), float(i)) for i in range(4)]
        out = tta_and_merge(tiles)
        assert out.shape == (24, 96)
        assert out[0, 0] == 0.0 and out[0, 95] == 3.0

    def test_single_tile_identity(self):
        a = np.random.default_rng(3).uniform(size=(5, 5))
        np.testing.assert_array_equal(tta_and_merge([a]), a)


class TestAnalysisTables:
    def test_diagonal_when_exact(self):
        rng = np.random.default_rng(0)
        gt = rng.uniform(0.1, 9.9, size=5000)
        edges = np.linspace(0, 10, 16)
        tables = analysis_tables(gt, gt.copy(), edges)
        off_diag = tables.joint_hist - np.diag(np.diag(tables.joint_hist))
        assert off_diag.sum() == 0
        np.testing.assert_allclose(tables.sigma_per_bin, 0.0, atol=1e-12)

    def test_row_sums_are_gt_hist(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(0.1, 9.9, size=3000)
        pred = np.clip(gt + rng.standard_normal(3000), 0.01, 9.99)
        edges = np.linspace(0, 10, 16)
        tables = analysis_tables(gt, pred, edges)
        np.testing.assert_array_equal(tables.joint_hist.sum(axis=1), tables.gt_hist)

    def test_trim_removes_bins(self):
        rng = np.random.default_rng(2)
        gt = rng.uniform(0.1, 9.9, size=1000)
        edges = np.linspace(0, 10, 16)
        full = analysis_tables(gt, gt, edges)
        trimmed = analysis_tables(gt, gt, edges, trim={1})
        assert len(trimmed.gt_hist) == len(full.gt_hist) - 1
        assert 1 not in trimmed.kept_bins
        np.testing.assert_array_equal(trimmed.gt_hist, full.gt_hist[1:])

    def test_csv_outputs(self, tmp_path):
        rng = np.random.default_rng(3)
        gt = rng.uniform(0.1, 9.9, size=500)
        pred = np.clip(gt * 1.05, 0.01, 9.99)
        tables = analysis_tables(gt, pred, np.linspace(0, 10, 16), trim=(1,))
        paths = write_analysis_csv(tables, tmp_path)
        assert [p.name for p in paths] == ["joint.csv", "sigma.csv", "hist.csv"]
        joint = paths[0].read_text().splitlines()
        assert joint[0].startswith("gt_center,pred_")
        assert len(joint) == 1 + 14  # header + 15 bins - 1 trimmed

    def test_no_pairs_rejected(self):
        with pytest.raises(DataError):
            analysis_tables([], [], np.linspace(0, 10, 16))


class TestWritePgm:
    def test_header_and_payload(self, tmp_path):
        depth = np.array([[0.001, 10.0], [5.0005, 0.001]])
        path = write_pgm(tmp_path / "d.pgm", depth, 0.001, 10.0)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n2 2\n")
        assert b"65535\n" in raw
        payload = raw.rsplit(b"65535\n", 1)[1]
        values = np.frombuffer(payload, dtype=">u2").reshape(2, 2)
        assert values[0, 0] == 0
        assert values[0, 1] == 65535
        assert values[1, 0] == pytest.approx(32768, abs=1)

    def test_clipping(self, tmp_path):
        path = write_pgm(tmp_path / "c.pgm", np.array([[-5.0, 50.0]]), 0.0, 10.0)
        payload = path.read_bytes().rsplit(b"65535\n", 1)[1]
        values = np.frombuffer(payload, dtype=">u2")
        assert values[0] == 0 and values[1] == 65535
