"""Evaluation kit: standard depth metrics over valid pixels, crop masks,
patch-to-pixel reconstruction, tile merging, flip-averaged TTA, and the
joint-distribution / uncertainty / histogram analysis tables."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import DataError, PATCH_SIZE, hflip_grid, tile_merge
from .tensorcore import ParameterError, ShapeError

# Border exclusions used by the community evaluation protocols the dataset
# names refer to. Eigen bounds are absolute pixels on 480x640; Garg bounds
# are fractions of the image size.
EIGEN_BOUNDS = (45, 471, 41, 601)
GARG_FRACTIONS = (0.40810811, 0.99189189, 0.03594771, 0.96405229)


@dataclass
class MetricReport:
    abs_rel: float
    rmse: float
    log10: float
    d1: float
    d2: float
    d3: float
    n_pixels: int


@dataclass
class CropSpec:
    """Evaluation region: eigen (absolute pixels), garg (fractions), or none."""

    name: str

    def __post_init__(self):
        if self.name not in ("eigen", "garg", "none"):
            raise ParameterError(f"unknown crop {self.name!r}")


def format_report(report: MetricReport) -> str:
    lines = [
        f"abs_rel {report.abs_rel:.6f}",
        f"rmse {report.rmse:.6f}",
        f"log10 {report.log10:.6f}",
        f"d1 {report.d1:.6f}",
        f"d2 {report.d2:.6f}",
        f"d3 {report.d3:.6f}",
        f"n_pixels {report.n_pixels}",
    ]
    return "\n".join(lines)


def crop_mask(spec: CropSpec | str, gt_h: int, gt_w: int) -> np.ndarray:
    """Boolean mask of pixels inside the named evaluation region."""
    if gt_h < 1 or gt_w < 1:
        raise ParameterError(f"bad image size {gt_h}x{gt_w}")
    name = spec.name if isinstance(spec, CropSpec) else CropSpec(str(spec)).name
    mask = np.zeros((gt_h, gt_w), dtype=bool)
    if name == "none":
        mask[:] = True
    elif name == "eigen":
        r0, r1, c0, c1 = EIGEN_BOUNDS
        mask[r0:r1, c0:c1] = True
    else:  # garg
        fr0, fr1, fc0, fc1 = GARG_FRACTIONS
        mask[int(fr0 * gt_h) : int(fr1 * gt_h), int(fc0 * gt_w) : int(fc1 * gt_w)] = True
    return mask


class MetricAccumulator:
    """Pixel-weighted accumulation of the six metrics across frames."""

    def __init__(self, d_min: float | None = None, d_max: float | None = None):
        self.d_min = d_min
        self.d_max = d_max
        self.n = 0
        self._abs_rel = 0.0
        self._sq = 0.0
        self._log10 = 0.0
        self._d1 = 0
        self._d2 = 0
        self._d3 = 0

    def add(self, pred, gt, mask=None, frame_id=None) -> int:
        pred = np.asarray(pred, dtype=np.float64).ravel()
        gt = np.asarray(gt, dtype=np.float64).ravel()
        if pred.shape != gt.shape:
            raise ShapeError(f"metrics: pred {pred.shape} vs gt {gt.shape}")
        sel = np.isfinite(gt)
        if mask is not None:
            m = np.asarray(mask).astype(bool).ravel()
            if m.shape != gt.shape:
                raise ShapeError(f"metrics: mask {m.shape} vs gt {gt.shape}")
            sel &= m
        if self.d_min is not None:
            sel &= gt >= self.d_min
        if self.d_max is not None:
            sel &= gt <= self.d_max
        d = pred[sel]
        g = gt[sel]
        if d.size == 0:
            where = "" if frame_id is None else f" in frame {frame_id}"
            raise DataError(f"no valid ground-truth pixels{where}")
        ratio = np.maximum(d / g, g / d)
        self._d1 += int((ratio < 1.25).sum())
        self._d2 += int((ratio < 1.25**2).sum())
        self._d3 += int((ratio < 1.25**3).sum())
        self._abs_rel += float((np.abs(d - g) / g).sum())
        self._sq += float(((d - g) ** 2).sum())
        self._log10 += float(np.abs(np.log10(d) - np.log10(g)).sum())
        self.n += d.size
        return d.size

    def report(self) -> MetricReport:
        if self.n == 0:
            raise DataError("no pixels accumulated")
        n = float(self.n)
        return MetricReport(
            abs_rel=self._abs_rel / n,
            rmse=math.sqrt(self._sq / n),
            log10=self._log10 / n,
            d1=self._d1 / n,
            d2=self._d2 / n,
            d3=self._d3 / n,
            n_pixels=self.n,
        )


def compute_metrics(
    pred,
    gt,
    mask=None,
    d_min: float | None = None,
    d_max: float | None = None,
    frame_id=None,
) -> MetricReport:
    """Six standard metrics over the pixels with valid ground truth."""
    acc = MetricAccumulator(d_min=d_min, d_max=d_max)
    acc.add(pred, gt, mask=mask, frame_id=frame_id)
    return acc.report()


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-aligned centers and edge clamping."""
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.astype(np.float64)
    src = img.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, in_h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, in_w - 1).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - wx) + src[np.ix_(y0, x1)] * wx
    bot = src[np.ix_(y1, x0)] * (1 - wx) + src[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def upsample_to_pixels(
    grid_depth: np.ndarray,
    img_h: int,
    img_w: int,
    gt_h: int | None = None,
    gt_w: int | None = None,
) -> np.ndarray:
    """Fill each patch's pixel block with its depth, then resize to the
    ground-truth resolution when it differs."""
    gh, gw = grid_depth.shape
    if gh * PATCH_SIZE != img_h or gw * PATCH_SIZE != img_w:
        raise ShapeError(
            f"upsample: grid {gh}x{gw} does not tile image {img_h}x{img_w} "
            f"with patch size {PATCH_SIZE}"
        )
    px = np.repeat(np.repeat(grid_depth, PATCH_SIZE, axis=0), PATCH_SIZE, axis=1)
    if gt_h is None or gt_w is None or (gt_h, gt_w) == (img_h, img_w):
        return px.astype(np.float64)
    return bilinear_resize(px, gt_h, gt_w)


def tta_and_merge(
    direct_tiles: list[np.ndarray],
    flipped_tiles: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Merge tiles left to right; average with the un-flipped flip prediction
    when one exists."""
    merged = tile_merge(direct_tiles) if len(direct_tiles) > 1 else np.asarray(direct_tiles[0])
    if flipped_tiles is None:
        return merged
    flipped = (
        tile_merge(flipped_tiles) if len(flipped_tiles) > 1 else np.asarray(flipped_tiles[0])
    )
    if flipped.shape != merged.shape:
        raise ShapeError(f"tta: flipped {flipped.shape} vs direct {merged.shape}")
    return 0.5 * (merged + hflip_grid(flipped))


@dataclass
class AnalysisTables:
    """Joint (gt x pred) counts, per-gt-bin prediction spread, and the gt
    histogram, with low-sample bins trimmed from the gt axis."""

    joint_hist: np.ndarray  # (n_kept, K) int
    sigma_per_bin: np.ndarray  # (n_kept,) float64 meters
    gt_hist: np.ndarray  # (n_kept,) int
    edges: np.ndarray  # (K + 1,) float64 meters
    kept_bins: np.ndarray  # (n_kept,) int, 1-based gt bin indices


def analysis_tables(gt, pred, edges, trim=()) -> AnalysisTables:
    """Bin (gt, pred) pairs over shared edges; drop pairs outside the edge
    span; trim the listed 1-based bins from the gt axis."""
    gt = np.asarray(gt, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    edges = np.asarray(edges, dtype=np.float64).ravel()
    if gt.shape != pred.shape:
        raise ShapeError(f"analysis: gt {gt.shape} vs pred {pred.shape}")
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ParameterError("analysis: edges must be strictly increasing")
    if gt.size == 0:
        raise DataError("analysis: no (gt, pred) pairs")
    k = edges.size - 1
    in_range = (gt >= edges[0]) & (gt <= edges[-1]) & (pred >= edges[0]) & (pred <= edges[-1])
    g = gt[in_range]
    p = pred[in_range]
    if g.size == 0:
        raise DataError("analysis: all pairs fall outside the bin edges")
    g_idx = np.minimum(np.digitize(g, edges), k) - 1
    p_idx = np.minimum(np.digitize(p, edges), k) - 1
    joint = np.zeros((k, k), dtype=np.int64)
    np.add.at(joint, (g_idx, p_idx), 1)
    gt_hist = joint.sum(axis=1)
    # Spread of the prediction error inside each gt bin (0 when pred == gt).
    err = p - g
    sigma = np.zeros(k, dtype=np.float64)
    for b in range(k):
        vals = err[g_idx == b]
        if vals.size:
            sigma[b] = float(vals.std())
    trimmed = set(trim)
    keep = np.array([b for b in range(1, k + 1) if b not in trimmed], dtype=int)
    rows = keep - 1
    return AnalysisTables(
        joint_hist=joint[rows],
        sigma_per_bin=sigma[rows],
        gt_hist=gt_hist[rows],
        edges=edges,
        kept_bins=keep,
    )


def write_analysis_csv(tables: AnalysisTables, out_dir: str | Path) -> list[Path]:
    """Emit joint.csv, sigma.csv, and hist.csv ('.' decimal, comma-separated)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    centers = 0.5 * (tables.edges[:-1] + tables.edges[1:])
    kept_centers = centers[tables.kept_bins - 1]

    joint_path = out_dir / "joint.csv"
    header = "gt_center," + ",".join(f"pred_{c:.6g}" for c in centers)
    rows = [header]
    for c, row in zip(kept_centers, tables.joint_hist):
        rows.append(f"{c:.6g}," + ",".join(str(int(v)) for v in row))
    joint_path.write_text("\n".join(rows) + "\n")

    sigma_path = out_dir / "sigma.csv"
    rows = ["gt_center,sigma"]
    rows += [f"{c:.6g},{s:.6g}" for c, s in zip(kept_centers, tables.sigma_per_bin)]
    sigma_path.write_text("\n".join(rows) + "\n")

    hist_path = out_dir / "hist.csv"
    rows = ["gt_center,count"]
    rows += [f"{c:.6g},{int(n)}" for c, n in zip(kept_centers, tables.gt_hist)]
    hist_path.write_text("\n".join(rows) + "\n")
    return [joint_path, sigma_path, hist_path]


def write_pgm(path: str | Path, depth: np.ndarray, d_min: float, d_max: float) -> Path:
    """16-bit binary PGM with depth mapped linearly onto [0, 65535]."""
    if d_max <= d_min:
        raise ParameterError(f"bad depth span [{d_min}, {d_max}]")
    scaled = np.clip((np.asarray(depth, dtype=np.float64) - d_min) / (d_max - d_min), 0.0, 1.0)
    values = np.round(scaled * 65535.0).astype(">u2")
    h, w = values.shape
    header = (
        f"P5\n{w} {h}\n"
        f"# 0..65535 maps linearly to {d_min:.6g}..{d_max:.6g} m\n"
        f"65535\n"
    )
    path = Path(path)
    path.write_bytes(header.encode("ascii") + values.tobytes())
    return path
