"""Extraction jobs: run the frozen encoder over paired RGB/depth files and
emit PCEB datasets; build PCTB depth-table initializations from text phrases.

Dataset kinds fix the geometry and depth conventions:
  nyu   -> resize to 336x336 (grid 24x24), depth PNG meters = raw / 1000
  kitti -> resize to 336x1344 (grid 24x96, encoded per 336px tile),
           depth PNG meters = raw / 256
RGB resizes bilinearly; depth resizes nearest-neighbor; raw 0 means missing
and becomes NaN. Undecodable inputs are recorded in a failure manifest and
the job continues.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import PATCH_SIZE, TILE_SIDE, EncoderError
from .formats import DatasetHeader, FrameRecord, write_pceb, write_pctb

DATASET_KINDS = {
    # (img_h, img_w, depth_scale, d_min, d_max, range_min, range_max, k)
    "nyu": (336, 336, 1.0 / 1000.0, 0.001, 10.0, 0.0, 10.0, 15),
    "kitti": (336, 1344, 1.0 / 256.0, 0.001, 30.0, 0.0, 30.0, 15),
}


class JobError(ValueError):
    """The job description itself is unusable."""


@dataclass
class ExtractJob:
    pairs: list[tuple[Path, Path | None]]  # (rgb path, depth path or None)
    kind: str  # nyu | kitti
    flip: bool
    out: Path

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise JobError(f"unknown dataset kind {self.kind!r}")
        if not self.pairs:
            raise JobError("no input images")


def load_pairs(source: str | Path, split: str = "") -> list[tuple[Path, Path | None]]:
    """Image/depth pairs from a list file ("rgb[,depth]" per line) or from a
    directory holding rgb/ and depth/ subdirectories with matching stems."""
    source = Path(source)
    if split:
        source = source / split
    if source.is_file():
        pairs = []
        for raw in source.read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            rgb = Path(parts[0])
            depth = Path(parts[1]) if len(parts) > 1 and parts[1] else None
            pairs.append((rgb, depth))
        return pairs
    if source.is_dir():
        rgb_dir = source / "rgb"
        depth_dir = source / "depth"
        if not rgb_dir.is_dir():
            raise JobError(f"{source}: expected an rgb/ subdirectory")
        pairs = []
        for rgb in sorted(rgb_dir.iterdir()):
            if rgb.suffix.lower() not in (".png", ".jpg", ".jpeg"):
                continue
            depth = depth_dir / f"{rgb.stem}.png"
            pairs.append((rgb, depth if depth.exists() else None))
        return pairs
    raise JobError(f"{source}: not a list file or dataset directory")


def _load_rgb(path: Path, img_h: int, img_w: int) -> np.ndarray:
    with Image.open(path) as img:
        resized = img.convert("RGB").resize((img_w, img_h), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float64) / 255.0


def _load_depth(path: Path, scale: float, img_h: int, img_w: int) -> np.ndarray:
    with Image.open(path) as img:
        resized = img.convert("I").resize((img_w, img_h), Image.NEAREST)
    raw = np.asarray(resized, dtype=np.float64)
    meters = raw * scale
    meters[raw == 0] = np.nan
    return meters.astype(np.float32)


def _encode_wide(encoder, rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Encode a (336, 336*n, 3) image per square tile; concatenate the patch
    grids left to right and average the tile CLS vectors."""
    n_tiles = rgb.shape[1] // TILE_SIDE
    grids, cls_vecs = [], []
    for t in range(n_tiles):
        tile = rgb[:, t * TILE_SIDE : (t + 1) * TILE_SIDE]
        patches, cls = encoder.encode_image(tile)
        grids.append(patches)
        cls_vecs.append(cls.astype(np.float64))
    merged = np.concatenate(grids, axis=1)
    cls = np.mean(cls_vecs, axis=0).astype(np.float32)
    return merged, cls


@dataclass
class ExtractResult:
    out: Path
    manifest: Path
    n_frames: int
    failures: list = field(default_factory=list)


def extract_frames(job: ExtractJob, encoder) -> ExtractResult:
    """Run the encoder over every pair; write one PCEB frame per image."""
    img_h, img_w, scale, d_min, d_max, range_min, range_max, k = DATASET_KINDS[job.kind]
    frames: list[FrameRecord] = []
    failures: list[dict] = []
    has_depth = any(depth is not None for _, depth in job.pairs)
    for rgb_path, depth_path in job.pairs:
        try:
            rgb = _load_rgb(rgb_path, img_h, img_w)
            patches, cls = _encode_wide(encoder, rgb)
            record = FrameRecord(patches=patches, cls=cls)
            if job.flip:
                flipped_patches, flipped_cls = _encode_wide(
                    encoder, np.ascontiguousarray(rgb[:, ::-1])
                )
                record.flipped_patches = flipped_patches
                record.flipped_cls = flipped_cls
            if has_depth:
                if depth_path is None:
                    raise JobError("missing depth path while other frames carry depth")
                record.pixel_depth = _load_depth(depth_path, scale, img_h, img_w)
            frames.append(record)
        except (OSError, ValueError, JobError) as exc:
            failures.append({"image": str(rgb_path), "error": f"{type(exc).__name__}: {exc}"})
    if not frames:
        raise JobError(f"all {len(job.pairs)} inputs failed; see manifest")
    header = DatasetHeader(
        dim=encoder.width, grid_h=img_h // PATCH_SIZE, grid_w=img_w // PATCH_SIZE,
        img_h=img_h, img_w=img_w, d_min=d_min, d_max=d_max,
        range_min=range_min, range_max=range_max, k=k,
    )
    out = write_pceb(job.out, header, frames)
    manifest_path = Path(f"{job.out}.manifest.json")
    manifest_path.write_text(
        json.dumps(
            {
                "backend": getattr(encoder, "name", "unknown"),
                "tap": getattr(encoder, "tap", None),
                "dataset": job.kind,
                "flip": job.flip,
                "frames_written": len(frames),
                "failures": failures,
            },
            indent=2,
        )
        + "\n"
    )
    return ExtractResult(out=out, manifest=manifest_path, n_frames=len(frames),
                         failures=failures)


def text_table_init(
    centers,
    out: str | Path,
    encoder,
    template: str = "{value} meters",
) -> Path:
    """Encode one phrase per bin center ("0.3 meters", ...), unit-normalize,
    and write the PCTB file with the centers rounded as phrased."""
    if "{value}" not in template:
        raise JobError(f"template {template!r} has no {{value}} slot")
    rounded = [round(float(c), 1) for c in centers]
    phrases = [template.format(value=v) for v in rounded]
    vectors = encoder.encode_texts(phrases).astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms <= 0):
        raise JobError("text encoder produced a zero vector")
    vectors /= norms
    return write_pctb(out, vectors.astype(np.float32), np.asarray(rounded, dtype=np.float32))
