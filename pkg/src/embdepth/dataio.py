"""Embedding dataset I/O: the PCEB/PCTB binary formats, ground-truth patch
targets, bin geometry, tiling/flip layout, and a synthetic generator whose
depth signal lives on a planted 2-plane (so convergence can be checked against
a brute-force oracle).

All on-disk reals are little-endian float32; integers are little-endian u32.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorcore import ParameterError, ShapeError

PATCH_SIZE = 14
IMAGE_UNIT = 336  # image sides are multiples of this; 336 = 24 patches

PCEB_MAGIC = b"PCEB"
PCTB_MAGIC = b"PCTB"
PCEB_VERSION = 1
PCTB_VERSION = 1
FLAG_FLIPPED = 1
FLAG_PIXEL_DEPTH = 2

_PCEB_HEADER = struct.Struct("<4sIIIIIIIIffffI")
_PCTB_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A file does not conform to its declared binary layout."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MagicError(FormatError):
    """Leading magic bytes are wrong."""


class VersionError(FormatError):
    """Unsupported format version."""


class TruncationError(FormatError):
    """File ended before the declared content."""


class DataError(RuntimeError):
    """Input data violates a runtime contract (not a parse failure)."""


@dataclass
class DatasetSpec:
    """Geometry and depth-range metadata shared by every frame of a dataset."""

    dim: int
    grid_h: int
    grid_w: int
    img_h: int
    img_w: int
    d_min: float
    d_max: float
    range_min: float
    range_max: float
    k: int
    crop: str = "none"

    def validate(self) -> None:
        if self.dim < 1:
            raise ParameterError(f"embedding dim must be >= 1, got {self.dim}")
        if not 0.0 <= self.d_min < self.d_max:
            raise ParameterError(f"need 0 <= d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.k < 2:
            raise ParameterError(f"need at least 2 bins, got {self.k}")
        if self.range_max <= self.range_min:
            raise ParameterError(
                f"need range_min < range_max, got [{self.range_min}, {self.range_max}]"
            )
        if self.img_h != self.grid_h * PATCH_SIZE or self.img_w != self.grid_w * PATCH_SIZE:
            raise ParameterError(
                f"image {self.img_h}x{self.img_w} is not grid {self.grid_h}x{self.grid_w} "
                f"times patch size {PATCH_SIZE}"
            )
        if self.img_h % IMAGE_UNIT or self.img_w % IMAGE_UNIT:
            raise ParameterError(
                f"image sides must be multiples of {IMAGE_UNIT}, got {self.img_h}x{self.img_w}"
            )

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class EmbeddingFrame:
    """One image's patch-embedding grid plus its global summary vector."""

    patches: np.ndarray  # (grid_h, grid_w, dim) float32
    cls: np.ndarray  # (dim,) float32
    flipped_patches: np.ndarray | None = None
    flipped_cls: np.ndarray | None = None
    pixel_depth: np.ndarray | None = None  # (img_h, img_w) float32, NaN = missing
    frame_id: int = 0


@dataclass
class PatchTarget:
    """Supervision for one patch: mean depth over its valid pixels, the bin it
    falls in (1-based), and the validity mask bit."""

    depth: float | None
    bin_index: int | None
    valid: bool


def bin_centers(range_min: float, range_max: float, k: int) -> np.ndarray:
    """Midpoints of ``k`` equal-width bins partitioning [range_min, range_max]."""
    if k < 2:
        raise ParameterError(f"need at least 2 bins, got {k}")
    if range_max <= range_min:
        raise ParameterError(f"empty depth range [{range_min}, {range_max}]")
    width = (range_max - range_min) / k
    return range_min + (np.arange(k, dtype=np.float64) + 0.5) * width


def assign_bin(depth: float, centers: np.ndarray) -> int:
    """1-based index of the nearest center; ties go to the lower index."""
    if depth < 0:
        raise ParameterError(f"depth must be >= 0, got {depth}")
    dist = np.abs(np.asarray(centers, dtype=np.float64) - float(depth))
    return int(np.argmin(dist)) + 1


def patch_target(pixels, spec: DatasetSpec) -> PatchTarget:
    """Target for one patch from the depth values inside its pixel region.

    Pixels outside [d_min, d_max] or NaN are dropped; the patch is valid only
    when strictly more than half of its pixels survive the filter.
    """
    px = np.asarray(pixels, dtype=np.float64).ravel()
    if px.size == 0:
        raise ShapeError("patch_target: empty pixel region")
    ok = np.isfinite(px) & (px >= spec.d_min) & (px <= spec.d_max)
    n_ok = int(ok.sum())
    valid = 2 * n_ok > px.size
    depth = float(px[ok].mean()) if n_ok else None
    bin_index = None
    if valid:
        bin_index = assign_bin(depth, bin_centers(spec.range_min, spec.range_max, spec.k))
    return PatchTarget(depth=depth, bin_index=bin_index, valid=valid)


@dataclass
class FrameTargets:
    """Vectorized per-patch targets for a whole frame."""

    depth: np.ndarray  # (grid_h, grid_w) float64, 0 where invalid
    bin_index: np.ndarray  # (grid_h, grid_w) int, 1-based, 0 where invalid
    valid: np.ndarray  # (grid_h, grid_w) bool


def frame_targets(frame: EmbeddingFrame, spec: DatasetSpec) -> FrameTargets:
    """Patch targets for every patch of a frame, from its pixel depth map."""
    if frame.pixel_depth is None:
        raise DataError(f"frame {frame.frame_id}: no pixel depth to supervise from")
    gh, gw, p = spec.grid_h, spec.grid_w, PATCH_SIZE
    blocks = (
        frame.pixel_depth.astype(np.float64)
        .reshape(gh, p, gw, p)
        .transpose(0, 2, 1, 3)
        .reshape(gh, gw, p * p)
    )
    ok = np.isfinite(blocks) & (blocks >= spec.d_min) & (blocks <= spec.d_max)
    counts = ok.sum(axis=2)
    sums = np.where(ok, blocks, 0.0).sum(axis=2)
    valid = 2 * counts > p * p
    depth = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    centers = bin_centers(spec.range_min, spec.range_max, spec.k)
    bins = np.abs(depth[..., None] - centers).argmin(axis=2) + 1
    depth = np.where(valid, depth, 0.0)
    bins = np.where(valid, bins, 0)
    return FrameTargets(depth=depth, bin_index=bins, valid=valid)


def hflip_grid(grid: np.ndarray) -> np.ndarray:
    """Reverse the column axis of a (rows, cols, ...) grid. Involution."""
    return np.ascontiguousarray(grid[:, ::-1])


def tile_split(grid: np.ndarray) -> list[np.ndarray]:
    """Split a (h, w, ...) grid into w/h square tiles, left to right."""
    h, w = grid.shape[0], grid.shape[1]
    if w % h:
        raise ShapeError(f"tile_split: width {w} is not a multiple of height {h}")
    return [np.ascontiguousarray(grid[:, i * h : (i + 1) * h]) for i in range(w // h)]


def tile_merge(tiles: list[np.ndarray]) -> np.ndarray:
    """Concatenate square tiles left to right; inverse of tile_split."""
    if not tiles:
        raise ShapeError("tile_merge: no tiles")
    h = tiles[0].shape[0]
    for t in tiles:
        if t.shape[0] != h or t.shape[1] != h or t.shape[2:] != tiles[0].shape[2:]:
            raise ShapeError("tile_merge: tiles must be square and uniform")
    return np.concatenate(tiles, axis=1)


def _draw_plane(rng: np.random.Generator, dim: int) -> tuple[np.ndarray, np.ndarray]:
    u1 = rng.standard_normal(dim)
    u1 /= np.linalg.norm(u1)
    u2 = rng.standard_normal(dim)
    u2 -= (u2 @ u1) * u1
    u2 /= np.linalg.norm(u2)
    return u1, u2


def planted_plane(seed: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """The orthonormal pair a seed's synthetic dataset embeds depth into."""
    return _draw_plane(np.random.default_rng(seed), dim)


def synth_generate(
    seed: int,
    spec: DatasetSpec,
    frames: int,
    noise: float,
    path: str | Path,
) -> Path:
    """Write a synthetic PCEB dataset whose embeddings encode depth on a
    planted 2-plane.

    Per patch: depth d ~ U[range_min, range_max] and embedding
    e = normalize(cos(a) u1 + sin(a) u2 + noise * g) with
    a = (pi/2) (d - range_min) / (range_max - range_min) and g Gaussian in the
    orthogonal complement of span(u1, u2). Keeping the noise off-plane makes
    it exactly the residual to the plane: projecting back onto the plane
    recovers the depth angle noiselessly, so a plane-aware nearest-neighbor
    regressor stays a valid convergence oracle at any noise level. The CLS
    vector is the normalized mean of the frame's patches; pixel depth
    broadcasts each patch depth over its pixel block; flipped variants mirror
    the grids. Deterministic per seed.
    """
    if frames < 1:
        raise ParameterError(f"need at least one frame, got {frames}")
    if not 0.0 <= noise < 1.0:
        raise ParameterError(f"noise must be in [0, 1), got {noise}")
    spec.validate()
    rng = np.random.default_rng(seed)
    u1, u2 = _draw_plane(rng, spec.dim)
    gh, gw, d_emb = spec.grid_h, spec.grid_w, spec.dim
    span = spec.range_max - spec.range_min
    out: list[EmbeddingFrame] = []
    for idx in range(frames):
        depth = rng.uniform(spec.range_min, spec.range_max, size=(gh, gw))
        alpha = (math.pi / 2.0) * (depth - spec.range_min) / span
        emb = np.cos(alpha)[..., None] * u1 + np.sin(alpha)[..., None] * u2
        if noise > 0.0:
            g = rng.standard_normal((gh, gw, d_emb))
            g -= (g @ u1)[..., None] * u1 + (g @ u2)[..., None] * u2
            emb = emb + noise * g
        emb /= np.linalg.norm(emb, axis=2, keepdims=True)
        patches = emb.astype(np.float32)
        cls64 = patches.astype(np.float64).mean(axis=(0, 1))
        cls = (cls64 / np.linalg.norm(cls64)).astype(np.float32)
        pixel_depth = np.repeat(
            np.repeat(depth, PATCH_SIZE, axis=0), PATCH_SIZE, axis=1
        ).astype(np.float32)
        out.append(
            EmbeddingFrame(
                patches=patches,
                cls=cls,
                flipped_patches=hflip_grid(patches),
                flipped_cls=cls.copy(),
                pixel_depth=pixel_depth,
                frame_id=idx,
            )
        )
    return write_pceb(path, spec, out)


def _frame_flags(frames: list[EmbeddingFrame]) -> int:
    has_flip = frames[0].flipped_patches is not None
    has_depth = frames[0].pixel_depth is not None
    for f in frames:
        if (f.flipped_patches is not None) != has_flip or (f.pixel_depth is not None) != has_depth:
            raise DataError("all frames of one file must carry the same optional blocks")
    return (FLAG_FLIPPED if has_flip else 0) | (FLAG_PIXEL_DEPTH if has_depth else 0)


def write_pceb(path: str | Path, spec: DatasetSpec, frames: list[EmbeddingFrame]) -> Path:
    """Serialize frames to the PCEB byte layout. Bit-exact round-trip."""
    spec.validate()
    if not frames:
        raise DataError("write_pceb: no frames")
    flags = _frame_flags(frames)
    path = Path(path)
    chunks = [
        _PCEB_HEADER.pack(
            PCEB_MAGIC,
            PCEB_VERSION,
            flags,
            spec.dim,
            spec.grid_h,
            spec.grid_w,
            spec.img_h,
            spec.img_w,
            len(frames),
            spec.d_min,
            spec.d_max,
            spec.range_min,
            spec.range_max,
            spec.k,
        )
    ]
    patch_shape = (spec.grid_h, spec.grid_w, spec.dim)
    for f in frames:
        if f.patches.shape != patch_shape or f.cls.shape != (spec.dim,):
            raise ShapeError(
                f"frame {f.frame_id}: patches {f.patches.shape} / cls {f.cls.shape} "
                f"do not match spec {patch_shape}"
            )
        chunks.append(np.ascontiguousarray(f.patches, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(f.cls, dtype="<f4").tobytes())
        if flags & FLAG_FLIPPED:
            chunks.append(np.ascontiguousarray(f.flipped_patches, dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(f.flipped_cls, dtype="<f4").tobytes())
        if flags & FLAG_PIXEL_DEPTH:
            if f.pixel_depth.shape != (spec.img_h, spec.img_w):
                raise ShapeError(f"frame {f.frame_id}: pixel depth {f.pixel_depth.shape}")
            chunks.append(np.ascontiguousarray(f.pixel_depth, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def _take(buf: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    end = offset + count
    if end > len(buf):
        raise TruncationError(f"file ends inside {what}", offset=len(buf))
    return buf[offset:end], end


def read_pceb(path: str | Path) -> tuple[DatasetSpec, list[EmbeddingFrame]]:
    """Parse a PCEB file, validating layout and embedding finiteness."""
    buf = Path(path).read_bytes()
    raw, offset = _take(buf, 0, _PCEB_HEADER.size, "header")
    (
        magic,
        version,
        flags,
        dim,
        grid_h,
        grid_w,
        img_h,
        img_w,
        n_frames,
        d_min,
        d_max,
        range_min,
        range_max,
        k,
    ) = _PCEB_HEADER.unpack(raw)
    if magic != PCEB_MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {PCEB_MAGIC!r}", offset=0)
    if version != PCEB_VERSION:
        raise VersionError(f"unsupported version {version}", offset=4)
    spec = DatasetSpec(
        dim=dim,
        grid_h=grid_h,
        grid_w=grid_w,
        img_h=img_h,
        img_w=img_w,
        d_min=d_min,
        d_max=d_max,
        range_min=range_min,
        range_max=range_max,
        k=k,
    )
    spec.validate()
    has_flip = bool(flags & FLAG_FLIPPED)
    has_depth = bool(flags & FLAG_PIXEL_DEPTH)
    n_patch_vals = grid_h * grid_w * dim
    frames: list[EmbeddingFrame] = []
    for idx in range(n_frames):
        raw, offset = _take(buf, offset, 4 * n_patch_vals, f"frame {idx} patches")
        patches = np.frombuffer(raw, dtype="<f4").reshape(grid_h, grid_w, dim)
        raw, offset = _take(buf, offset, 4 * dim, f"frame {idx} cls")
        cls = np.frombuffer(raw, dtype="<f4").copy()
        flipped_patches = flipped_cls = pixel_depth = None
        if has_flip:
            raw, offset = _take(buf, offset, 4 * n_patch_vals, f"frame {idx} flipped patches")
            flipped_patches = np.frombuffer(raw, dtype="<f4").reshape(grid_h, grid_w, dim)
            raw, offset = _take(buf, offset, 4 * dim, f"frame {idx} flipped cls")
            flipped_cls = np.frombuffer(raw, dtype="<f4").copy()
        if has_depth:
            raw, offset = _take(buf, offset, 4 * img_h * img_w, f"frame {idx} pixel depth")
            pixel_depth = np.frombuffer(raw, dtype="<f4").reshape(img_h, img_w)
        for name, arr in (("patches", patches), ("cls", cls),
                          ("flipped patches", flipped_patches), ("flipped cls", flipped_cls)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise FormatError(f"frame {idx}: non-finite {name}", offset=offset)
        if pixel_depth is not None:
            bad = ~(np.isnan(pixel_depth) | (pixel_depth >= 0.0))
            if np.any(bad):
                raise FormatError(f"frame {idx}: negative pixel depth", offset=offset)
        frames.append(
            EmbeddingFrame(
                patches=patches.copy(),
                cls=cls,
                flipped_patches=None if flipped_patches is None else flipped_patches.copy(),
                flipped_cls=flipped_cls,
                pixel_depth=None if pixel_depth is None else pixel_depth.copy(),
                frame_id=idx,
            )
        )
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after last frame", offset=offset)
    return spec, frames


def write_pctb(path: str | Path, vectors: np.ndarray, centers: np.ndarray) -> Path:
    """Serialize a depth-table initialization (K unit vectors + K centers)."""
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    centers = np.ascontiguousarray(centers, dtype="<f4")
    if vectors.ndim != 2 or centers.shape != (vectors.shape[0],):
        raise ShapeError(
            f"write_pctb: vectors {vectors.shape} vs centers {centers.shape}"
        )
    k, dim = vectors.shape
    path = Path(path)
    path.write_bytes(
        _PCTB_HEADER.pack(PCTB_MAGIC, PCTB_VERSION, k, dim)
        + vectors.tobytes()
        + centers.tobytes()
    )
    return path


def read_pctb(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a PCTB table-init file into (vectors (K, D), centers (K,))."""
    buf = Path(path).read_bytes()
    raw, offset = _take(buf, 0, _PCTB_HEADER.size, "header")
    magic, version, k, dim = _PCTB_HEADER.unpack(raw)
    if magic != PCTB_MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {PCTB_MAGIC!r}", offset=0)
    if version != PCTB_VERSION:
        raise VersionError(f"unsupported version {version}", offset=4)
    raw, offset = _take(buf, offset, 4 * k * dim, "table vectors")
    vectors = np.frombuffer(raw, dtype="<f4").reshape(k, dim).copy()
    raw, offset = _take(buf, offset, 4 * k, "bin centers")
    centers = np.frombuffer(raw, dtype="<f4").copy()
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset=offset)
    return vectors, centers
