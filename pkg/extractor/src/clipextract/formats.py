"""Writers for the PCEB/PCTB interchange formats consumed by the depth head.

These byte layouts are the contract between the extractor and the training
side; both are little-endian with float32 payloads.

PCEB: magic "PCEB" | u32 version=1 | u32 flags (bit0 flipped, bit1 pixel
depth) | u32 D | u32 grid_h | u32 grid_w | u32 img_h | u32 img_w |
u32 frame_count | f32 d_min | f32 d_max | f32 range_min | f32 range_max |
u32 K; per frame: patches (grid_h*grid_w*D), cls (D), [flipped pair],
[pixel depth img_h*img_w, NaN = missing].

PCTB: magic "PCTB" | u32 version=1 | u32 K | u32 D | K*D vectors | K centers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PCEB_MAGIC = b"PCEB"
PCTB_MAGIC = b"PCTB"
VERSION = 1
FLAG_FLIPPED = 1
FLAG_PIXEL_DEPTH = 2

_PCEB_HEADER = struct.Struct("<4sIIIIIIIIffffI")
_PCTB_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Frame data inconsistent with the declared header geometry."""


@dataclass
class FrameRecord:
    patches: np.ndarray  # (grid_h, grid_w, D) float32
    cls: np.ndarray  # (D,) float32
    flipped_patches: np.ndarray | None = None
    flipped_cls: np.ndarray | None = None
    pixel_depth: np.ndarray | None = None  # (img_h, img_w) float32, NaN missing


@dataclass
class DatasetHeader:
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


def write_pceb(path: str | Path, header: DatasetHeader, frames: list[FrameRecord]) -> Path:
    if not frames:
        raise FormatError("no frames to write")
    has_flip = frames[0].flipped_patches is not None
    has_depth = frames[0].pixel_depth is not None
    flags = (FLAG_FLIPPED if has_flip else 0) | (FLAG_PIXEL_DEPTH if has_depth else 0)
    chunks = [
        _PCEB_HEADER.pack(
            PCEB_MAGIC, VERSION, flags,
            header.dim, header.grid_h, header.grid_w, header.img_h, header.img_w,
            len(frames), header.d_min, header.d_max,
            header.range_min, header.range_max, header.k,
        )
    ]
    shape = (header.grid_h, header.grid_w, header.dim)
    for i, f in enumerate(frames):
        if f.patches.shape != shape or f.cls.shape != (header.dim,):
            raise FormatError(f"frame {i}: patches {f.patches.shape}, cls {f.cls.shape}")
        if (f.flipped_patches is not None) != has_flip or (f.pixel_depth is not None) != has_depth:
            raise FormatError(f"frame {i}: optional blocks differ from frame 0")
        chunks.append(np.ascontiguousarray(f.patches, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(f.cls, dtype="<f4").tobytes())
        if has_flip:
            chunks.append(np.ascontiguousarray(f.flipped_patches, dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(f.flipped_cls, dtype="<f4").tobytes())
        if has_depth:
            if f.pixel_depth.shape != (header.img_h, header.img_w):
                raise FormatError(f"frame {i}: pixel depth {f.pixel_depth.shape}")
            chunks.append(np.ascontiguousarray(f.pixel_depth, dtype="<f4").tobytes())
    path = Path(path)
    path.write_bytes(b"".join(chunks))
    return path


def write_pctb(path: str | Path, vectors: np.ndarray, centers: np.ndarray) -> Path:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    centers = np.ascontiguousarray(centers, dtype="<f4")
    if vectors.ndim != 2 or centers.shape != (vectors.shape[0],):
        raise FormatError(f"vectors {vectors.shape} vs centers {centers.shape}")
    k, dim = vectors.shape
    path = Path(path)
    path.write_bytes(
        _PCTB_HEADER.pack(PCTB_MAGIC, VERSION, k, dim)
        + vectors.tobytes()
        + centers.tobytes()
    )
    return path
