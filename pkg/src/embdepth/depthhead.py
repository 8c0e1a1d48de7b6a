"""The model proper: a learnable depth table of unit vectors anchored to
metric bin centers, two MLPs that rotate patch embeddings toward the depth
subspace and fuse in global context, cosine scoring against the table, and
expected-depth prediction."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .tensorcore import (
    Param,
    ParameterError,
    ShapeError,
    affine,
    dropout,
    gelu,
    l2_normalize,
    layer_norm,
    softmax_rows,
)

DEFAULT_DROPOUT = 0.1


@dataclass
class DepthTable:
    """K learnable unit vectors, each anchored to a fixed metric bin center."""

    weights: Param  # (K, D), rows kept unit-norm by projection after updates
    centers: np.ndarray  # (K,) float32, strictly increasing meters
    tau: float

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if np.any(np.diff(self.centers.astype(np.float64)) <= 0):
            raise ParameterError("bin centers must be strictly increasing")

    @property
    def k(self) -> int:
        return self.weights.value.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.value.shape[1]

    def renormalize(self) -> None:
        """Project rows back onto the unit sphere (applied after each update)."""
        w = self.weights.value
        w /= np.linalg.norm(w, axis=1, keepdims=True)


@dataclass
class Mlp:
    """LayerNorm -> affine -> GELU -> dropout -> affine."""

    gain: Param
    shift: Param
    w1: Param
    b1: Param
    w2: Param
    b2: Param
    rate: float = DEFAULT_DROPOUT

    @property
    def in_dim(self) -> int:
        return self.w1.value.shape[0]

    def params(self) -> list[Param]:
        return [self.gain, self.shift, self.w1, self.b1, self.w2, self.b2]


@dataclass
class RotationHead:
    """phi rotates patch embeddings (D -> D); psi fuses with the CLS vector
    (2D -> D, or D -> D when use_cls is off)."""

    phi: Mlp
    psi: Mlp
    use_cls: bool = True
    trainable: bool = True

    @property
    def dim(self) -> int:
        return self.phi.in_dim

    def params(self) -> list[Param]:
        return self.phi.params() + self.psi.params()

    def named_params(self) -> list[tuple[str, Param]]:
        names = ("gain", "shift", "w1", "b1", "w2", "b2")
        out = []
        for mlp_name, mlp in (("phi", self.phi), ("psi", self.psi)):
            out.extend((f"{mlp_name}.{n}", p) for n, p in zip(names, mlp.params()))
        return out


def init_mlp(
    in_dim: int,
    hidden: int,
    out_dim: int,
    rng: np.random.Generator,
    rate: float = DEFAULT_DROPOUT,
    dtype=np.float32,
) -> Mlp:
    """Gaussian fan-in init for the linear maps, identity init for the norm."""
    def linear(n_in, n_out):
        return (rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(dtype)

    return Mlp(
        gain=Param(np.ones(in_dim, dtype=dtype), name="gain"),
        shift=Param(np.zeros(in_dim, dtype=dtype), name="shift"),
        w1=Param(linear(in_dim, hidden), name="w1"),
        b1=Param(np.zeros(hidden, dtype=dtype), name="b1"),
        w2=Param(linear(hidden, out_dim), name="w2"),
        b2=Param(np.zeros(out_dim, dtype=dtype), name="b2"),
        rate=rate,
    )


def init_rotation_head(
    dim: int,
    rng: np.random.Generator,
    hidden: int | None = None,
    use_cls: bool = True,
    rate: float = DEFAULT_DROPOUT,
    dtype=np.float32,
) -> RotationHead:
    hidden = dim if hidden is None else hidden
    psi_in = 2 * dim if use_cls else dim
    return RotationHead(
        phi=init_mlp(dim, hidden, dim, rng, rate=rate, dtype=dtype),
        psi=init_mlp(psi_in, hidden, dim, rng, rate=rate, dtype=dtype),
        use_cls=use_cls,
    )


def init_depth_table(
    source: str | Path,
    spec: dataio.DatasetSpec,
    tau: float,
    dtype=np.float32,
) -> DepthTable:
    """Build the depth table from a PCTB file or a seeded Gaussian fallback.

    ``source`` is either a path or the literal ``random:<seed>``. Rows are
    unit-normalized either way; fallback centers come from the bin geometry.
    """
    src = str(source)
    if src.startswith("random:"):
        try:
            seed = int(src.split(":", 1)[1])
        except ValueError:
            raise ParameterError(f"bad table source {src!r}; want random:<seed>") from None
        rng = np.random.default_rng(seed)
        vectors = rng.standard_normal((spec.k, spec.dim))
        centers = dataio.bin_centers(spec.range_min, spec.range_max, spec.k).astype(dtype)
    else:
        vectors, centers = dataio.read_pctb(src)
        if vectors.shape != (spec.k, spec.dim):
            raise ParameterError(
                f"table file carries {vectors.shape}, dataset wants ({spec.k}, {spec.dim})"
            )
        centers = centers.astype(dtype)
    vectors = vectors.astype(dtype)
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return DepthTable(weights=Param(vectors, name="table.w"), centers=centers, tau=tau)


@dataclass
class DepthModel:
    head: RotationHead
    table: DepthTable

    def named_params(self) -> list[tuple[str, Param]]:
        return self.head.named_params() + [("table.w", self.table.weights)]


@dataclass
class DepthGrid:
    """Per-patch metric depth with a validity flag per cell."""

    depth: np.ndarray  # (grid_h, grid_w) float64 meters
    valid: np.ndarray  # (grid_h, grid_w) bool


def mlp_forward(x: np.ndarray, mlp: Mlp, mode: str, rng: np.random.Generator | None):
    h, back_norm = layer_norm(x, mlp.gain, mlp.shift)
    h, back_a1 = affine(h, mlp.w1, mlp.b1)
    h, back_act = gelu(h)
    h, back_drop = dropout(h, mlp.rate, mode, rng)
    y, back_a2 = affine(h, mlp.w2, mlp.b2)

    def backward(dy: np.ndarray) -> np.ndarray:
        return back_norm(back_a1(back_act(back_drop(back_a2(dy)))))

    return y, backward


def fuse_patches(
    z: np.ndarray,
    cls_rows: np.ndarray,
    head: RotationHead,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
):
    """Rotate patch rows, fuse each with its frame's CLS row, unit-normalize.

    ``z`` and ``cls_rows`` are (N, D); returns (z_tilde, backward) where
    backward pushes d(loss)/d(z_tilde) into the head's params.
    """
    if z.ndim != 2 or z.shape[1] != head.dim:
        raise ShapeError(f"fuse_patches: z {z.shape} vs head dim {head.dim}")
    zp, back_phi = mlp_forward(z, head.phi, mode, rng)
    if head.use_cls:
        if cls_rows.shape != z.shape:
            raise ShapeError(f"fuse_patches: cls rows {cls_rows.shape} vs z {z.shape}")
        u = np.concatenate([zp, cls_rows], axis=1)
    else:
        u = zp
    v, back_psi = mlp_forward(u, head.psi, mode, rng)
    z_tilde, back_unit = l2_normalize(v)
    width = zp.shape[1]

    def backward(d_tilde: np.ndarray) -> np.ndarray:
        du = back_psi(back_unit(d_tilde))
        return back_phi(du[:, :width] if head.use_cls else du)

    return z_tilde, backward


def rotate_fuse(
    frame: dataio.EmbeddingFrame,
    head: RotationHead,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    flipped: bool = False,
) -> np.ndarray:
    """Fused unit representation for every patch of a frame, row-major."""
    patches = frame.flipped_patches if flipped else frame.patches
    cls = frame.flipped_cls if flipped else frame.cls
    z = patches.reshape(-1, patches.shape[2])
    cls_rows = np.broadcast_to(cls, z.shape)
    z_tilde, _ = fuse_patches(z, cls_rows, head, mode, rng)
    return z_tilde


def scores_probs(z_tilde: np.ndarray, table: DepthTable):
    """Temperature-scaled cosine scores against the table and their softmax."""
    if table.tau <= 0.0:
        raise ParameterError(f"temperature must be positive, got {table.tau}")
    if z_tilde.shape[1] != table.dim:
        raise ShapeError(f"scores_probs: z {z_tilde.shape} vs table dim {table.dim}")
    s = (z_tilde @ table.weights.value.T) / table.tau
    p, _ = softmax_rows(s)
    return s, p


def scores_probs_grad(z_tilde: np.ndarray, table: DepthTable):
    """scores_probs plus a backward that maps d(loss)/dp to d(loss)/dz_tilde,
    accumulating the table-weight gradient."""
    if table.tau <= 0.0:
        raise ParameterError(f"temperature must be positive, got {table.tau}")
    s = (z_tilde @ table.weights.value.T) / table.tau
    p, back_soft = softmax_rows(s)

    def backward(dp: np.ndarray) -> np.ndarray:
        ds = back_soft(dp)
        table.weights.grad += (ds.T @ z_tilde) / table.tau
        return (ds @ table.weights.value) / table.tau

    return s, p, backward


def expected_depth(p: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Probability-weighted average of bin centers, clipped into [c_1, c_K].

    Computed at float64 or better (extended-precision inputs stay extended)."""
    dtype = np.result_type(p.dtype, np.float64)
    c = np.asarray(centers, dtype=dtype)
    d = p.astype(dtype) @ c
    return np.clip(d, c[0], c[-1])


def predict_frame(
    frame: dataio.EmbeddingFrame,
    head: RotationHead,
    table: DepthTable,
    tta: bool = False,
    strict: bool = False,
) -> DepthGrid:
    """Eval-mode depth grid for one frame, optionally flip-averaged."""
    gh, gw = frame.patches.shape[0], frame.patches.shape[1]

    def single(flipped: bool) -> np.ndarray:
        z_tilde = rotate_fuse(frame, head, mode="eval", flipped=flipped)
        _, p = scores_probs(z_tilde, table)
        return expected_depth(p, table.centers).reshape(gh, gw)

    depth = single(flipped=False)
    if tta:
        if frame.flipped_patches is None:
            if strict:
                raise dataio.DataError(
                    f"frame {frame.frame_id}: TTA requested but no flipped embeddings"
                )
        else:
            depth = 0.5 * (depth + dataio.hflip_grid(single(flipped=True)))
    return DepthGrid(depth=depth, valid=np.ones((gh, gw), dtype=bool))
