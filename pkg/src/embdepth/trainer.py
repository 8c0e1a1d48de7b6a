"""Two-phase alternating training: an Embedding phase that moves the MLPs and
the depth table under the embedding-space loss, and a Depth phase that moves
only the MLPs under patch-level RMSE while the table stays frozen. Learning
rates decay linearly once validation stalls; every improved validation metric
checkpoints the model."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dataio, losses
from .dataio import DatasetSpec, EmbeddingFrame, frame_targets, tile_split
from .depthhead import (
    DepthModel,
    DepthTable,
    Mlp,
    RotationHead,
    fuse_patches,
    init_depth_table,
    init_rotation_head,
    predict_frame,
    scores_probs_grad,
    expected_depth,
)
from .evalkit import MetricAccumulator, MetricReport, crop_mask, upsample_to_pixels
from .tensorcore import AdamWState, Param, ParameterError, adamw_step

PHASE_EMBEDDING = "embedding"
PHASE_DEPTH = "depth"

METRIC_NAMES = ("abs_rel", "rmse", "log10", "d1", "d2", "d3")
HIGHER_BETTER = frozenset({"d1", "d2", "d3"})

CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1
LOSS_SETS = ("infonce", "infonce+align", "all")


class ConfigError(ValueError):
    """A run configuration is inconsistent or incomplete."""


class TrainingError(RuntimeError):
    """Training hit a state it cannot recover from (e.g. non-finite loss)."""


@dataclass
class TrainConfig:
    alternation_period: int = 100
    batch_size: int = 8
    emb_lr: float = 3e-4
    emb_wd: float = 1e-2
    depth_lr: float = 1e-3
    depth_wd: float = 0.0
    tau: float = 0.07
    lambda_infonce: float = 1.0
    patience: int = 50
    decay_start: int = 20
    decay_floor: float = 0.1
    seed: int = 0
    freeze_mlps: bool = False
    use_cls: bool = True
    loss_set: str = "all"
    hidden: int = 0  # 0 means the embedding width
    dropout: float = 0.1
    table_init: str = "random:0"
    tta: bool = True
    crop: str = "none"
    max_steps: int = 0  # 0 means no step cap
    max_epochs: int = 0  # 0 means no epoch cap

    def validate(self) -> None:
        if self.alternation_period < 1:
            raise ConfigError(f"alternation_period must be >= 1, got {self.alternation_period}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.decay_start < self.patience:
            raise ConfigError(
                f"need 0 < decay_start < patience, got {self.decay_start} / {self.patience}"
            )
        if min(self.emb_lr, self.depth_lr) < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.loss_set not in LOSS_SETS:
            raise ConfigError(f"loss_set must be one of {LOSS_SETS}, got {self.loss_set!r}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclass
class BestRecord:
    value: float
    epoch: int
    path: str = ""


@dataclass
class TrainState:
    rng: np.random.Generator
    global_step: int = 0
    epoch: int = 0
    stall_counter: int = 0
    bests: dict = field(default_factory=dict)  # metric name -> BestRecord
    emb_opt: dict = field(default_factory=dict)  # param name -> AdamWState
    depth_opt: dict = field(default_factory=dict)


def phase_for_step(step: int, period: int) -> str:
    """Embedding for the first ``period`` steps, then Depth, alternating."""
    if period < 1:
        raise ParameterError(f"period must be >= 1, got {period}")
    return PHASE_EMBEDDING if (step // period) % 2 == 0 else PHASE_DEPTH


def lr_schedule(
    stall_counter: int,
    lr0: float,
    decay_start: int = 20,
    patience: int = 50,
    floor: float = 0.1,
) -> float:
    """Constant until the stall counter passes ``decay_start``, then linear
    down to ``floor * lr0`` at ``patience``, flat afterwards."""
    if stall_counter < 0:
        raise ParameterError(f"stall counter must be >= 0, got {stall_counter}")
    if stall_counter <= decay_start:
        return lr0
    if stall_counter >= patience:
        return floor * lr0
    frac = (stall_counter - decay_start) / (patience - decay_start)
    return lr0 * (1.0 - (1.0 - floor) * frac)


@dataclass
class TrainUnit:
    """One training sample: a square patch grid with its targets. Wide frames
    are split into square tiles that share the frame's CLS vector."""

    z: np.ndarray  # (N, D) float32
    cls: np.ndarray  # (D,) float32
    y0: np.ndarray  # (N,) zero-based bin indices, 0 where invalid
    m: np.ndarray  # (N,) float32 validity mask
    target: np.ndarray  # (N,) float32 patch depth, 0 where invalid


def build_units(frames: list[EmbeddingFrame], spec: DatasetSpec) -> list[TrainUnit]:
    units: list[TrainUnit] = []
    for frame in frames:
        targets = frame_targets(frame, spec)
        if spec.grid_w > spec.grid_h and spec.grid_w % spec.grid_h == 0:
            patch_tiles = tile_split(frame.patches)
            depth_tiles = tile_split(targets.depth)
            bin_tiles = tile_split(targets.bin_index)
            valid_tiles = tile_split(targets.valid)
        else:
            patch_tiles = [frame.patches]
            depth_tiles = [targets.depth]
            bin_tiles = [targets.bin_index]
            valid_tiles = [targets.valid]
        for pt, dt, bt, vt in zip(patch_tiles, depth_tiles, bin_tiles, valid_tiles):
            units.append(
                TrainUnit(
                    z=pt.reshape(-1, spec.dim),
                    cls=frame.cls,
                    y0=np.maximum(bt.reshape(-1) - 1, 0).astype(np.intp),
                    m=vt.reshape(-1).astype(np.float32),
                    target=dt.reshape(-1).astype(np.float32),
                )
            )
    return units


@dataclass
class Batch:
    z: np.ndarray
    cls_rows: np.ndarray
    y0: np.ndarray
    m: np.ndarray
    target: np.ndarray


def make_batch(units: list[TrainUnit]) -> Batch:
    n_per = [u.z.shape[0] for u in units]
    return Batch(
        z=np.concatenate([u.z for u in units], axis=0),
        cls_rows=np.concatenate(
            [np.broadcast_to(u.cls, (n, u.cls.shape[0])) for u, n in zip(units, n_per)],
            axis=0,
        ),
        y0=np.concatenate([u.y0 for u in units]),
        m=np.concatenate([u.m for u in units]),
        target=np.concatenate([u.target for u in units]),
    )


def build_model(spec: DatasetSpec, config: TrainConfig, rng: np.random.Generator) -> DepthModel:
    head = init_rotation_head(
        spec.dim,
        rng,
        hidden=config.hidden or None,
        use_cls=config.use_cls,
        rate=config.dropout,
    )
    head.trainable = not config.freeze_mlps
    table = init_depth_table(config.table_init, spec, tau=config.tau)
    return DepthModel(head=head, table=table)


def init_train_state(model: DepthModel, config: TrainConfig, rng: np.random.Generator) -> TrainState:
    state = TrainState(rng=rng)
    for name, param in model.named_params():
        state.emb_opt[name] = AdamWState.for_param(param, config.emb_lr, config.emb_wd)
        if name != "table.w":
            state.depth_opt[name] = AdamWState.for_param(param, config.depth_lr, config.depth_wd)
    return state


@dataclass
class StepResult:
    loss: float
    phase: str
    stepped: bool


def _update_params(names_params, opt_states, lr) -> None:
    for name, param in names_params:
        st = opt_states[name]
        st.lr = lr
        adamw_step(param, st)


def train_step(batch: Batch, model: DepthModel, state: TrainState, config: TrainConfig) -> StepResult:
    """One optimizer step. All-masked batches are skipped (no step counted)."""
    if config.loss_set == "all":
        phase = phase_for_step(state.global_step, config.alternation_period)
    else:
        phase = PHASE_EMBEDDING  # single-phase ablations never enter Depth
    head, table = model.head, model.table
    mlp_params = model.head.named_params() if head.trainable else []

    if phase == PHASE_EMBEDDING:
        z_tilde, back = fuse_patches(batch.z, batch.cls_rows, head, "train", state.rng)
        if config.loss_set == "infonce":
            bundle = losses.info_nce(z_tilde, table, batch.y0, batch.m)
        else:
            bundle = losses.emb_loss(z_tilde, table, batch.y0, batch.m, config.lambda_infonce)
        if bundle.n_valid == 0:
            return StepResult(0.0, phase, stepped=False)
        if not np.isfinite(bundle.value):
            raise TrainingError(
                f"non-finite embedding loss {bundle.value} at step {state.global_step}"
            )
        table.weights.grad += bundle.grad_table
        if mlp_params:
            back(bundle.grad_ztilde)
        lr = lr_schedule(
            state.stall_counter, config.emb_lr, config.decay_start,
            config.patience, config.decay_floor,
        )
        _update_params(mlp_params + [("table.w", table.weights)], state.emb_opt, lr)
        table.renormalize()
    else:
        z_tilde, back = fuse_patches(batch.z, batch.cls_rows, head, "train", state.rng)
        _, p, back_scores = scores_probs_grad(z_tilde, table)
        d_hat = expected_depth(p, table.centers)
        bundle = losses.rmse_loss(d_hat.astype(np.float32), batch.target, batch.m)
        if bundle.n_valid == 0:
            return StepResult(0.0, phase, stepped=False)
        if not np.isfinite(bundle.value):
            raise TrainingError(
                f"non-finite depth loss {bundle.value} at step {state.global_step}"
            )
        if mlp_params:
            centers = np.asarray(table.centers, dtype=np.float64)
            dp = (bundle.grad_pred.astype(np.float64)[:, None] * centers).astype(p.dtype)
            back(back_scores(dp))
            lr = lr_schedule(
                state.stall_counter, config.depth_lr, config.decay_start,
                config.patience, config.decay_floor,
            )
            _update_params(mlp_params, state.depth_opt, lr)

    for _, param in model.named_params():
        param.reset_grad()
    state.global_step += 1
    return StepResult(float(bundle.value), phase, stepped=True)


def improved_metrics(bests: dict, report: MetricReport) -> list[str]:
    """Metrics strictly better than their recorded bests (all, when empty)."""
    out = []
    for name in METRIC_NAMES:
        value = getattr(report, name)
        best = bests.get(name)
        if best is None:
            out.append(name)
        elif name in HIGHER_BETTER and value > best.value:
            out.append(name)
        elif name not in HIGHER_BETTER and value < best.value:
            out.append(name)
    return out


def evaluate_frames(
    frames: list[EmbeddingFrame],
    model: DepthModel,
    spec: DatasetSpec,
    crop: str = "none",
    tta: bool = True,
) -> MetricReport:
    """Pixel-level metric report over a frame list (pixel-weighted)."""
    acc = MetricAccumulator(d_min=spec.d_min, d_max=spec.d_max)
    cmask = crop_mask(crop, spec.img_h, spec.img_w).ravel()
    for frame in frames:
        if frame.pixel_depth is None:
            raise dataio.DataError(f"frame {frame.frame_id}: no ground-truth depth")
        grid = predict_frame(frame, model.head, model.table, tta=tta)
        px = upsample_to_pixels(grid.depth, spec.img_h, spec.img_w)
        acc.add(px, frame.pixel_depth, mask=cmask, frame_id=frame.frame_id)
    return acc.report()


def validate_epoch(
    val_frames: list[EmbeddingFrame],
    model: DepthModel,
    state: TrainState,
    config: TrainConfig,
    spec: DatasetSpec,
    out_dir: str | Path | None = None,
) -> tuple[MetricReport, bool, bool]:
    """Validation pass: returns (report, improved_any, should_stop). Improved
    metrics record a checkpoint; the stall counter drives early stopping."""
    if not val_frames:
        raise ConfigError("validation set is empty")
    report = evaluate_frames(val_frames, model, spec, crop=config.crop, tta=config.tta)
    improved = improved_metrics(state.bests, report)
    if improved:
        path = ""
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            path = str(out_dir / f"ckpt_epoch{state.epoch:05d}.pckp")
            save_checkpoint(path, model, state, config)
        for name in improved:
            state.bests[name] = BestRecord(getattr(report, name), state.epoch, path)
        state.stall_counter = 0
    else:
        state.stall_counter += 1
    return report, bool(improved), state.stall_counter >= config.patience


def canonical_config(config: TrainConfig) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(config)]
    return "\n".join(sorted(lines)) + "\n"


def config_hash(config: TrainConfig) -> bytes:
    return hashlib.sha256(canonical_config(config).encode("utf-8")).digest()


@dataclass
class Checkpoint:
    version: int
    config_hash: bytes
    tensors: dict  # name -> float32 ndarray
    scalars: dict  # name -> float


def _checkpoint_tensors(model: DepthModel, state: TrainState | None) -> dict:
    tensors = {name: p.value for name, p in model.named_params()}
    tensors["table.centers"] = model.table.centers
    if state is not None:
        for prefix, opt in (("opt.emb", state.emb_opt), ("opt.depth", state.depth_opt)):
            for name, st in opt.items():
                tensors[f"{prefix}.{name}.m"] = st.m
                tensors[f"{prefix}.{name}.v"] = st.v
    return tensors


def _checkpoint_scalars(model: DepthModel, state: TrainState | None) -> dict:
    scalars = {"table.tau": model.table.tau}
    if state is not None:
        scalars["global_step"] = float(state.global_step)
        scalars["epoch"] = float(state.epoch)
        scalars["stall_counter"] = float(state.stall_counter)
        for prefix, opt in (("opt.emb", state.emb_opt), ("opt.depth", state.depth_opt)):
            for name, st in opt.items():
                scalars[f"{prefix}.{name}.t"] = float(st.t)
        for name in METRIC_NAMES:
            best = state.bests.get(name)
            if best is not None:
                scalars[f"best.{name}"] = best.value
                scalars[f"best.{name}.epoch"] = float(best.epoch)
    return scalars


def checkpoint_bytes(model: DepthModel, state: TrainState | None, config: TrainConfig) -> bytes:
    tensors = _checkpoint_tensors(model, state)
    scalars = _checkpoint_scalars(model, state)
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), config_hash(config)]
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    chunks.append(struct.pack("<I", len(scalars)))
    for name in sorted(scalars):
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<d", scalars[name]))
    return b"".join(chunks)


def save_checkpoint(
    path: str | Path, model: DepthModel, state: TrainState | None, config: TrainConfig
) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, state, config))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()

    def take(offset, count, what):
        end = offset + count
        if end > len(buf):
            raise dataio.TruncationError(f"checkpoint ends inside {what}", offset=len(buf))
        return buf[offset:end], end

    raw, offset = take(0, 4, "magic")
    if raw != CKPT_MAGIC:
        raise dataio.MagicError(f"bad magic {raw!r}, expected {CKPT_MAGIC!r}", offset=0)
    raw, offset = take(offset, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != CKPT_VERSION:
        raise dataio.VersionError(f"unsupported checkpoint version {version}", offset=4)
    hash_bytes, offset = take(offset, 32, "config hash")
    raw, offset = take(offset, 4, "tensor count")
    n_tensors = struct.unpack("<I", raw)[0]
    tensors = {}
    for _ in range(n_tensors):
        raw, offset = take(offset, 4, "tensor name length")
        name_len = struct.unpack("<I", raw)[0]
        raw, offset = take(offset, name_len, "tensor name")
        name = raw.decode("utf-8")
        raw, offset = take(offset, 4, "tensor rank")
        ndim = struct.unpack("<I", raw)[0]
        raw, offset = take(offset, 4 * ndim, "tensor dims")
        shape = struct.unpack(f"<{ndim}I", raw)
        count = int(np.prod(shape)) if ndim else 1
        raw, offset = take(offset, 4 * count, f"tensor {name} data")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    raw, offset = take(offset, 4, "scalar count")
    n_scalars = struct.unpack("<I", raw)[0]
    scalars = {}
    for _ in range(n_scalars):
        raw, offset = take(offset, 4, "scalar name length")
        name_len = struct.unpack("<I", raw)[0]
        raw, offset = take(offset, name_len, "scalar name")
        name = raw.decode("utf-8")
        raw, offset = take(offset, 8, "scalar value")
        scalars[name] = struct.unpack("<d", raw)[0]
    if offset != len(buf):
        raise dataio.FormatError(f"{len(buf) - offset} trailing bytes", offset=offset)
    return Checkpoint(version=version, config_hash=hash_bytes, tensors=tensors, scalars=scalars)


def apply_checkpoint(ckpt: Checkpoint, model: DepthModel, state: TrainState | None = None) -> None:
    """Copy checkpoint values into an existing model (and optimizer state)."""
    for name, param in model.named_params():
        if name not in ckpt.tensors:
            raise dataio.FormatError(f"checkpoint misses tensor {name!r}")
        value = ckpt.tensors[name]
        if value.shape != param.value.shape:
            raise dataio.FormatError(
                f"checkpoint tensor {name!r} has shape {value.shape}, "
                f"model wants {param.value.shape}"
            )
        param.value[...] = value
        param.reset_grad()
    centers = ckpt.tensors.get("table.centers")
    if centers is None or centers.shape != model.table.centers.shape:
        raise dataio.FormatError("checkpoint bin centers missing or mismatched")
    model.table.centers = centers
    if state is not None:
        state.global_step = int(ckpt.scalars.get("global_step", 0))
        state.epoch = int(ckpt.scalars.get("epoch", 0))
        state.stall_counter = int(ckpt.scalars.get("stall_counter", 0))
        for prefix, opt in (("opt.emb", state.emb_opt), ("opt.depth", state.depth_opt)):
            for name, st in opt.items():
                m = ckpt.tensors.get(f"{prefix}.{name}.m")
                v = ckpt.tensors.get(f"{prefix}.{name}.v")
                if m is None or v is None or m.shape != st.m.shape:
                    raise dataio.FormatError(f"checkpoint misses optimizer state for {name!r}")
                st.m = m.copy()
                st.v = v.copy()
                st.t = int(ckpt.scalars.get(f"{prefix}.{name}.t", 0))
        for name in METRIC_NAMES:
            if f"best.{name}" in ckpt.scalars:
                state.bests[name] = BestRecord(
                    ckpt.scalars[f"best.{name}"],
                    int(ckpt.scalars.get(f"best.{name}.epoch", -1)),
                )


def model_from_checkpoint(ckpt: Checkpoint, dropout: float = 0.1) -> DepthModel:
    """Reconstruct an eval-ready model from checkpoint tensors alone."""
    def param(name):
        if name not in ckpt.tensors:
            raise dataio.FormatError(f"checkpoint misses tensor {name!r}")
        return Param(ckpt.tensors[name], name=name)

    def mlp(prefix):
        return Mlp(
            gain=param(f"{prefix}.gain"),
            shift=param(f"{prefix}.shift"),
            w1=param(f"{prefix}.w1"),
            b1=param(f"{prefix}.b1"),
            w2=param(f"{prefix}.w2"),
            b2=param(f"{prefix}.b2"),
            rate=dropout,
        )

    phi = mlp("phi")
    psi = mlp("psi")
    dim = phi.w1.value.shape[0]
    head = RotationHead(phi=phi, psi=psi, use_cls=psi.w1.value.shape[0] == 2 * dim)
    tau = float(ckpt.scalars.get("table.tau", 0.07))
    table = DepthTable(
        weights=param("table.w"), centers=ckpt.tensors["table.centers"], tau=tau
    )
    return DepthModel(head=head, table=table)


@dataclass
class FitResult:
    model: DepthModel
    state: TrainState
    final_path: Path | None
    history: list  # (epoch, MetricReport) pairs


def fit(
    spec: DatasetSpec,
    train_frames: list[EmbeddingFrame],
    val_frames: list[EmbeddingFrame],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    log=None,
) -> FitResult:
    """Full training loop: epochs over the training split with per-epoch
    validation, early stopping on the stall counter, optional step/epoch caps,
    and a final checkpoint."""
    config.validate()
    if not train_frames:
        raise ConfigError("training set is empty")
    if not val_frames:
        raise ConfigError("validation set is empty")
    units = build_units(train_frames, spec)
    rng = np.random.default_rng(config.seed)
    model = build_model(spec, config, rng)
    state = init_train_state(model, config, rng)
    history = []
    stop = False
    while not stop:
        order = state.rng.permutation(len(units))
        for start in range(0, len(order), config.batch_size):
            chosen = [units[i] for i in order[start : start + config.batch_size]]
            train_step(make_batch(chosen), model, state, config)
            if config.max_steps and state.global_step >= config.max_steps:
                stop = True
                break
        state.epoch += 1
        report, _, should_stop = validate_epoch(
            val_frames, model, state, config, spec, out_dir
        )
        history.append((state.epoch, report))
        if log is not None:
            lr_emb = lr_schedule(state.stall_counter, config.emb_lr, config.decay_start,
                                 config.patience, config.decay_floor)
            lr_depth = lr_schedule(state.stall_counter, config.depth_lr, config.decay_start,
                                   config.patience, config.decay_floor)
            log(
                f"epoch {state.epoch} abs_rel {report.abs_rel:.6f} rmse {report.rmse:.6f} "
                f"log10 {report.log10:.6f} d1 {report.d1:.6f} d2 {report.d2:.6f} "
                f"d3 {report.d3:.6f} stall {state.stall_counter} "
                f"lr_emb {lr_emb:.8g} lr_depth {lr_depth:.8g}"
            )
        if should_stop or (config.max_epochs and state.epoch >= config.max_epochs):
            stop = True
    final_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        final_path = Path(out_dir) / "final.pckp"
        save_checkpoint(final_path, model, state, config)
    return FitResult(model=model, state=state, final_path=final_path, history=history)
