"""Training objectives with patch-validity masking and analytic gradients.

Every loss returns a ``LossBundle``. Embedding-space losses carry gradients
w.r.t. the fused representations and the table weights; the metric regression
loss carries the gradient w.r.t. the predicted depths. All-masked batches
yield zero loss and zero gradients by convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import depthhead
from .dataio import DatasetSpec
from .depthhead import DepthTable, fuse_patches, init_depth_table, init_rotation_head
from .tensorcore import ShapeError, grad_check


@dataclass
class LossBundle:
    value: float
    n_valid: int
    grad_ztilde: np.ndarray | None = None  # (N, D)
    grad_table: np.ndarray | None = None  # (K, D)
    grad_pred: np.ndarray | None = None  # (N,)


def _as_mask(m, n: int, dtype) -> np.ndarray:
    mask = np.asarray(m).astype(dtype).ravel()
    if mask.shape != (n,):
        raise ShapeError(f"mask shape {mask.shape}, expected ({n},)")
    return mask


def _safe_targets(y, mask) -> np.ndarray:
    # Masked rows may carry arbitrary target indices; route them to 0 so
    # indexing is safe. Their contributions are zeroed by the mask.
    y = np.asarray(y).ravel()
    return np.where(mask > 0, y, 0).astype(np.intp)


def info_nce(z_tilde: np.ndarray, table: DepthTable, y, m) -> LossBundle:
    """Contrastive pull of each valid patch toward its target table vector,
    away from the others, at the table's temperature."""
    n, d = z_tilde.shape
    mask = _as_mask(m, n, z_tilde.dtype)
    total = float(mask.sum())
    if total == 0.0:
        return LossBundle(0.0, 0, np.zeros_like(z_tilde), np.zeros_like(table.weights.value))
    yc = _safe_targets(y, mask)
    w = table.weights.value
    s = (z_tilde @ w.T) / table.tau
    s_max = s.max(axis=1, keepdims=True)
    e = np.exp(s - s_max)
    z_norm = e.sum(axis=1, keepdims=True)
    log_p_pos = (s - s_max - np.log(z_norm))[np.arange(n), yc]
    value = -(mask * log_p_pos).sum() / total
    p = e / z_norm
    ds = p.copy()
    ds[np.arange(n), yc] -= 1.0
    ds *= (mask / total)[:, None]
    grad_zt = (ds @ w) / table.tau
    grad_w = (ds.T @ z_tilde) / table.tau
    return LossBundle(value, int(total), grad_zt, grad_w)


def align_loss(z_tilde: np.ndarray, table: DepthTable, y, m) -> LossBundle:
    """Mean (1 - cosine) between each valid patch and its target table vector."""
    n, d = z_tilde.shape
    mask = _as_mask(m, n, z_tilde.dtype)
    total = float(mask.sum())
    if total == 0.0:
        return LossBundle(0.0, 0, np.zeros_like(z_tilde), np.zeros_like(table.weights.value))
    yc = _safe_targets(y, mask)
    w_pos = table.weights.value[yc]
    cos = (z_tilde * w_pos).sum(axis=1)
    value = (mask * (1.0 - cos)).sum() / total
    scale = (mask / total)[:, None]
    grad_zt = -scale * w_pos
    grad_w = np.zeros_like(table.weights.value)
    np.add.at(grad_w, yc, -scale * z_tilde)
    return LossBundle(value, int(total), grad_zt, grad_w)


def emb_loss(z_tilde: np.ndarray, table: DepthTable, y, m, lam: float) -> LossBundle:
    """Alignment plus lam times InfoNCE; gradients sum linearly."""
    a = align_loss(z_tilde, table, y, m)
    c = info_nce(z_tilde, table, y, m)
    return LossBundle(
        value=a.value + lam * c.value,
        n_valid=a.n_valid,
        grad_ztilde=a.grad_ztilde + lam * c.grad_ztilde,
        grad_table=a.grad_table + lam * c.grad_table,
    )


def rmse_loss(pred: np.ndarray, target: np.ndarray, m) -> LossBundle:
    """Root-mean-square error over valid entries; gradient guarded at zero."""
    pred = np.asarray(pred).ravel()
    target = np.asarray(target).ravel()
    if pred.shape != target.shape:
        raise ShapeError(f"rmse_loss: pred {pred.shape} vs target {target.shape}")
    mask = _as_mask(m, pred.shape[0], pred.dtype if pred.dtype.kind == "f" else np.float64)
    total = mask.sum()
    if total == 0.0:
        return LossBundle(0.0, 0, grad_pred=np.zeros_like(pred))
    err = (pred - target) * mask
    value = np.sqrt((err * err).sum() / total)
    if value > 0.0:
        grad_pred = err / (total * value)
    else:
        grad_pred = np.zeros_like(pred)
    return LossBundle(value, int(total), grad_pred=grad_pred)


def gradient_suite(
    seed: int = 0,
    instances: int = 20,
    n: int = 16,
    k: int = 5,
    d: int = 8,
    lam: float = 1.0,
    h: float = 1e-6,
) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients for each
    loss, through the full head (phi, psi, table) in eval mode.

    Runs in extended precision (80-bit long double where the platform has it):
    at float64 the central-difference noise floor sits near 1e-9 absolute,
    which on near-zero gradient coordinates exceeds the relative tolerances
    this suite is held to."""
    rng = np.random.default_rng(seed)
    dtype = np.longdouble
    spec = DatasetSpec(
        dim=d, grid_h=24, grid_w=24, img_h=336, img_w=336,
        d_min=0.001, d_max=10.0, range_min=0.0, range_max=10.0, k=k,
    )
    worst = {"info_nce": 0.0, "align": 0.0, "emb": 0.0, "rmse": 0.0}
    for idx in range(instances):
        head = init_rotation_head(d, rng, rate=0.0, dtype=dtype)
        table = init_depth_table(f"random:{seed + 1000 + idx}", spec, tau=0.07,
                                 dtype=dtype)
        z = rng.standard_normal((n, d)).astype(dtype)
        cls_rows = np.broadcast_to(rng.standard_normal(d).astype(dtype), (n, d))
        y = rng.integers(0, k, size=n)
        m = (rng.random(n) < 0.8).astype(dtype)
        m[0] = 1.0  # at least one valid patch
        target = rng.uniform(0.0, 10.0, size=n).astype(dtype)
        params = head.params() + [table.weights]

        def run_emb(loss_fn):
            z_tilde, back = fuse_patches(z, cls_rows, head, mode="eval")
            bundle = loss_fn(z_tilde)
            table.weights.grad += bundle.grad_table
            back(bundle.grad_ztilde)
            return bundle.value

        def f_info():
            return run_emb(lambda zt: info_nce(zt, table, y, m))

        def f_align():
            return run_emb(lambda zt: align_loss(zt, table, y, m))

        def f_emb():
            return run_emb(lambda zt: emb_loss(zt, table, y, m, lam))

        def f_rmse():
            z_tilde, back = fuse_patches(z, cls_rows, head, mode="eval")
            _, p, back_sp = depthhead.scores_probs_grad(z_tilde, table)
            d_hat = depthhead.expected_depth(p, table.centers)
            bundle = rmse_loss(d_hat, target, m)
            dp = (bundle.grad_pred[:, None] * np.asarray(table.centers, dtype=p.dtype)
                  ).astype(p.dtype)
            back(back_sp(dp))
            return bundle.value

        for name, fn in (("info_nce", f_info), ("align", f_align),
                         ("emb", f_emb), ("rmse", f_rmse)):
            err = grad_check(fn, params, h=h)
            if err > worst[name]:
                worst[name] = err
    return worst
