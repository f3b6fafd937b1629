"""Classification and severity heads.

The severity branch reshapes the non-class encoder tokens back into their
spatial grid, upsamples them through four convolutional blocks into a
sigmoid severity map, multiplies by the lung mask, and max-pools per lung
zone into a 3x2 array (rows: upper/middle/lower; columns: right/left lung,
image-left being the patient's right). Zone rows split each lung's own
masked vertical extent at the 5/12 and 2/3 lines.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .errors import DataError, ShapeError
from .tensor import Tensor

ZONE_NAMES = ("RU", "RM", "RL", "LU", "LM", "LL")
CLASS_NAMES = ("normal", "other", "covid")


# ---------------------------------------------------------------------------
# classification head


class ClassifierHead:
    """Affine map from the class-token feature to 3 class logits."""

    def __init__(self, rng, dim, n_classes=3, dtype=np.float32, prefix="cls_head"):
        self.w = nn.weight_param(f"{prefix}.w", rng, (dim, n_classes), dtype)
        self.b = nn.zeros_param(f"{prefix}.b", (n_classes,), dtype)

    def params(self):
        return [self.w, self.b]

    def __call__(self, z0: Tensor) -> Tensor:
        # z0: (B, D) -> logits (B, n_classes)
        return T.add(T.matmul(z0, self.w.value), self.b.value)


def classification_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; labels are integer class indices."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"class labels must lie in [0, {n_classes}), got {sorted(set(labels.tolist()))}")
    # stable log-sum-exp; the max shift is a constant w.r.t. the gradient
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True).astype(logits.dtype))
    z = T.sub(logits, shift)
    lse = T.log(T.reduce_sum(T.exp(z), axis=1))
    onehot = Tensor(np.eye(n_classes, dtype=logits.data.dtype)[labels])
    picked = T.reduce_sum(T.mul(z, onehot), axis=1)
    return T.reduce_mean(T.sub(lse, picked))


# ---------------------------------------------------------------------------
# severity map head


class MapHead:
    """Four blocks of (2x nearest upsample -> 3x3 conv -> GELU), channels
    halving per block, then a 1-channel 1x1 conv and sigmoid. Output extent
    is 16x the token grid."""

    UPSCALE = 16

    def __init__(self, rng, dim, dtype=np.float32, prefix="map_head"):
        self.blocks = []
        c = dim
        for i in range(4):
            c_out = max(c // 2, 2)
            w = nn.weight_param(f"{prefix}.block{i}.w", rng, (c_out, c, 3, 3), dtype)
            b = nn.zeros_param(f"{prefix}.block{i}.b", (c_out,), dtype)
            self.blocks.append((w, b))
            c = c_out
        self.final_w = nn.weight_param(f"{prefix}.final.w", rng, (1, c, 1, 1), dtype)
        self.final_b = nn.zeros_param(f"{prefix}.final.b", (1,), dtype)

    def params(self):
        out = []
        for w, b in self.blocks:
            out += [w, b]
        return out + [self.final_w, self.final_b]

    def __call__(self, grid: Tensor) -> Tensor:
        # grid: (B, D, H', W') -> severity map (B, 16H', 16W') in (0, 1)
        h = grid
        for w, b in self.blocks:
            h = T.upsample_nearest(h, 2)
            h = T.conv2d(h, w.value, stride=1, padding=1)
            h = T.add(h, T.reshape(b.value, (1, -1, 1, 1)))
            h = T.gelu(h)
        h = T.conv2d(h, self.final_w.value)
        h = T.add(h, T.reshape(self.final_b.value, (1, -1, 1, 1)))
        out = T.sigmoid(h)
        return T.reshape(out, (out.shape[0], out.shape[2], out.shape[3]))


# ---------------------------------------------------------------------------
# zone geometry


def split_lungs(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(right, left) lung supports: columns left of the image midline are
    the patient's right lung."""
    mask = np.asarray(mask, dtype=bool)
    half = mask.shape[1] // 2
    right = mask.copy()
    right[:, half:] = False
    left = mask.copy()
    left[:, :half] = False
    return right, left


def zone_partition(mask: np.ndarray) -> np.ndarray:
    """Zone id per pixel: 0 none, 1..3 right upper/middle/lower, 4..6 left.

    Per lung, rows split that lung's masked vertical extent of height h at
    floor(5h/12) and floor(2h/3); bands are intersected with the support.
    """
    mask = np.asarray(mask, dtype=bool)
    zones = np.zeros(mask.shape, dtype=np.int8)
    supports = split_lungs(mask)
    if not any(s.any() for s in supports):
        raise DataError("mask has no lung support on either side")
    for side, support in enumerate(supports):
        if not support.any():
            continue
        rows = np.where(support.any(axis=1))[0]
        top, bot = int(rows[0]), int(rows[-1])
        h = bot - top + 1
        b1 = top + (5 * h) // 12
        b2 = top + (2 * h) // 3
        base = 3 * side
        row_idx = np.arange(mask.shape[0])[:, None]
        band = np.where(row_idx < b1, 1, np.where(row_idx < b2, 2, 3)).astype(np.int8)
        band = np.broadcast_to(band, mask.shape)
        zones[support] = (base + band[support]).astype(np.int8)
    return zones


def zone_bit(zones: np.ndarray, row: int, col: int) -> tuple[int, int] | None:
    """Severity-array position (row, col) of a pixel, or None outside zones."""
    z = int(zones[row, col])
    if z == 0:
        return None
    return (z - 1) % 3, (z - 1) // 3


# ---------------------------------------------------------------------------
# ROI pooling onto the severity array


def _check_pool_shapes(sev_map: Tensor, mask: np.ndarray, zones: np.ndarray):
    if sev_map.shape[-2:] != mask.shape[-2:] or mask.shape != zones.shape:
        raise ShapeError(
            f"severity map {sev_map.shape}, mask {mask.shape}, zones {zones.shape} must share resolution"
        )


def _mask_tensor(sev_map: Tensor, mask: np.ndarray) -> Tensor:
    m = np.asarray(mask, dtype=sev_map.data.dtype)
    if sev_map.ndim == 3 and m.ndim == 2:
        m = m[None]
    return Tensor(np.broadcast_to(m, sev_map.shape).copy())


def _batched(sev_map: Tensor, zones: np.ndarray):
    if sev_map.ndim == 2:
        return T.reshape(sev_map, (1,) + sev_map.shape), zones[None] if zones.ndim == 2 else zones, True
    return sev_map, zones if zones.ndim == 3 else np.broadcast_to(zones, sev_map.shape), False


def roi_max_pool(sev_map: Tensor, mask: np.ndarray, zones: np.ndarray) -> Tensor:
    """Per-zone maximum of the masked map; empty zones score 0.

    Gradient flows only to each zone's (first, row-major) argmax pixel.
    """
    _check_pool_shapes(sev_map, mask, zones)
    masked = T.mul(sev_map, _mask_tensor(sev_map, mask))
    x, zns, squeeze = _batched(masked, zones)
    b = x.shape[0]
    flat = x.data.reshape(b, -1)
    zflat = zns.reshape(b, -1)
    out = np.zeros((b, 3, 2), dtype=x.dtype)
    argmax = np.full((b, 6), -1, dtype=np.int64)
    for z in range(1, 7):
        sel = zflat == z
        filled = np.where(sel, flat, -np.inf)
        has = sel.any(axis=1)
        idx = np.argmax(filled, axis=1)
        r, c = (z - 1) % 3, (z - 1) // 3
        out[has, r, c] = flat[has, idx[has]]
        argmax[has, z - 1] = idx[has]
    result = Tensor(out)

    def grad(g):
        dx = np.zeros_like(flat)
        for z in range(6):
            r, c = z % 3, z // 3
            for i in range(b):
                if argmax[i, z] >= 0:
                    dx[i, argmax[i, z]] += g[i, r, c]
        return [(x, dx.reshape(x.shape))]

    pooled = T._record("roi_max_pool", result, (x,), grad)
    return T.reshape(pooled, (3, 2)) if squeeze else pooled


def roi_avg_pool(sev_map: Tensor, mask: np.ndarray, zones: np.ndarray) -> Tensor:
    """Per-zone masked mean; empty zones score 0. Ablation-only pooling."""
    _check_pool_shapes(sev_map, mask, zones)
    masked = T.mul(sev_map, _mask_tensor(sev_map, mask))
    x, zns, squeeze = _batched(masked, zones)
    b = x.shape[0]
    flat = x.data.reshape(b, -1)
    zflat = zns.reshape(b, -1)
    out = np.zeros((b, 3, 2), dtype=x.dtype)
    weights = np.zeros((b, 6) + (flat.shape[1],), dtype=x.dtype)
    for z in range(1, 7):
        sel = zflat == z
        counts = sel.sum(axis=1)
        has = counts > 0
        r, c = (z - 1) % 3, (z - 1) // 3
        sums = np.where(sel, flat, 0).sum(axis=1)
        out[has, r, c] = sums[has] / counts[has]
        weights[has, z - 1] = sel[has] / counts[has, None]
    result = Tensor(out)

    def grad(g):
        dx = np.zeros_like(flat)
        for z in range(6):
            r, c = z % 3, z // 3
            dx += g[:, r, c][:, None] * weights[:, z]
        return [(x, dx.reshape(x.shape))]

    pooled = T._record("roi_avg_pool", result, (x,), grad)
    return T.reshape(pooled, (3, 2)) if squeeze else pooled


def global_score(arr) -> float:
    """Continuous 0..6 severity: sum of the six array entries."""
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    if data.ndim != 2:
        raise ShapeError(f"global_score takes one 3x2 array, got {data.shape}")
    return float(data.sum())


def global_scores(arrs: np.ndarray) -> np.ndarray:
    return np.asarray(arrs).sum(axis=(-2, -1))


def binarized_score(arr, threshold=0.5) -> int:
    """Integer 0..6 severity: count of entries >= threshold."""
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    return int((data >= threshold).sum())


def severity_loss(pred: Tensor, labels) -> Tensor:
    """Mean squared error over the six array entries, averaged over the batch."""
    labels = np.asarray(labels)
    if labels.shape[-2:] != (3, 2) or pred.shape[-2:] != (3, 2):
        raise ShapeError(f"severity arrays must be 3x2, got pred {pred.shape} labels {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("severity labels must be binary per zone")
    target = Tensor(labels.astype(pred.data.dtype).reshape(pred.shape))
    diff = T.sub(pred, target)
    return T.reduce_mean(T.mul(diff, diff))
