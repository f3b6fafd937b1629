"""CNN feature extractor and probabilistic activation-map pooling heads.

The backbone is a plain d-stage net (3x3 conv, channel layer norm, GELU,
stride-2 3x3 conv per stage) that turns a 1-channel image into an
(H/2^d, W/2^d, C') feature grid. Each of the K finding heads scores the
grid with a 1x1 convolution, converts scores to per-pixel probabilities
with a sigmoid, normalizes those into attention weights, pools an
attention-weighted feature vector, and maps it through a per-finding
affine + sigmoid into a finding probability. The attention-weighted
feature maps double as alternative corpora for the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import Tensor


@dataclass
class FeatureMap:
    """Backbone output grid plus its row-major token view."""

    grid: Tensor  # (B, C', H', W')

    @property
    def channels(self):
        return self.grid.shape[1]

    @property
    def height(self):
        return self.grid.shape[2]

    @property
    def width(self):
        return self.grid.shape[3]

    def tokens(self) -> Tensor:
        """(B, H'*W', C'): token n is grid[row n // W', col n % W']."""
        b, c, h, w = self.grid.shape
        return T.transpose(T.reshape(self.grid, (b, c, h * w)), (0, 2, 1))

    def grid_hwc(self) -> Tensor:
        return T.transpose(self.grid, (0, 2, 3, 1))


@dataclass
class PcamOutput:
    """Per-finding score/probability/attention maps and pooled predictions."""

    score_maps: Tensor  # (B, K, H', W')
    prob_maps: Tensor  # (B, K, H', W'), sigmoid of scores
    attention: Tensor  # (B, K, H', W'), normalized to sum 1 per finding
    pooled: Tensor  # (B, K, C'), attention-weighted features
    probs: Tensor  # (B, K), finding probabilities


def stage_channels(depth: int, out_channels: int) -> list[int]:
    """Widths double toward the final corpus width, floored at 4."""
    return [max(out_channels >> (depth - 1 - i), 4) for i in range(depth)]


class Backbone:
    def __init__(self, rng, depth=3, out_channels=64, dtype=np.float32, prefix="backbone"):
        if depth < 1:
            raise ConfigError(f"backbone depth must be >= 1, got {depth}")
        self.depth = depth
        self.out_channels = out_channels
        self.stages = []
        c_in = 1
        for i, c in enumerate(stage_channels(depth, out_channels)):
            stage = {
                "conv1_w": nn.weight_param(f"{prefix}.stage{i}.conv1.w", rng, (c, c_in, 3, 3), dtype),
                "conv1_b": nn.zeros_param(f"{prefix}.stage{i}.conv1.b", (c,), dtype),
                "ln_g": nn.ones_param(f"{prefix}.stage{i}.ln.gain", (c,), dtype),
                "ln_b": nn.zeros_param(f"{prefix}.stage{i}.ln.bias", (c,), dtype),
                "conv2_w": nn.weight_param(f"{prefix}.stage{i}.conv2.w", rng, (c, c, 3, 3), dtype),
                "conv2_b": nn.zeros_param(f"{prefix}.stage{i}.conv2.b", (c,), dtype),
            }
            self.stages.append(stage)
            c_in = c

    def params(self):
        return [p for stage in self.stages for p in stage.values()]

    def __call__(self, x: Tensor) -> FeatureMap:
        """x: (B, 1, H, W) with H, W divisible by 2^depth."""
        h, w = x.shape[-2:]
        factor = 1 << self.depth
        if h % factor or w % factor:
            raise ConfigError(f"input extent {h}x{w} not divisible by 2^{self.depth}")
        out = x
        for stage in self.stages:
            out = T.conv2d(out, stage["conv1_w"].value, stride=1, padding=1)
            out = T.add(out, T.reshape(stage["conv1_b"].value, (1, -1, 1, 1)))
            hwc = T.transpose(out, (0, 2, 3, 1))
            hwc = T.layer_norm(hwc, stage["ln_g"].value, stage["ln_b"].value)
            out = T.transpose(hwc, (0, 3, 1, 2))
            out = T.gelu(out)
            out = T.conv2d(out, stage["conv2_w"].value, stride=2, padding=1)
            out = T.add(out, T.reshape(stage["conv2_b"].value, (1, -1, 1, 1)))
        return FeatureMap(out)


class PcamHeads:
    """K 1x1 scoring convolutions plus per-finding output affines."""

    def __init__(self, rng, channels, findings, dtype=np.float32, prefix="pcam"):
        self.findings = list(findings)
        k = len(self.findings)
        self.score_w = nn.weight_param(f"{prefix}.score.w", rng, (k, channels, 1, 1), dtype)
        self.score_b = nn.zeros_param(f"{prefix}.score.b", (k,), dtype)
        self.out_w = nn.weight_param(f"{prefix}.out.w", rng, (k, channels), dtype)
        self.out_b = nn.zeros_param(f"{prefix}.out.b", (k,), dtype)

    def params(self):
        return [self.score_w, self.score_b, self.out_w, self.out_b]

    def __call__(self, fmap: FeatureMap) -> PcamOutput:
        grid = fmap.grid
        b, c, h, w = grid.shape
        scores = T.conv2d(grid, self.score_w.value)
        scores = T.add(scores, T.reshape(self.score_b.value, (1, -1, 1, 1)))
        prob_maps = T.sigmoid(scores)
        total = T.reduce_sum(T.reshape(prob_maps, (b, len(self.findings), h * w)), axis=2, keepdims=True)
        attention = T.div(prob_maps, T.reshape(total, (b, len(self.findings), 1, 1)))
        # pooled[b,k,c] = sum_ij attention[b,k,i,j] * grid[b,c,i,j]
        weighted = T.mul(
            T.reshape(attention, (b, len(self.findings), 1, h, w)),
            T.reshape(grid, (b, 1, c, h, w)),
        )
        pooled = T.reduce_sum(T.reshape(weighted, (b, len(self.findings), c, h * w)), axis=3)
        logits = T.add(
            T.reduce_sum(T.mul(pooled, T.reshape(self.out_w.value, (1, len(self.findings), c))), axis=2),
            self.out_b.value,
        )
        probs = T.sigmoid(logits)
        return PcamOutput(scores, prob_maps, attention, pooled, probs)


def weighted_map(fmap: FeatureMap, pcam: PcamOutput, k: int) -> Tensor:
    """Attention-weighted copy of the feature grid for finding index k."""
    b, c, h, w = fmap.grid.shape
    att_k = T.slice_axis(pcam.attention, 1, k, k + 1)  # (B,1,H,W)
    return T.mul(fmap.grid, att_k)


CORPUS_SUBSETS = {
    "after-pcam:1": ("pneumonia",),
    "after-pcam:3": ("opacity", "consolidation", "pneumonia"),
    "after-pcam:10": None,  # all findings
}


def corpus_channels(mode: str, channels: int, findings) -> int:
    if mode == "before-pcam":
        return channels
    if mode in CORPUS_SUBSETS:
        subset = CORPUS_SUBSETS[mode]
        return channels * (len(findings) if subset is None else len(subset))
    raise ConfigError(f"unknown corpus mode {mode!r}")


def select_corpus(fmap: FeatureMap, pcam: PcamOutput | None, mode: str, findings) -> FeatureMap:
    """Choose the encoder's input corpus: the raw grid, or selected
    attention-weighted grids concatenated along the channel axis."""
    if mode == "before-pcam":
        return fmap
    if mode not in CORPUS_SUBSETS:
        raise ConfigError(f"unknown corpus mode {mode!r}")
    if pcam is None:
        raise ConfigError(f"corpus mode {mode!r} requires PCAM outputs")
    subset = CORPUS_SUBSETS[mode]
    names = list(findings) if subset is None else list(subset)
    try:
        indices = [list(findings).index(name) for name in names]
    except ValueError as missing:
        raise ConfigError(f"corpus mode {mode!r} needs finding {missing.args[0].split()[0]!r} configured") from None
    maps = [weighted_map(fmap, pcam, k) for k in indices]
    return FeatureMap(T.concat(maps, axis=1))


def finding_bce(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over findings and batch; probabilities are
    clipped at 1e-12 so exact 0/1 predictions evaluate cleanly."""
    labels = np.asarray(labels)
    if labels.shape != probs.shape:
        raise DataError(f"finding labels shape {labels.shape} != probabilities {probs.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("finding labels must be 0/1")
    y = Tensor(labels.astype(probs.data.dtype))
    one = Tensor(np.ones_like(y.data))
    eps = 1e-12
    pos = T.mul(y, T.log(T.clip(probs, eps, 1.0)))
    neg = T.mul(T.sub(one, y), T.log(T.clip(T.sub(one, probs), eps, 1.0)))
    return T.mul(T.reduce_mean(T.add(pos, neg)), -1.0)
