"""Token projection and the transformer encoder stack.

Corpus features are projected per token to the model width, a learnable
class token is prepended, a learnable positional embedding is added, and L
pre-norm encoder layers (attention, then MLP, each behind a layer norm and
a residual connection) produce the final states. A last layer norm closes
the pre-norm stack. Attention probability matrices can be retained per
layer for saliency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class EncoderConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 64
    mlp_ratio: float = 4.0
    dropout: float = 0.1

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"need at least 1 encoder layer, got {self.layers}")
        if self.dim % self.heads:
            raise ConfigError(f"width {self.dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")


@dataclass
class EncoderState:
    """Final token states (B, 1+N, D) and per-layer attention (B, h, T, T)."""

    final: Tensor
    attention: list = field(default_factory=list)

    def class_feature(self) -> Tensor:
        """State of the class token: (B, D)."""
        out = T.slice_axis(self.final, 1, 0, 1)
        return T.reshape(out, (out.shape[0], out.shape[2]))

    def residual_tokens(self) -> Tensor:
        """States of every non-class token: (B, N, D), row-major grid order."""
        return T.slice_axis(self.final, 1, 1, self.final.shape[1])


class TokenProjector:
    """Shared per-token affine map (equivalent to a 1x1 convolution)."""

    def __init__(self, rng, in_channels, dim, dtype=np.float32, prefix="proj"):
        self.w = nn.weight_param(f"{prefix}.w", rng, (in_channels, dim), dtype)
        self.b = nn.zeros_param(f"{prefix}.b", (dim,), dtype)

    def params(self):
        return [self.w, self.b]

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-1] != self.w.value.shape[0]:
            raise ShapeError(
                f"corpus channels {tokens.shape[-1]} != projection input {self.w.value.shape[0]}"
            )
        return T.add(T.matmul(tokens, self.w.value), self.b.value)


def assemble_input(projected: Tensor, class_token: Tensor, pos_embedding: Tensor) -> Tensor:
    """Prepend the class token and add the positional embedding.

    projected: (B, N, D); class_token: (1, 1, D); pos_embedding: (1, 1+N, D).
    """
    b, n, d = projected.shape
    if pos_embedding.shape != (1, n + 1, d):
        raise ShapeError(f"positional embedding {pos_embedding.shape} != (1, {n + 1}, {d})")
    cls = T.broadcast_to(class_token, (b, 1, d))
    return T.add(T.concat([cls, projected], axis=1), pos_embedding)


class Encoder:
    def __init__(self, rng, config: EncoderConfig, dtype=np.float32, prefix="encoder"):
        self.config = config
        d = config.dim
        hidden = int(round(config.mlp_ratio * d))
        self.layers = []
        for i in range(config.layers):
            p = f"{prefix}.layer{i}"
            layer = {
                "ln1_g": nn.ones_param(f"{p}.ln1.gain", (d,), dtype),
                "ln1_b": nn.zeros_param(f"{p}.ln1.bias", (d,), dtype),
                "wq": nn.weight_param(f"{p}.attn.wq", rng, (d, d), dtype),
                "wk": nn.weight_param(f"{p}.attn.wk", rng, (d, d), dtype),
                "wv": nn.weight_param(f"{p}.attn.wv", rng, (d, d), dtype),
                "wo": nn.weight_param(f"{p}.attn.wo", rng, (d, d), dtype),
                "bq": nn.zeros_param(f"{p}.attn.bq", (d,), dtype),
                "bk": nn.zeros_param(f"{p}.attn.bk", (d,), dtype),
                "bv": nn.zeros_param(f"{p}.attn.bv", (d,), dtype),
                "bo": nn.zeros_param(f"{p}.attn.bo", (d,), dtype),
                "ln2_g": nn.ones_param(f"{p}.ln2.gain", (d,), dtype),
                "ln2_b": nn.zeros_param(f"{p}.ln2.bias", (d,), dtype),
                "w1": nn.weight_param(f"{p}.mlp.w1", rng, (d, hidden), dtype),
                "b1": nn.zeros_param(f"{p}.mlp.b1", (hidden,), dtype),
                "w2": nn.weight_param(f"{p}.mlp.w2", rng, (hidden, d), dtype),
                "b2": nn.zeros_param(f"{p}.mlp.b2", (d,), dtype),
            }
            self.layers.append(layer)
        self.final_ln_g = nn.ones_param(f"{prefix}.final_ln.gain", (d,), dtype)
        self.final_ln_b = nn.zeros_param(f"{prefix}.final_ln.bias", (d,), dtype)

    def params(self):
        out = [p for layer in self.layers for p in layer.values()]
        return out + [self.final_ln_g, self.final_ln_b]

    def _attention(self, layer, z, train, rng, retain):
        b, t, d = z.shape
        h = self.config.heads
        dh = d // h
        scale = 1.0 / math.sqrt(dh)

        def heads_view(x):
            return T.transpose(T.reshape(x, (b, t, h, dh)), (0, 2, 1, 3))

        q = heads_view(T.add(T.matmul(z, layer["wq"].value), layer["bq"].value))
        k = heads_view(T.add(T.matmul(z, layer["wk"].value), layer["bk"].value))
        v = heads_view(T.add(T.matmul(z, layer["wv"].value), layer["bv"].value))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
        attn = T.softmax(scores, axis=-1)
        if retain:
            attn.retain_grad = True
        mixed = attn
        if train and self.config.dropout > 0:
            mixed = T.dropout(mixed, self.config.dropout, rng)
        ctx = T.matmul(mixed, v)  # (B, h, T, dh)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        out = T.add(T.matmul(ctx, layer["wo"].value), layer["bo"].value)
        return out, attn

    def _mlp(self, layer, z, train, rng):
        hid = T.gelu(T.add(T.matmul(z, layer["w1"].value), layer["b1"].value))
        if train and self.config.dropout > 0:
            hid = T.dropout(hid, self.config.dropout, rng)
        return T.add(T.matmul(hid, layer["w2"].value), layer["b2"].value)

    def __call__(self, z0: Tensor, train=False, rng=None, retain_attention=False) -> EncoderState:
        if train and self.config.dropout > 0 and rng is None:
            raise ConfigError("training forward with dropout needs an rng")
        z = z0
        attention = []
        for layer in self.layers:
            normed = T.layer_norm(z, layer["ln1_g"].value, layer["ln1_b"].value)
            attended, attn = self._attention(layer, normed, train, rng, retain_attention)
            attention.append(attn)
            z = T.add(z, attended)
            normed = T.layer_norm(z, layer["ln2_g"].value, layer["ln2_b"].value)
            z = T.add(z, self._mlp(layer, normed, train, rng))
        z = T.layer_norm(z, self.final_ln_g.value, self.final_ln_b.value)
        return EncoderState(z, attention)
