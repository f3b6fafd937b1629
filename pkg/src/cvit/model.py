"""The assembled two-branch model and its parameter registry.

Forward paths:
  * findings:  image -> backbone -> PCAM heads -> finding probabilities
  * classify:  image -> backbone [-> PCAM] -> corpus -> projector ->
               encoder -> class-token feature -> 3 logits
  * severity:  classify trunk -> non-class tokens -> map head ->
               sigmoid map -> mask Hadamard -> per-zone pooling -> 3x2 array

All parameters for every branch are built up front from the config seed, so
checkpoints always carry the complete parameter set regardless of stage.
"""

from __future__ import annotations

import numpy as np

from . import heads as H
from . import tensor as T
from .backbone import Backbone, PcamHeads, corpus_channels, finding_bce, select_corpus
from .config import RunConfig
from .data import resize_nearest
from .encoder import Encoder, EncoderConfig, EncoderState, TokenProjector, assemble_input
from .errors import ConfigError, ShapeError
from .nn import Param, weight_param
from .tensor import Tensor


class Model:
    def __init__(self, cfg: RunConfig, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,)))

        self.backbone = Backbone(rng, cfg.backbone_depth, cfg.backbone_channels, dtype)
        self.pcam = PcamHeads(rng, cfg.backbone_channels, cfg.findings, dtype)

        grid = cfg.token_grid()
        self.n_tokens = grid * grid
        in_channels = corpus_channels(cfg.corpus_mode, cfg.backbone_channels, cfg.findings)
        self.projector = TokenProjector(rng, in_channels, cfg.encoder_dim, dtype)
        self.class_token = weight_param("class_token", rng, (1, 1, cfg.encoder_dim), dtype)
        self.pos_embedding = weight_param("pos_embedding", rng, (1, 1 + self.n_tokens, cfg.encoder_dim), dtype)
        self.encoder = Encoder(
            rng,
            EncoderConfig(cfg.encoder_layers, cfg.encoder_heads, cfg.encoder_dim, cfg.mlp_ratio, cfg.dropout),
            dtype,
        )
        self.cls_head = H.ClassifierHead(rng, cfg.encoder_dim, dtype=dtype)
        self.map_head = H.MapHead(rng, cfg.encoder_dim, dtype)
        self.map_size = grid * H.MapHead.UPSCALE

    # ------------------------------------------------------------------
    # parameters

    def params(self) -> dict[str, Param]:
        groups = (
            self.backbone.params()
            + self.pcam.params()
            + self.projector.params()
            + [self.class_token, self.pos_embedding]
            + self.encoder.params()
            + self.cls_head.params()
            + self.map_head.params()
        )
        out = {}
        for p in groups:
            if p.name in out:
                raise ConfigError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def stage_params(self, stage: str) -> list[Param]:
        """Parameters trained by a stage, with trainable flags resolved."""
        backbone_group = self.backbone.params() + self.pcam.params()
        trunk = (
            self.projector.params()
            + [self.class_token, self.pos_embedding]
            + self.encoder.params()
            + self.cls_head.params()
        )
        if stage == "pretrain":
            chosen = backbone_group
        elif stage == "cls":
            for p in backbone_group:
                p.trainable = self.cfg.backbone_trainable
            chosen = ([] if not self.cfg.backbone_trainable else backbone_group) + trunk
        elif stage == "sev":
            freeze = self.cfg.train_sev.freeze_trunk
            for p in backbone_group + trunk:
                p.trainable = not freeze
            chosen = self.map_head.params() + ([] if freeze else backbone_group + trunk)
        else:
            raise ConfigError(f"unknown stage {stage!r}")
        return chosen

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value.data for name, p in self.params().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], subset=False):
        """Install checkpoint arrays by name. With subset=True, the model may
        have extra parameters, but every given array must land somewhere."""
        params = self.params()
        missing = set(arrays) - set(params)
        if missing:
            raise ShapeError(f"checkpoint has unknown parameters: {sorted(missing)[:4]}")
        if not subset:
            absent = set(params) - set(arrays)
            if absent:
                raise ShapeError(f"checkpoint is missing parameters: {sorted(absent)[:4]}")
        for name, arr in arrays.items():
            p = params[name]
            if tuple(arr.shape) != p.value.shape:
                raise ShapeError(f"checkpoint {name}: shape {arr.shape} != model {p.value.shape}")
            p.value.data = np.ascontiguousarray(arr.astype(p.value.dtype))

    def zero_grads(self):
        for p in self.params().values():
            p.zero_grad()

    # ------------------------------------------------------------------
    # forward paths

    def _image_tensor(self, images) -> Tensor:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=self.dtype)
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr[:, None]
        if isinstance(images, Tensor):
            return images if images.ndim == 4 else T.reshape(images, arr.shape)
        return Tensor(arr.astype(self.dtype))

    def findings_forward(self, images):
        x = self._image_tensor(images)
        fmap = self.backbone(x)
        return self.pcam(fmap)

    def findings_loss(self, images, labels) -> Tensor:
        return finding_bce(self.findings_forward(images).probs, labels)

    def encode(self, images, train=False, rng=None, retain_attention=False) -> EncoderState:
        x = self._image_tensor(images)
        fmap = self.backbone(x)
        pcam = self.pcam(fmap) if self.cfg.corpus_mode != "before-pcam" else None
        corpus = select_corpus(fmap, pcam, self.cfg.corpus_mode, self.cfg.findings)
        tokens = self.projector(corpus.tokens())
        z0 = assemble_input(tokens, self.class_token.value, self.pos_embedding.value)
        return self.encoder(z0, train=train, rng=rng, retain_attention=retain_attention)

    def classify(self, images, train=False, rng=None, retain_attention=False):
        state = self.encode(images, train, rng, retain_attention)
        logits = self.cls_head(state.class_feature())
        return logits, state

    def severity_map(self, state: EncoderState) -> Tensor:
        grid = self.cfg.token_grid()
        tokens = state.residual_tokens()
        b = tokens.shape[0]
        spatial = T.transpose(T.reshape(tokens, (b, grid, grid, self.cfg.encoder_dim)), (0, 3, 1, 2))
        return self.map_head(spatial)

    def severity(self, images, masks, zones, train=False, rng=None):
        """masks/zones at map resolution; returns (3x2 array batch, map, state)."""
        _, state = self.classify(images, train=train, rng=rng)
        sev_map = self.severity_map(state)
        pool = H.roi_max_pool if self.cfg.pooling == "max" else H.roi_avg_pool
        arr = pool(sev_map, masks, zones)
        return arr, sev_map, state

    # ------------------------------------------------------------------
    # mask helpers

    def mask_to_map(self, mask: np.ndarray) -> np.ndarray:
        """Lung mask at image resolution -> boolean grid at map resolution."""
        return resize_nearest(np.asarray(mask, dtype=np.uint8), self.map_size) > 0


def classification_loss(logits, labels):
    return H.classification_loss(logits, labels)
