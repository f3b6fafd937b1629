"""Dataset preparation, the three training stages, and evaluation.

Stages: `pretrain` fits backbone + finding heads with Adam and binary
cross-entropy on finding labels; `cls` fits the encoder trunk with SGD
(momentum, cosine warm-up, global-norm clip) and softmax cross-entropy on
class labels; `sev` continues from a classifier checkpoint and fits the map
head (plus, by default, the trunk) with constant-rate SGD on the per-zone
severity MSE. Every run writes a JSONL step log, a final JSON report, and a
checkpoint that embeds the config digest.

Determinism: all randomness flows from the config seed through named
SeedSequence spawn keys (model init, batch order, dropout), so identical
configs reproduce identical checkpoints bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import heads as H
from . import metrics as M
from . import nn
from .config import RunConfig, StageConfig
from .errors import DataError, NumericError
from .heads import CLASS_NAMES
from .model import Model
from .tensor import Tape, backward

STAGE_IDS = {"pretrain": 1, "cls": 2, "sev": 3}


@dataclass
class Subset:
    """Preprocessed arrays for one split."""

    ids: list
    images: np.ndarray  # (n, 1, s, s) float32
    views: list
    classes: np.ndarray | None = None  # (n,) int, -1 when absent
    findings: np.ndarray | None = None  # (n, K), -1 rows when absent
    severity: np.ndarray | None = None  # (n, 3, 2), -1 rows when absent
    masks: np.ndarray | None = None  # (n, s, s) bool at image resolution
    lesion_supports: np.ndarray | None = None  # (n, s, s) bool
    map_masks: np.ndarray | None = None  # (n, m, m) bool at map resolution
    map_zones: np.ndarray | None = None  # (n, m, m) int8

    def __len__(self):
        return len(self.ids)


@dataclass
class Bundle:
    train: Subset
    val: Subset
    test: Subset
    split_digest: str = ""

    def subset(self, name: str) -> Subset:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise DataError(f"unknown subset {name!r}") from None


def _prepare_subset(samples: list[D.Sample], cfg: RunConfig, model: Model | None) -> Subset:
    size = cfg.image_size
    n = len(samples)
    images = np.zeros((n, 1, size, size), dtype=np.float32)
    classes = np.full(n, -1, dtype=np.int64)
    findings = np.full((n, len(cfg.findings)), -1, dtype=np.int64)
    severity = np.full((n, 3, 2), -1, dtype=np.int64)
    masks = np.zeros((n, size, size), dtype=bool)
    lesions = np.zeros((n, size, size), dtype=bool)
    has_mask = False
    for i, s in enumerate(samples):
        images[i, 0] = D.preprocess(s.image, size)
        if s.class_label is not None:
            classes[i] = CLASS_NAMES.index(s.class_label)
        if s.findings is not None:
            findings[i] = s.findings
        if s.severity is not None:
            severity[i] = s.severity
        if s.mask is not None:
            has_mask = True
            mask = s.mask
            if mask.shape != (size, size):
                mask = D.resize_nearest(mask.astype(np.uint8), size) > 0
            masks[i] = mask
        if s.lesion_centers:
            support = D.lesion_support(s)
            if support.shape != (size, size):
                support = D.resize_nearest(support.astype(np.uint8), size) > 0
            lesions[i] = support
    subset = Subset(
        ids=[s.id for s in samples],
        images=images,
        views=[s.view for s in samples],
        classes=classes,
        findings=findings,
        severity=severity,
        masks=masks if has_mask else None,
        lesion_supports=lesions,
    )
    if model is not None and has_mask:
        map_masks = np.zeros((n, model.map_size, model.map_size), dtype=bool)
        zones = np.zeros((n, model.map_size, model.map_size), dtype=np.int8)
        for i in range(n):
            if masks[i].any():
                map_masks[i] = model.mask_to_map(masks[i])
                zones[i] = H.zone_partition(map_masks[i])
        subset.map_masks = map_masks
        subset.map_zones = zones
    return subset


def prepare(cfg: RunConfig, model: Model | None = None) -> Bundle:
    """Load or generate samples, filter by view, split, and preprocess."""
    if cfg.data.source == "synth":
        samples = D.generate(cfg.synth_spec(), cfg.data.n)
    else:
        samples = D.load_manifest(cfg.data.manifest, k=len(cfg.findings))
    if cfg.view != "all":
        samples = [s for s in samples if s.view == cfg.view]
        if not samples:
            raise DataError(f"no samples left after --view {cfg.view} filter")
    train, val, test = D.split(samples, cfg.data.split, seed=cfg.seed)
    digest = hashlib.sha256(
        json.dumps([[s.id for s in part] for part in (train, val, test)]).encode()
    ).hexdigest()
    return Bundle(
        train=_prepare_subset(train, cfg, model),
        val=_prepare_subset(val, cfg, model),
        test=_prepare_subset(test, cfg, model),
        split_digest=digest,
    )


# ---------------------------------------------------------------------------
# shared loop machinery


class _Logger:
    def __init__(self, out_dir, name):
        self.path = Path(out_dir) / name
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def log(self, **record):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()


def _schedule_for(stage: StageConfig) -> nn.Schedule:
    return nn.Schedule(
        kind=stage.schedule,
        base_lr=stage.lr,
        warmup_steps=stage.warmup,
        total_steps=stage.steps,
        decay_factor=stage.decay_factor,
        decay_points=tuple(stage.decay_points),
    )


def _batch_stream(n: int, batch: int, steps: int, rng: np.random.Generator):
    """Epoch-shuffled index batches, `steps` of them."""
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos : pos + batch]
        pos += batch


def _step_update(stage: StageConfig, params, lr):
    if stage.optimizer == "adam":
        nn.adam_step(params, lr, stage.beta1, stage.beta2, stage.eps, max_grad_norm=stage.clip)
    else:
        nn.sgd_step(params, lr, stage.momentum, max_grad_norm=stage.clip)


def _opt_state(params) -> dict:
    return {p.name: p.state for p in params if p.state}


def _restore_opt_state(params, state: dict | None):
    if not state:
        return
    for p in params:
        if p.name in state:
            p.state = state[p.name]


def _loss_finite(value: float, step: int):
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at step {step}")


def _rng(cfg: RunConfig, stage: str, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(STAGE_IDS[stage], purpose)))


# ---------------------------------------------------------------------------
# stages


def run_pretrain(cfg: RunConfig, out_dir, resume=None, model=None, bundle=None):
    """Fit backbone + finding heads; returns (checkpoint path, report)."""
    out_dir = Path(out_dir)
    model = model or Model(cfg)
    bundle = bundle or prepare(cfg, model)
    sub = bundle.train
    if sub.findings is None or (sub.findings < 0).all():
        raise DataError("pretraining needs finding labels")
    keep = ~(sub.findings < 0).any(axis=1)
    images, labels = sub.images[keep], sub.findings[keep]

    stage = cfg.pretrain
    params = model.stage_params("pretrain")
    start_step = 0
    if resume is not None:
        arrays, header, opt_state = ckpt.load(resume)
        ckpt.check_digest(header, cfg.digest(), resume, force=False)
        model.load_arrays(arrays)
        _restore_opt_state(params, opt_state)
        start_step = header["step"]

    schedule = _schedule_for(stage)
    batch_rng = _rng(cfg, "pretrain", 1)
    stream = _batch_stream(len(images), stage.batch, stage.steps, batch_rng)
    for _ in range(start_step):  # replay batch order up to the resume point
        next(stream)

    log = _Logger(out_dir, "pretrain_log.jsonl")
    first = last = None
    for offset, idx in enumerate(stream):
        step = start_step + offset
        lr = nn.lr_at(schedule, step)
        model.zero_grads()
        with Tape() as tape:
            loss = model.findings_loss(images[idx], labels[idx])
            backward(loss)
        tape.clear()
        value = loss.item()
        _loss_finite(value, step)
        _step_update(stage, params, lr)
        log.log(step=step, lr=lr, loss=value)
        first = value if first is None else first
        last = value
    log.close()

    path = ckpt.save(
        out_dir / "pretrain.ckpt",
        model.state_arrays(),
        cfg.digest(),
        step=stage.steps,
        stage="pretrain",
        opt_state=_opt_state(params),
    )
    report = {"stage": "pretrain", "config_digest": cfg.digest(), "steps": stage.steps,
              "first_loss": first, "final_loss": last, "split_digest": bundle.split_digest}
    (out_dir / "pretrain_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return path, report


def run_train_cls(cfg: RunConfig, backbone_ckpt, out_dir, model=None, bundle=None):
    """Fit the classification trunk from a pretrained backbone."""
    out_dir = Path(out_dir)
    model = model or Model(cfg)
    bundle = bundle or prepare(cfg, model)
    sub = bundle.train
    keep = sub.classes >= 0
    if not keep.any():
        raise DataError("classifier training needs class labels")
    images, labels = sub.images[keep], sub.classes[keep]

    if backbone_ckpt is not None:
        arrays, header, _ = ckpt.load(backbone_ckpt)
        ckpt.check_digest(header, cfg.digest(), backbone_ckpt, force=False)
        model.load_arrays(arrays)

    stage = cfg.train_cls
    params = model.stage_params("cls")
    schedule = _schedule_for(stage)
    batch_rng = _rng(cfg, "cls", 1)
    drop_rng = _rng(cfg, "cls", 2)
    log = _Logger(out_dir, "train_cls_log.jsonl")
    last = None
    for step, idx in enumerate(_batch_stream(len(images), stage.batch, stage.steps, batch_rng)):
        lr = nn.lr_at(schedule, step)
        model.zero_grads()
        with Tape() as tape:
            logits, _ = model.classify(images[idx], train=True, rng=drop_rng)
            loss = H.classification_loss(logits, labels[idx])
            backward(loss)
        tape.clear()
        value = loss.item()
        _loss_finite(value, step)
        _step_update(stage, params, lr)
        log.log(step=step, lr=lr, loss=value)
        last = value
    log.close()

    path = ckpt.save(
        out_dir / "classifier.ckpt",
        model.state_arrays(),
        cfg.digest(),
        step=stage.steps,
        stage="cls",
        opt_state=_opt_state(params),
    )
    train_eval = evaluate_cls(model, sub)
    report = {
        "stage": "cls",
        "config_digest": cfg.digest(),
        "steps": stage.steps,
        "final_loss": last,
        "split_digest": bundle.split_digest,
        "train_metrics": train_eval,
    }
    (out_dir / "train_cls_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return path, report


def run_train_sev(cfg: RunConfig, classifier_ckpt, out_dir, model=None, bundle=None):
    """Fit the severity branch from a trained classifier."""
    out_dir = Path(out_dir)
    model = model or Model(cfg)
    bundle = bundle or prepare(cfg, model)
    sub = bundle.train
    if sub.map_masks is None:
        raise DataError("severity training needs lung masks")
    keep = (~(sub.severity < 0).any(axis=(1, 2))) & sub.map_masks.any(axis=(1, 2))
    if not keep.any():
        raise DataError("severity training needs severity labels")
    images = sub.images[keep]
    labels = sub.severity[keep]
    masks = sub.map_masks[keep]
    zones = sub.map_zones[keep]

    if classifier_ckpt is not None:
        arrays, header, _ = ckpt.load(classifier_ckpt)
        ckpt.check_digest(header, cfg.digest(), classifier_ckpt, force=False)
        model.load_arrays(arrays)

    stage = cfg.train_sev
    params = model.stage_params("sev")
    schedule = _schedule_for(stage)
    batch_rng = _rng(cfg, "sev", 1)
    drop_rng = _rng(cfg, "sev", 2)
    log = _Logger(out_dir, "train_sev_log.jsonl")
    last = None
    for step, idx in enumerate(_batch_stream(len(images), stage.batch, stage.steps, batch_rng)):
        lr = nn.lr_at(schedule, step)
        model.zero_grads()
        with Tape() as tape:
            arr, _, _ = model.severity(images[idx], masks[idx], zones[idx], train=True, rng=drop_rng)
            loss = H.severity_loss(arr, labels[idx])
            backward(loss)
        tape.clear()
        value = loss.item()
        _loss_finite(value, step)
        _step_update(stage, params, lr)
        log.log(step=step, lr=lr, loss=value)
        last = value
    log.close()

    path = ckpt.save(
        out_dir / "severity.ckpt",
        model.state_arrays(),
        cfg.digest(),
        step=stage.steps,
        stage="sev",
        opt_state=_opt_state(params),
    )
    report = {
        "stage": "sev",
        "config_digest": cfg.digest(),
        "steps": stage.steps,
        "final_loss": last,
        "split_digest": bundle.split_digest,
        "pooling": cfg.pooling,
    }
    (out_dir / "train_sev_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return path, report


# ---------------------------------------------------------------------------
# evaluation


def _forward_in_batches(fn, n, batch=32):
    outs = []
    for lo in range(0, n, batch):
        outs.append(fn(slice(lo, min(lo + batch, n))))
    return np.concatenate(outs, axis=0)


def class_probabilities(model: Model, sub: Subset) -> np.ndarray:
    def fn(sl):
        logits, _ = model.classify(sub.images[sl])
        shifted = logits.numpy() - logits.numpy().max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    return _forward_in_batches(fn, len(sub))


def evaluate_cls(model: Model, sub: Subset) -> dict:
    keep = sub.classes >= 0
    if not keep.any():
        raise DataError("classification evaluation needs class labels")
    probs = class_probabilities(model, sub)[keep]
    labels = sub.classes[keep]
    report = M.classification_report(probs, labels, CLASS_NAMES)
    report["n_samples"] = int(keep.sum())
    return report


def predict_severity_arrays(model: Model, sub: Subset) -> np.ndarray:
    def fn(sl):
        arr, _, _ = model.severity(sub.images[sl], sub.map_masks[sl], sub.map_zones[sl])
        return arr.numpy()

    return _forward_in_batches(fn, len(sub))


def evaluate_sev(model: Model, sub: Subset, baseline_mean: float | None = None) -> dict:
    if sub.map_masks is None:
        raise DataError("severity evaluation needs lung masks")
    keep = (~(sub.severity < 0).any(axis=(1, 2))) & sub.map_masks.any(axis=(1, 2))
    if not keep.any():
        raise DataError("severity evaluation needs severity labels")
    preds = predict_severity_arrays(model, sub)[keep]
    truth = sub.severity[keep].astype(np.float64)
    report = M.severity_report(preds, truth)
    report["n_samples"] = int(keep.sum())
    report["binarized_scores"] = [H.binarized_score(p) for p in preds]
    if baseline_mean is not None:
        true_scores = truth.sum(axis=(1, 2))
        report["baseline_global_mse"] = float(np.mean((true_scores - baseline_mean) ** 2))
        report["baseline_mean"] = baseline_mean
    return report


def evaluate(cfg: RunConfig, checkpoint_path, task: str, subset_name="test", model=None, bundle=None) -> dict:
    """Evaluate a checkpoint; returns the metrics report dictionary."""
    if task not in ("cls", "sev"):
        raise DataError(f"task must be cls|sev, got {task!r}")
    model = model or Model(cfg)
    arrays, header, _ = ckpt.load(checkpoint_path)
    model.load_arrays(arrays)
    bundle = bundle or prepare(cfg, model)
    sub = bundle.subset(subset_name)
    started = time.time()
    if task == "cls":
        body = evaluate_cls(model, sub)
    else:
        train_truth = bundle.train.severity
        baseline = None
        if train_truth is not None:
            ok = ~(train_truth < 0).any(axis=(1, 2))
            if ok.any():
                baseline = float(train_truth[ok].sum(axis=(1, 2)).mean())
        body = evaluate_sev(model, sub, baseline_mean=baseline)
    return {
        "task": task,
        "subset": subset_name,
        "config_digest": cfg.digest(),
        "checkpoint_digest": header["config_digest"],
        "checkpoint_stage": header.get("stage", ""),
        "split_digest": bundle.split_digest,
        "elapsed_seconds": round(time.time() - started, 3),
        "metrics": body,
    }
