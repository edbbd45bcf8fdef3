"""Slice sampling, augmentation, the training loop, checkpoint selection, TTA and ensembling."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from . import tensor as T
from .metrics import iou
from .model import SegModel
from .volume import HEMORRHAGIC, ISCHEMIC, Projection, reslice_array, unreslice_array

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr0: float = 1e-4
    lr_decay: float = 0.99977
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    stroke_sample_prob: float = 0.5
    eval_every: int = 100
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    aug_rot90: bool = True
    aug_flip: bool = True
    aug_scale: bool = True
    aug_rotate: bool = True
    extra_healthy: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("steps", "batch_size", "eval_every", "lr0", "lr_decay"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.stroke_sample_prob <= 1:
            raise ValueError("stroke_sample_prob must lie in [0, 1]")
        if self.extra_healthy < 0:
            raise ValueError("extra_healthy must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    step: int
    val_iou: float
    loss: float
    state: dict = field(repr=False, default_factory=dict)


@dataclass
class VolumeCase:
    """One patient: windowed intensities and labels in axial (z, y, x) order."""

    case_id: str
    image: np.ndarray
    labels: np.ndarray
    cls: str


# ---------------------------------------------------------------- slice pools

class SliceDataset:
    """All 2-D slices of a set of volumes along one projection."""

    def __init__(self, cases, projection=Projection.AXIAL, extra_cases=()):
        self.projection = Projection(projection) if not isinstance(projection, Projection) else projection
        images, masks = [], []
        for case in cases:
            images.append(reslice_array(case.image, self.projection))
            masks.append(reslice_array(case.labels, self.projection))
        for case in extra_cases:
            # extra (healthy) volumes only ever reach the all-slices pool
            images.append(reslice_array(case.image, self.projection))
            masks.append(np.zeros_like(reslice_array(case.labels, self.projection)))
        if not images:
            raise ValueError("dataset has no volumes")
        self.images = np.concatenate(images).astype(np.float32)
        self.masks = np.concatenate(masks).astype(np.uint8)
        self.stroke = np.flatnonzero(self.masks.reshape(len(self.masks), -1).any(axis=1))

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_arrays(cls, images, masks):
        ds = cls.__new__(cls)
        ds.projection = Projection.AXIAL
        ds.images = np.asarray(images, dtype=np.float32)
        ds.masks = np.asarray(masks, dtype=np.uint8)
        ds.stroke = np.flatnonzero(ds.masks.reshape(len(ds.masks), -1).any(axis=1))
        return ds


def sample_batch(n_slices: int, stroke_idx, batch_size: int, rng: np.random.Generator,
                 stroke_prob: float = 0.5) -> np.ndarray:
    """Indices of one batch: each draw picks the stroke pool with ``stroke_prob``, else all slices."""
    stroke_idx = np.asarray(stroke_idx)
    out = np.empty(batch_size, dtype=np.int64)
    for i in range(batch_size):
        coin = rng.random() < stroke_prob
        if coin and stroke_idx.size:
            out[i] = stroke_idx[rng.integers(stroke_idx.size)]
        else:
            out[i] = rng.integers(n_slices)
    return out


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentParams:
    k90: int = 0
    flip_lr: bool = False
    flip_ud: bool = False
    scale: float = 1.0
    angle_deg: float = 0.0


def sample_augment(rng: np.random.Generator, cfg: TrainConfig | None = None) -> AugmentParams:
    cfg = cfg or TrainConfig()
    # always draw every variate so toggles don't shift the random stream
    k90 = int(rng.integers(4))
    flip_lr = bool(rng.random() < 0.5)
    flip_ud = bool(rng.random() < 0.5)
    scale = float(rng.uniform(0.9, 1.1))
    angle = float(rng.uniform(-45.0, 45.0))
    return AugmentParams(k90 if cfg.aug_rot90 else 0,
                         flip_lr and cfg.aug_flip, flip_ud and cfg.aug_flip,
                         scale if cfg.aug_scale else 1.0, angle if cfg.aug_rotate else 0.0)


def _affine(img, matrix, order):
    c = (np.array(img.shape) - 1) / 2.0
    offset = c - matrix @ c
    return ndimage.affine_transform(img, matrix, offset=offset, order=order, mode="constant", cval=0.0)


def apply_augment(image: np.ndarray, mask: np.ndarray, params: AugmentParams):
    """Rot90, flips, then scale and rotation about the centre (bilinear image, nearest mask)."""
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"augment expects square slices, got {image.shape}")
    if mask.shape != image.shape:
        raise ValueError(f"mask {mask.shape} does not match slice {image.shape}")
    img, msk = image, mask
    if params.k90 % 4:
        img, msk = np.rot90(img, params.k90), np.rot90(msk, params.k90)
    if params.flip_lr:
        img, msk = img[:, ::-1], msk[:, ::-1]
    if params.flip_ud:
        img, msk = img[::-1], msk[::-1]
    if params.scale != 1.0 or params.angle_deg != 0.0:
        a = math.radians(params.angle_deg)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        # output->input map: undo rotation, then undo scaling
        matrix = rot.T / params.scale
        img = _affine(np.asarray(img, dtype=np.float64), matrix, 1)
        msk = _affine(np.asarray(msk), matrix, 0)
    return (np.ascontiguousarray(img, dtype=np.float32),
            np.ascontiguousarray(msk, dtype=np.uint8))


def augment(image, mask, rng, cfg: TrainConfig | None = None):
    return apply_augment(image, mask, sample_augment(rng, cfg))


# ---------------------------------------------------------------- training

def masks_to_targets(masks: np.ndarray) -> np.ndarray:
    """[N,H,W] labels -> [N,2,H,W] binary targets (ischemic, hemorrhagic)."""
    return np.stack([masks == ISCHEMIC, masks == HEMORRHAGIC], axis=1).astype(np.float32)


def predict_volume(predictor, image: np.ndarray, projection=Projection.AXIAL) -> np.ndarray:
    """(2, D, H, W) probabilities for an axial-ordered volume using slices of ``projection``."""
    stack = reslice_array(image, projection)
    probs = np.asarray(predictor(stack[:, None]))
    return np.stack([unreslice_array(probs[:, c], projection) for c in range(probs.shape[1])])


def validation_iou(predictor, val_cases, projection=Projection.AXIAL, threshold: float = 0.5) -> float:
    """Mean over lesion patients of the IoU on each patient's ground-truth class."""
    scores = []
    for case in val_cases:
        if case.cls == "healthy":
            continue
        probs = predict_volume(predictor, case.image, projection)
        ch, lab = (0, ISCHEMIC) if case.cls == "ischemic" else (1, HEMORRHAGIC)
        scores.append(iou(probs[ch] > threshold, case.labels == lab))
    return float(np.mean(scores)) if scores else float("nan")


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    best: Checkpoint
    losses: list[float]
    model: SegModel

    def summary(self) -> dict:
        return {"best_step": self.best.step, "best_val_iou": self.best.val_iou,
                "checkpoints": [{"step": c.step, "val_iou": c.val_iou, "loss": c.loss}
                                for c in self.checkpoints]}


def train(config: TrainConfig, dataset: SliceDataset, val_cases, model: SegModel,
          progress=None) -> TrainResult:
    """Run the training schedule and return every checkpoint plus the best one (loaded into ``model``)."""
    params = model.named_parameters()
    state = T.OptimState(lr0=config.lr0, decay=config.lr_decay, rho=config.rmsprop_rho, eps=config.rmsprop_eps)
    checkpoints: list[Checkpoint] = []
    losses: list[float] = []
    window: list[float] = []
    model.train()
    for step in range(1, config.steps + 1):
        rng = np.random.default_rng([config.seed, step])
        idx = sample_batch(len(dataset), dataset.stroke, config.batch_size, rng, config.stroke_sample_prob)
        xs, ms = [], []
        for i in idx:
            x, m = augment(dataset.images[i], dataset.masks[i], rng, config)
            xs.append(x)
            ms.append(m)
        x = T.Tensor(np.stack(xs)[:, None])
        y = masks_to_targets(np.stack(ms))
        loss = T.focal_loss(model.logits(x), y, config.focal_gamma, config.focal_alpha)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(step, f"non-finite loss {value}")
        T.zero_grads(params.values())
        loss.backward()
        T.rmsprop_step(params, state)
        losses.append(value)
        window.append(value)
        if step % config.eval_every == 0:
            v = validation_iou(model, val_cases, dataset.projection) if val_cases else float("nan")
            ck = Checkpoint(step, v, float(np.mean(window)), model.state_dict())
            checkpoints.append(ck)
            window = []
            model.train()
            log.info("step %d loss %.5f val_iou %.4f lr %.3g", step, ck.loss, v, state.lr)
            if progress:
                progress(ck)
    if not checkpoints:
        checkpoints.append(Checkpoint(config.steps, float("nan"), float(np.mean(window or [np.nan])),
                                      model.state_dict()))
    # without validation data the last checkpoint is the only sensible pick
    best = select_best(checkpoints, 1, key=lambda c: c.val_iou)[0] if val_cases else checkpoints[-1]
    model.load_state_dict(best.state)
    model.eval()
    return TrainResult(checkpoints, best, losses, model)


def save_run(directory, result: TrainResult, config: TrainConfig, extra: dict | None = None) -> None:
    """Write the selected weights plus a JSON record of the checkpoint history."""
    os.makedirs(directory, exist_ok=True)
    result.model.save(directory, step=result.best.step, extra={"val_iou": result.best.val_iou})
    record = {"train_config": config.to_dict(), **result.summary()}
    if extra:
        record.update(extra)
    with open(os.path.join(directory, "checkpoints.json"), "w") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------- inference helpers

def _key(item):
    v = item.val_iou if isinstance(item, Checkpoint) else item
    return -np.inf if v is None or (isinstance(v, float) and math.isnan(v)) else v


def select_best(candidates, k: int, key=None):
    """Top-``k`` candidates by descending score; ties keep the earlier one."""
    items = list(candidates)
    if not items:
        raise ValueError("select_best: no candidates")
    if not 1 <= k <= len(items):
        raise ValueError(f"select_best: k={k} outside [1, {len(items)}]")
    key = key or _key
    scores = [key(c) for c in items]
    scores = [-np.inf if s is None or (isinstance(s, float) and math.isnan(s)) else s for s in scores]
    order = sorted(range(len(items)), key=lambda i: (-scores[i], i))
    return [items[i] for i in order[:k]]


def tta_predict(model, slices: np.ndarray) -> np.ndarray:
    """Average of predictions on the original, left-right and up-down flipped slices."""
    x = np.asarray(slices, dtype=np.float32)
    base = np.asarray(model(x), dtype=np.float64)
    lr = np.asarray(model(np.ascontiguousarray(x[..., ::-1])), dtype=np.float64)[..., ::-1]
    ud = np.asarray(model(np.ascontiguousarray(x[..., ::-1, :])), dtype=np.float64)[..., ::-1, :]
    return ((base + lr + ud) / 3.0).astype(np.float32)


class TTA:
    """Wrap a predictor so calling it applies flip test-time augmentation."""

    def __init__(self, model):
        self.model = model

    def __call__(self, slices):
        return tta_predict(self.model, slices)


def ensemble_predict(models, slices: np.ndarray) -> np.ndarray:
    """Unweighted mean of member probability maps."""
    models = list(models)
    if not models:
        raise ValueError("ensemble_predict: empty model list")
    acc = None
    for m in models:
        p = np.asarray(m(slices), dtype=np.float64)
        acc = p if acc is None else acc + p
    return (acc / len(models)).astype(np.float32)


class Ensemble:
    def __init__(self, models):
        if not models:
            raise ValueError("Ensemble: empty model list")
        self.models = list(models)

    def __call__(self, slices):
        return ensemble_predict(self.models, slices)
