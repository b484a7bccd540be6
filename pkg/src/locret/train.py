"""End-to-end training: angular-margin loss, schedule, batching, SGD.

The loss puts an additive angular margin on the target class before the
scaled softmax cross-entropy. SGD uses momentum with decoupled weight
decay (with zero data gradient a parameter shrinks by exactly
1 - lr * wd per step). The schedule warms up linearly then follows a
half-cosine. Batches group images of similar aspect ratio so batch
resizing never fights the layout of the originals.

Two regimes: single-stage end-to-end training of everything, or the
two-stage variant that first trains backbone + classifier with the head
bypassed, then freezes the backbone and trains the head alone.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import EmbeddingModel, resize_bilinear
from .layers import SoftmaxCrossEntropy, _as_f64
from .seeds import derive_seed, rng_for
from .toydata import ToySample


@dataclass
class ArcFaceParams:
    """Class weight matrix (rows unit-norm), margin in radians, scale."""

    class_weights: np.ndarray
    margin: float = 0.3
    scale: float = 30.0

    def __post_init__(self):
        if not (0.0 <= self.margin <= 0.5):
            raise ValueError(f"margin {self.margin} outside [0, 0.5]")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        self.renormalize()

    @classmethod
    def init(cls, num_classes: int, dim: int, margin: float = 0.3,
             scale: float = 30.0, seed: int = 0) -> "ArcFaceParams":
        w = rng_for(seed, "arcface").normal(size=(num_classes, dim))
        return cls(class_weights=w, margin=margin, scale=scale)

    def renormalize(self) -> None:
        norms = np.linalg.norm(self.class_weights, axis=1, keepdims=True)
        self.class_weights /= np.maximum(norms, 1e-12)


_COS_CLAMP = 1.0 - 1e-7


def arcface_logits(u: np.ndarray, params: ArcFaceParams, class_id: int):
    """Margin-shifted scaled cosine logits and a cache for backward."""
    u = _as_f64(u)
    w = params.class_weights
    cos = np.clip(w @ u, -_COS_CLAMP, _COS_CLAMP)
    theta_y = math.acos(cos[class_id])
    logits = params.scale * cos.copy()
    logits[class_id] = params.scale * math.cos(theta_y + params.margin)
    return logits, (u, cos, theta_y)


def arcface_logits_backward(cache, glogits, params: ArcFaceParams, class_id: int):
    """Grads of the logits wrt the embedding and the class weights."""
    u, cos, theta_y = cache
    w = params.class_weights
    s = params.scale
    # non-target rows: d logit_j / d cos_j = s
    gcos = s * _as_f64(glogits)
    # target row: d cos(theta+m) / d cos(theta) = sin(theta+m) / sin(theta)
    sin_y = math.sqrt(max(1.0 - cos[class_id] ** 2, 1e-14))
    gcos[class_id] = glogits[class_id] * s * math.sin(theta_y + params.margin) / sin_y
    gu = w.T @ gcos
    gw = np.outer(gcos, u)
    return gu, gw


def arcface_loss(u: np.ndarray, class_id: int, params: ArcFaceParams):
    """Loss plus analytic gradients wrt the embedding and class weights."""
    logits, cache = arcface_logits(u, params, class_id)
    ce = SoftmaxCrossEntropy(class_id)
    loss, ce_cache = ce.forward(logits)
    glogits, _ = ce.backward(ce_cache, 1.0)
    gu, gw = arcface_logits_backward(cache, glogits, params, class_id)
    return float(loss), gu, gw


# ---------------------------------------------------------------------------
# schedule and config


@dataclass
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-5
    warmup_epochs: int = 3
    total_epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    finetune: bool = False
    stage1_epochs: int = 10
    arcface_margin: float = 0.3
    arcface_scale: float = 30.0

    def __post_init__(self):
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup cannot exceed the total epoch budget")


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Learning rate at a global step: linear warm-up then half-cosine."""
    total = config.total_epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch
    if not (0 <= step <= total):
        raise ValueError(f"step {step} outside schedule of {total}")
    if warm > 0 and step <= warm:
        return config.lr * step / warm
    if total == warm:
        return config.lr
    t = (step - warm) / (total - warm)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# batching


ASPECT_EDGES = (0.8, 1.25)


def _bucket_of(width: int, height: int) -> int:
    aspect = width / height
    if aspect < ASPECT_EDGES[0]:
        return 0
    if aspect <= ASPECT_EDGES[1]:
        return 1
    return 2


def group_size_batches(samples: list[ToySample], batch_size: int, seed: int):
    """Partition one epoch into aspect-ratio-homogeneous batches.

    Returns (batches, canonical_shapes): each batch is a list of sample
    indices, and each batch maps to the (h, w) every member is resized to
    (the per-bucket median extent, floored to a multiple of 8).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    buckets: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        h, w = s.image.shape[:2]
        buckets.setdefault(_bucket_of(w, h), []).append(i)
    rng = rng_for(seed, "batches")
    batches, shapes = [], []
    for b in sorted(buckets):
        idx = np.array(buckets[b])
        hs = sorted(samples[i].image.shape[0] for i in idx)
        ws = sorted(samples[i].image.shape[1] for i in idx)
        canon = (max(8, int(np.median(hs)) // 8 * 8),
                 max(8, int(np.median(ws)) // 8 * 8))
        rng.shuffle(idx)
        for start in range(0, len(idx), batch_size):
            batches.append([int(i) for i in idx[start : start + batch_size]])
            shapes.append(canon)
    return batches, shapes


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Momentum SGD with decoupled weight decay over a named param dict."""

    def __init__(self, params: dict[str, np.ndarray], momentum: float,
                 weight_decay: float, no_decay: tuple[str, ...] = ()):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = no_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p in self.params.items():
            g = grads.get(name)
            v = self.velocity[name]
            v *= self.momentum
            if g is not None:
                v -= lr * g
            if self.weight_decay and not any(name.endswith(nd) for nd in self.no_decay):
                p *= 1.0 - lr * self.weight_decay
            p += v


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    loss: float
    attn_iou: float
    lr: float


@dataclass
class TrainResult:
    model: EmbeddingModel
    arcface: ArcFaceParams
    log: list[EpochLog] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    pass


def backbone_checksum(model: EmbeddingModel) -> str:
    h = hashlib.sha256()
    for name in sorted(model.backbone.params()):
        h.update(model.backbone.params()[name].tobytes())
    return h.hexdigest()


def attention_foreground_ratio(model: EmbeddingModel,
                               samples: list[ToySample]) -> float:
    """Mean fraction of attention mass inside the true foreground."""
    ratios = []
    for s in samples:
        a = model.attention_of(s.image)
        mask = resize_bilinear(s.foreground_mask, a.shape[0], a.shape[1]) >= 0.5
        total = float(a.sum())
        if total <= 0:
            ratios.append(0.0)
        else:
            ratios.append(float(a[mask].sum()) / total)
    return float(np.mean(ratios))


def _resized(sample: ToySample, shape: tuple[int, int]) -> np.ndarray:
    if sample.image.shape[:2] == shape:
        return sample.image
    return resize_bilinear(sample.image, shape[0], shape[1])


def _run_stage(model: EmbeddingModel, samples: list[ToySample],
               config: TrainConfig, arcface: ArcFaceParams, *,
               stage: str, epochs: int, log: list[EpochLog],
               measure_attention: bool) -> None:
    params = dict(model.named_params())
    if model.frozen_backbone:
        params = {k: v for k, v in params.items() if not k.startswith("backbone.")}
    params["arcface.class_weights"] = arcface.class_weights
    opt = SGD(params, config.momentum, config.weight_decay,
              no_decay=("fuse.alphas", "arcface.class_weights"))

    steps_per_epoch = len(group_size_batches(samples, config.batch_size, 0)[0])
    sched = replace(config, total_epochs=epochs)
    step = 0
    for epoch in range(epochs):
        batches, shapes = group_size_batches(
            samples, config.batch_size, derive_seed(config.seed, stage, "epoch", epoch))
        losses = []
        for batch, shape in zip(batches, shapes):
            step += 1
            lr = lr_at(min(step, epochs * steps_per_epoch), sched, steps_per_epoch)
            grad_sum: dict[str, np.ndarray] = {}
            gw_sum = np.zeros_like(arcface.class_weights)
            for j, idx in enumerate(batch):
                s = samples[idx]
                rng = rng_for(config.seed, stage, "mask", epoch, step, j)
                u, caches = model.forward_embed(_resized(s, shape), rng=rng)
                loss, gu, gw = arcface_loss(u, s.class_id, arcface)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}")
                losses.append(loss)
                gw_sum += gw
                _, param_grads = model.backward_embed(caches, gu)
                for k, g in param_grads.items():
                    if k in grad_sum:
                        grad_sum[k] += g
                    else:
                        grad_sum[k] = g.copy()
            n = len(batch)
            grads = {k: g / n for k, g in grad_sum.items()}
            grads["arcface.class_weights"] = gw_sum / n
            opt.step(grads, lr)
            arcface.renormalize()
        iou = attention_foreground_ratio(model, samples) if measure_attention else 0.0
        log.append(EpochLog(epoch=len(log), loss=float(np.mean(losses)),
                            attn_iou=iou, lr=lr))


def train(model: EmbeddingModel, samples: list[ToySample],
          config: TrainConfig) -> TrainResult:
    """Train in place and return the model with an epoch-metric log.

    ``finetune=False`` runs a single end-to-end stage. ``finetune=True``
    first trains backbone + classifier with the head stages bypassed,
    then freezes the backbone and trains the head alone.
    """
    classes = sorted({s.class_id for s in samples})
    if len(classes) < 2:
        raise ValueError("training needs at least two classes")
    num_classes = max(classes) + 1
    arcface = ArcFaceParams.init(num_classes, model.cfg.embed_dim,
                                 margin=config.arcface_margin,
                                 scale=config.arcface_scale, seed=config.seed)
    log: list[EpochLog] = []
    measure = model.loc is not None

    if not config.finetune:
        _run_stage(model, samples, config, arcface, stage="single",
                   epochs=config.total_epochs, log=log, measure_attention=measure)
        return TrainResult(model=model, arcface=arcface, log=log)

    # stage 1: classification training of the backbone with the head bypassed
    stage1 = EmbeddingModel(
        backbone=model.backbone, cfg=model.cfg, se=None, sc=None, loc=None,
        attn_pool=None, gem=model.gem, fc=model.fc)
    _run_stage(stage1, samples, config, arcface, stage="stage1",
               epochs=config.stage1_epochs, log=log, measure_attention=False)

    # stage 2: freeze the backbone, train the head
    model.frozen_backbone = True
    _run_stage(model, samples, config, arcface, stage="stage2",
               epochs=config.total_epochs, log=log, measure_attention=measure)
    return TrainResult(model=model, arcface=arcface, log=log)


def write_metrics_csv(path, log: list[EpochLog]) -> None:
    lines = ["epoch,loss,attn_iou,lr"]
    for row in log:
        lines.append(f"{row.epoch},{row.loss:.10f},{row.attn_iou:.10f},{row.lr:.10f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
