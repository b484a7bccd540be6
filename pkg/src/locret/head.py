"""Attention-localized retrieval head.

The head turns a backbone feature map into a compact map of the same shape
that keeps the object and suppresses background, with no location labels:
a 1x1 conv projects the map to one channel, softplus and min-max
normalization produce an attention map in [0, 1], a bank of increasing
thresholds turns it into masks whose background cells get a (possibly
randomized) value, and the masked copies of the features are fused by a
learnable convex combination. Also here: the channel-gating enhancement
block, the multi-dilation context block, the mask-free cross-attention
pooling baseline, PCA whitening, and bounding boxes of mask components.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .layers import (
    Array,
    Conv2d,
    Fuse,
    GeMPool,
    Layer,
    Linear,
    MinMaxNorm,
    ReLU,
    RMSNorm,
    ShapeError,
    Softplus,
    _as_f64,
    sigmoid,
    softplus,
)

# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class FixedBackground:
    """Constant mask background value in [0, 1]."""

    value: float = 0.0


@dataclass(frozen=True)
class ClippedGaussian:
    """Mask background drawn per position as clip(N(mean, std^2), 0, 1)."""

    mean: float = 0.1
    std: float = 0.9


BackgroundMode = FixedBackground | ClippedGaussian


def uniform_thresholds(count: int) -> tuple[float, ...]:
    """Evenly spaced thresholds i/(count+1) covering the attention range."""
    if count < 1:
        raise ValueError("need at least one threshold")
    return tuple(i / (count + 1) for i in range(1, count + 1))


@dataclass
class HeadConfig:
    num_masks: int = 2
    thresholds: tuple[float, ...] | str = "uniform"
    background: BackgroundMode = field(default_factory=ClippedGaussian)
    gem_p: float = 3.0
    embed_dim: int = 2048
    use_backbone_enhancement: bool = True
    use_selective_context: bool = True
    use_attentional_localization: bool = True
    pooling_variant: str = "mask"  # "mask" | "attention"

    def __post_init__(self):
        if self.num_masks < 1:
            raise ValueError("num_masks must be >= 1")
        if self.gem_p < 1:
            raise ValueError("gem_p must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.pooling_variant not in ("mask", "attention"):
            raise ValueError(f"unknown pooling variant {self.pooling_variant!r}")
        taus = self.resolved_thresholds()
        if any(not (0.0 < t < 1.0) for t in taus):
            raise ValueError(f"thresholds must lie in (0, 1), got {taus}")
        if list(taus) != sorted(set(taus)):
            raise ValueError(f"thresholds must be strictly increasing, got {taus}")

    def resolved_thresholds(self) -> tuple[float, ...]:
        if self.thresholds == "uniform":
            return uniform_thresholds(self.num_masks)
        taus = tuple(float(t) for t in self.thresholds)
        if len(taus) != self.num_masks:
            raise ValueError(f"{len(taus)} thresholds for {self.num_masks} masks")
        return taus

    def to_json(self) -> str:
        d = {
            "num_masks": self.num_masks,
            "thresholds": (self.thresholds if self.thresholds == "uniform"
                           else list(self.resolved_thresholds())),
            "gem_p": self.gem_p,
            "embed_dim": self.embed_dim,
            "use_backbone_enhancement": self.use_backbone_enhancement,
            "use_selective_context": self.use_selective_context,
            "use_attentional_localization": self.use_attentional_localization,
            "pooling_variant": self.pooling_variant,
        }
        if isinstance(self.background, FixedBackground):
            d["background"] = {"mode": "fixed", "value": self.background.value}
        else:
            d["background"] = {"mode": "clipped_gaussian",
                               "mean": self.background.mean, "std": self.background.std}
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "HeadConfig":
        d = json.loads(text)
        bg = d.pop("background", {"mode": "clipped_gaussian", "mean": 0.1, "std": 0.9})
        if bg["mode"] == "fixed":
            background = FixedBackground(bg["value"])
        elif bg["mode"] == "clipped_gaussian":
            background = ClippedGaussian(bg["mean"], bg["std"])
        else:
            raise ValueError(f"unknown background mode {bg['mode']!r}")
        thresholds = d.get("thresholds", "uniform")
        if thresholds != "uniform":
            d["thresholds"] = tuple(thresholds)
        return cls(background=background, **d)


def se_reduction_for(channels: int) -> int:
    """Gating bottleneck ratio: 4 for toy widths, the standard 16 otherwise."""
    return 4 if channels < 64 else 16


# ---------------------------------------------------------------------------
# attention map and masks


class AttentionMap(Layer):
    """1x1 conv to one channel, softplus, then min-max normalization.

    Default init projects the per-position mean channel activation, a
    plain energy map, so an untrained head starts from something sane.
    """

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        self.conv = Conv2d(channels, 1, 1, bias=True)
        if rng is None:
            self.conv.w = np.full_like(self.conv.w, 1.0 / channels)
        else:
            self.conv.w = rng.normal(0.0, 1.0 / np.sqrt(channels), size=self.conv.w.shape)
        self.softplus = Softplus()
        self.norm = MinMaxNorm()

    def params(self):
        return {"conv.w": self.conv.w, "conv.b": self.conv.b}

    def forward(self, fmap):
        z, c1 = self.conv.forward(fmap)
        s, c2 = self.softplus.forward(z[:, :, 0])
        a, c3 = self.norm.forward(s)
        return a, (c1, c2, c3)

    def backward(self, cache, ga):
        c1, c2, c3 = cache
        gs, _ = self.norm.backward(c3, ga)
        gz, _ = self.softplus.backward(c2, gs)
        gf, gconv = self.conv.backward(c1, gz[:, :, None])
        return gf, {"conv.w": gconv["w"], "conv.b": gconv["b"]}


def draw_background(mode: BackgroundMode, shape: tuple[int, int],
                    rng: np.random.Generator | None) -> Array:
    """Per-position background values for one mask."""
    if isinstance(mode, FixedBackground):
        if not (0.0 <= mode.value <= 1.0):
            raise ValueError(f"fixed background {mode.value} outside [0, 1]")
        return np.full(shape, float(mode.value))
    if rng is None:
        raise ValueError("randomized background needs a generator")
    return np.clip(rng.normal(mode.mean, mode.std, size=shape), 0.0, 1.0)


def make_masks(attention: Array, thresholds, background: BackgroundMode,
               seed: int | np.random.Generator | None = 0) -> list[Array]:
    """Threshold the attention map once per threshold.

    Cells at or above the threshold become 1, the rest take the background
    value; randomized backgrounds are drawn independently per position and
    per mask.
    """
    a = _as_f64(attention)
    taus = [float(t) for t in thresholds]
    if taus != sorted(set(taus)):
        raise ValueError(f"thresholds must be strictly increasing, got {taus}")
    if any(not (0.0 <= t <= 1.0) for t in taus):
        raise ValueError(f"thresholds must lie in [0, 1], got {taus}")
    rng = seed if isinstance(seed, np.random.Generator) else \
        (None if seed is None else np.random.default_rng(seed))
    masks = []
    for tau in taus:
        beta = draw_background(background, a.shape, rng)
        masks.append(np.where(a >= tau, 1.0, beta))
    return masks


class MaskedLocalization(Layer):
    """Masked-and-fused feature localization (the mask-based head stage).

    Forward output has the shape of its input. Thresholding is a step
    function, so no gradient flows into the attention projection through
    the masks; the features and the fusion weights do receive gradients.
    With ``rng=None`` the background is frozen to 0 (inference); pass a
    generator to resample the randomized background per forward call.
    """

    def __init__(self, channels: int, cfg: HeadConfig,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.attn = AttentionMap(channels, rng=None)
        self.fuse = Fuse(cfg.num_masks)

    def params(self):
        out = {f"attn.{k}": v for k, v in self.attn.params().items()}
        out["fuse.alphas"] = self.fuse.alphas
        return out

    def forward(self, fmap, rng: np.random.Generator | None = None):
        fmap = _as_f64(fmap)
        a, attn_cache = self.attn.forward(fmap)
        background = self.cfg.background if rng is not None else FixedBackground(0.0)
        masks = make_masks(a, self.cfg.resolved_thresholds(), background, rng)
        masked = [m[:, :, None] * fmap for m in masks]
        y, fuse_cache = self.fuse.forward(masked)
        return y, (fmap, a, masks, fuse_cache)

    def backward(self, cache, gy):
        fmap, a, masks, fuse_cache = cache
        gmasked, gfuse = self.fuse.backward(fuse_cache, gy)
        gf = np.zeros_like(fmap)
        for m, gm in zip(masks, gmasked):
            gf += m[:, :, None] * gm
        grads = {f"attn.{k}": np.zeros_like(v) for k, v in self.attn.params().items()}
        grads["fuse.alphas"] = gfuse["alphas"]
        return gf, grads

    def attention(self, fmap) -> Array:
        a, _ = self.attn.forward(_as_f64(fmap))
        return a


def attention_map(fmap: Array, weight: Array, bias: Array | float = 0.0) -> Array:
    """Functional attention map from explicit 1x1 projection parameters."""
    fmap = _as_f64(fmap)
    layer = AttentionMap(fmap.shape[2])
    layer.conv.w = _as_f64(weight).reshape(1, fmap.shape[2], 1, 1)
    layer.conv.b = np.atleast_1d(_as_f64(bias)).astype(np.float64)
    a, _ = layer.forward(fmap)
    return a


def attentional_localization(fmap: Array, cfg: HeadConfig,
                             seed: int | None = 0,
                             layer: MaskedLocalization | None = None) -> Array:
    """Functional localization pass; builds a default layer unless given one."""
    fmap = _as_f64(fmap)
    if layer is None:
        layer = MaskedLocalization(fmap.shape[2], cfg)
    rng = None if seed is None else np.random.default_rng(seed)
    y, _ = layer.forward(fmap, rng=rng)
    return y


# ---------------------------------------------------------------------------
# backbone enhancement (channel gating)


class SEBlock(Layer):
    """Squeeze-excite channel gating: sigmoid-gated per-channel rescale."""

    def __init__(self, channels: int, reduction: int | None = None,
                 rng: np.random.Generator | None = None):
        if reduction is None:
            reduction = se_reduction_for(channels)
        hidden = max(1, channels // reduction)
        if rng is None:
            rng = np.random.default_rng(0)
        self.fc1 = Linear(channels, hidden, rng=rng)
        self.fc2 = Linear(hidden, channels, rng=rng)
        # zero-init the gate projection: every gate starts at exactly 0.5,
        # a uniform rescale, so an untrained block is geometry-neutral
        self.fc2.w = np.zeros_like(self.fc2.w)
        self.relu = ReLU()

    def params(self):
        return {"fc1.w": self.fc1.w, "fc1.b": self.fc1.b,
                "fc2.w": self.fc2.w, "fc2.b": self.fc2.b}

    def forward(self, fmap):
        fmap = _as_f64(fmap)
        h, w, c = fmap.shape
        pooled = fmap.mean(axis=(0, 1))
        z1, c1 = self.fc1.forward(pooled)
        r, c2 = self.relu.forward(z1)
        z2, c3 = self.fc2.forward(r)
        gates = sigmoid(z2)
        y = fmap * gates[None, None, :]
        return y, (fmap, gates, c1, c2, c3, h * w)

    def backward(self, cache, gy):
        fmap, gates, c1, c2, c3, n = cache
        gy = _as_f64(gy)
        gf = gy * gates[None, None, :]
        ggates = (gy * fmap).sum(axis=(0, 1))
        gz2 = ggates * gates * (1.0 - gates)
        gr, g2 = self.fc2.backward(c3, gz2)
        gz1, _ = self.relu.backward(c2, gr)
        gpooled, g1 = self.fc1.backward(c1, gz1)
        gf += gpooled[None, None, :] / n
        return gf, {"fc1.w": g1["w"], "fc1.b": g1["b"],
                    "fc2.w": g2["w"], "fc2.b": g2["b"]}


def se_enhance(fmap: Array, block: SEBlock) -> Array:
    y, _ = block.forward(fmap)
    return y


# ---------------------------------------------------------------------------
# selective context (multi-dilation branches, learnable fusion)


class SCBlock(Layer):
    """Parallel dilated 3x3 branches fused by a learnable convex combination.

    Each branch is conv, per-channel RMS normalization, relu; padding
    equals the dilation so every branch preserves the spatial extent.
    Branch convs initialize to the identity (center delta per channel)
    plus small noise, so an untrained block passes features through
    nearly unchanged instead of scrambling them.
    """

    def __init__(self, channels: int, dilations: tuple[int, ...] = (1, 2, 3),
                 rng: np.random.Generator | None = None, init_noise: float = 0.02):
        if len(dilations) < 2:
            raise ValueError("selective context needs at least two branches")
        if rng is None:
            rng = np.random.default_rng(0)
        self.convs = [Conv2d(channels, channels, 3, padding=d, dilation=d, rng=rng)
                      for d in dilations]
        for conv in self.convs:
            conv.w = rng.normal(0.0, init_noise, size=conv.w.shape)
            conv.w[np.arange(channels), np.arange(channels), 1, 1] += 1.0
        self.norms = [RMSNorm(channels) for _ in dilations]
        self.relus = [ReLU() for _ in dilations]
        self.fuse = Fuse(len(dilations))

    def params(self):
        out = {}
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            out[f"branch{i}.conv.w"] = conv.w
            out[f"branch{i}.conv.b"] = conv.b
            out[f"branch{i}.norm.gain"] = norm.gain
            out[f"branch{i}.norm.shift"] = norm.shift
        out["fuse.alphas"] = self.fuse.alphas
        return out

    def forward(self, fmap):
        fmap = _as_f64(fmap)
        outs, caches = [], []
        for conv, norm, relu in zip(self.convs, self.norms, self.relus):
            z, cc = conv.forward(fmap)
            zn, cn = norm.forward(z)
            r, cr = relu.forward(zn)
            outs.append(r)
            caches.append((cc, cn, cr))
        y, fc = self.fuse.forward(outs)
        return y, (caches, fc)

    def backward(self, cache, gy):
        caches, fc = cache
        gouts, gfuse = self.fuse.backward(fc, gy)
        gf = None
        grads = {"fuse.alphas": gfuse["alphas"]}
        for i, ((cc, cn, cr), gout) in enumerate(zip(caches, gouts)):
            gzn, _ = self.relus[i].backward(cr, gout)
            gz, gn = self.norms[i].backward(cn, gzn)
            gfi, gc = self.convs[i].backward(cc, gz)
            gf = gfi if gf is None else gf + gfi
            grads[f"branch{i}.conv.w"] = gc["w"]
            grads[f"branch{i}.conv.b"] = gc["b"]
            grads[f"branch{i}.norm.gain"] = gn["gain"]
            grads[f"branch{i}.norm.shift"] = gn["shift"]
        return gf, grads


def selective_context(fmap: Array, block: SCBlock) -> Array:
    y, _ = block.forward(fmap)
    return y


# ---------------------------------------------------------------------------
# mask-free cross-attention pooling baseline


class AttentionPool(Layer):
    """Learnable-query cross-attention pooling over flattened positions.

    The query plays the role of a single learnable token: weights are the
    softmax of its dot products with every position. ``variant="gap"``
    returns the attention-weighted sum of position features exactly;
    ``variant="gem"`` applies generalized-mean pooling to the weighted map.
    """

    def __init__(self, channels: int, variant: str = "gem", gem_p: float = 3.0,
                 rng: np.random.Generator | None = None):
        if variant not in ("gap", "gem"):
            raise ValueError(f"unknown attention-pool variant {variant!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.q = rng.normal(0.0, 1.0 / np.sqrt(channels), size=channels)
        self.variant = variant
        self.gem = GeMPool(gem_p)

    def params(self):
        return {"q": self.q}

    def forward(self, fmap):
        fmap = _as_f64(fmap)
        h, w, c = fmap.shape
        keys = fmap.reshape(h * w, c)
        z = keys @ self.q
        z = z - z.max()
        e = np.exp(z)
        attn = e / e.sum()
        weighted = attn[:, None] * keys
        if self.variant == "gap":
            y = weighted.sum(axis=0)
            return y, (fmap, keys, attn, None)
        wm = weighted.reshape(h, w, c)
        y, gc = self.gem.forward(wm)
        return y, (fmap, keys, attn, gc)

    def backward(self, cache, gy):
        fmap, keys, attn, gem_cache = cache
        h, w, c = fmap.shape
        gy = _as_f64(gy)
        if self.variant == "gap":
            gweighted = np.broadcast_to(gy, (h * w, c))
        else:
            gwm, _ = self.gem.backward(gem_cache, gy)
            gweighted = gwm.reshape(h * w, c)
        gattn = (gweighted * keys).sum(axis=1)
        gkeys = gweighted * attn[:, None]
        # softmax jacobian
        gz = attn * (gattn - float(gattn @ attn))
        gq = keys.T @ gz
        gkeys = gkeys + np.outer(gz, self.q)
        return gkeys.reshape(h, w, c), {"q": gq}


def attention_pool_baseline(fmap: Array, query: Array, variant: str = "gem",
                            gem_p: float = 3.0) -> Array:
    """Functional pooling baseline with an explicit query vector."""
    fmap = _as_f64(fmap)
    layer = AttentionPool(fmap.shape[2], variant=variant, gem_p=gem_p)
    layer.q = _as_f64(query)
    y, _ = layer.forward(fmap)
    return y


# ---------------------------------------------------------------------------
# whitening


@dataclass
class WhitenTransform:
    mean: Array
    basis: Array  # rows scale-rotated eigenvectors: y = basis @ (u - mean)
    eigvals: Array


def whiten_fit(descriptors: Array, shrinkage: float = 1e-6) -> WhitenTransform:
    """Fit PCA whitening with trace-scaled diagonal shrinkage.

    The covariance gets ``shrinkage * trace / d`` added to its diagonal so
    rank-deficient inputs stay invertible.
    """
    x = _as_f64(descriptors)
    if x.ndim != 2:
        raise ShapeError(f"expected (n, d) matrix, got shape {x.shape}")
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"whitening fit needs at least d+1={d + 1} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    lam = shrinkage * np.trace(cov) / d
    cov = cov + lam * np.eye(d)
    evals, evecs = np.linalg.eigh(cov)
    basis = evecs.T / np.sqrt(evals)[:, None]
    return WhitenTransform(mean=mean, basis=basis, eigvals=evals)


def whiten_apply(u: Array, transform: WhitenTransform) -> Array:
    """Whiten and re-normalize a single descriptor."""
    y = transform.basis @ (_as_f64(u) - transform.mean)
    norm = np.linalg.norm(y)
    if norm == 0.0:
        return y
    return y / norm


# ---------------------------------------------------------------------------
# boxes from masks


@dataclass(frozen=True)
class BoundingBox:
    row_min: int
    col_min: int
    row_max: int
    col_max: int

    @property
    def area(self) -> int:
        return (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)


def extract_boxes(mask: Array) -> list[BoundingBox]:
    """Bounding boxes of 4-connected foreground components, area-descending.

    Expects a binary mask: rebuild with a fixed 0 background before calling
    (randomized background draws are not separable from foreground cells).
    Entries are binarized at 0.5; ties in area order resolve by (row, col).
    """
    m = _as_f64(mask) >= 0.5
    if not m.any():
        return []
    labels, count = ndimage.label(m, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    boxes = []
    for sl in ndimage.find_objects(labels):
        boxes.append(BoundingBox(sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1))
    boxes.sort(key=lambda b: (-b.area, b.row_min, b.col_min))
    return boxes
