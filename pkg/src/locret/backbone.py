"""Toy convolutional backbone and the full embedding model.

The embedding pipeline is backbone, channel gating, selective context,
attentional localization, generalized-mean pooling, a final projection,
and L2 normalization; any of the middle stages can be switched off in the
head config. The backbone is three blocks of 3x3 conv + relu + 2x2
stride-2 pooling, so the output spatial extent is ceil(input / 8).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import ckt
from .descriptors import Descriptor
from .head import (
    AttentionPool,
    HeadConfig,
    Layer,
    MaskedLocalization,
    SCBlock,
    SEBlock,
    WhitenTransform,
    whiten_apply,
)
from .layers import AvgPool2, Conv2d, GeMPool, L2Normalize, Linear, ReLU, _as_f64

MIN_IMAGE_EXTENT = 8
MULTIRES_SCALES = (0.4, 0.5, 0.7, 1.0, 1.4)


# ---------------------------------------------------------------------------
# image plumbing


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit PPM/PNG file to (h, w, 3) floats in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_image(path: str | Path, img: np.ndarray) -> None:
    arr = np.clip(_as_f64(img), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the half-pixel-center (align_corners=false)
    convention; the one resize used everywhere so index and query paths
    agree."""
    img = _as_f64(img)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    if out_h == h and out_w == w:
        out = img
    else:
        ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
        xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
        y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
        x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
        wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
        top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
        bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
        out = top * (1 - wy) + bot * wy
    return out[:, :, 0] if squeeze else out


def crop_image(img: np.ndarray, rect: tuple[int, int, int, int]) -> np.ndarray:
    """Crop (x, y, w, h) in pixel coordinates, clamped to the image."""
    x, y, w, h = (int(v) for v in rect)
    ih, iw = img.shape[:2]
    x0, y0 = max(0, x), max(0, y)
    x1, y1 = min(iw, x + w), min(ih, y + h)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"crop rect {rect} does not intersect image of {iw}x{ih}")
    return img[y0:y1, x0:x1]


# ---------------------------------------------------------------------------
# backbone


class ConvBlock(Layer):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.conv = Conv2d(in_ch, out_ch, 3, padding=1, rng=rng)
        self.relu = ReLU()
        self.pool = AvgPool2()

    def params(self):
        return {"conv.w": self.conv.w, "conv.b": self.conv.b}

    def forward(self, x):
        z, c1 = self.conv.forward(x)
        r, c2 = self.relu.forward(z)
        y, c3 = self.pool.forward(r)
        return y, (c1, c2, c3)

    def backward(self, cache, gy):
        c1, c2, c3 = cache
        gr, _ = self.pool.backward(c3, gy)
        gz, _ = self.relu.backward(c2, gr)
        gx, gc = self.conv.backward(c1, gz)
        return gx, {"conv.w": gc["w"], "conv.b": gc["b"]}


class ToyBackbone(Layer):
    """Three conv blocks, channels 3 -> 16 -> 32 -> out_channels."""

    def __init__(self, out_channels: int = 32, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        widths = [3, 16, 32, out_channels]
        self.blocks = [ConvBlock(widths[i], widths[i + 1], rng) for i in range(3)]
        self.out_channels = out_channels

    def params(self):
        out = {}
        for i, blk in enumerate(self.blocks):
            for k, v in blk.params().items():
                out[f"block{i}.{k}"] = v
        return out

    def forward(self, x):
        caches = []
        y = _as_f64(x)
        for blk in self.blocks:
            y, c = blk.forward(y)
            caches.append(c)
        return y, caches

    def backward(self, caches, gy):
        grads = {}
        g = gy
        for i in reversed(range(len(self.blocks))):
            g, gb = self.blocks[i].backward(caches[i], g)
            for k, v in gb.items():
                grads[f"block{i}.{k}"] = v
        return g, grads


# ---------------------------------------------------------------------------
# full model


@dataclass
class EmbeddingModel:
    """Composed embedding network with optional whitening at the output."""

    backbone: ToyBackbone
    cfg: HeadConfig
    se: SEBlock | None
    sc: SCBlock | None
    loc: MaskedLocalization | None
    attn_pool: AttentionPool | None
    gem: GeMPool
    fc: Linear
    frozen_backbone: bool = False
    whiten: WhitenTransform | None = None

    @classmethod
    def build(cls, cfg: HeadConfig, backbone_channels: int = 32,
              seed: int = 0) -> "EmbeddingModel":
        rng = np.random.default_rng(seed)
        backbone = ToyBackbone(backbone_channels, rng=rng)
        c = backbone_channels
        se = SEBlock(c, rng=rng) if cfg.use_backbone_enhancement else None
        sc = SCBlock(c, rng=rng) if cfg.use_selective_context else None
        loc = attn_pool = None
        if cfg.pooling_variant == "attention":
            attn_pool = AttentionPool(c, variant="gem", gem_p=cfg.gem_p, rng=rng)
        elif cfg.use_attentional_localization:
            loc = MaskedLocalization(c, cfg)
        # orthogonal projection preserves the cosine geometry of the pooled
        # features; a plain gaussian init would warp angles by its condition
        fc = Linear(c, cfg.embed_dim, rng=rng)
        gauss = rng.normal(size=(max(c, cfg.embed_dim), max(c, cfg.embed_dim)))
        q, _ = np.linalg.qr(gauss)
        fc.w = q[: cfg.embed_dim, :c].copy()
        return cls(backbone=backbone, cfg=cfg, se=se, sc=sc, loc=loc,
                   attn_pool=attn_pool, gem=GeMPool(cfg.gem_p), fc=fc)

    # -- parameters -------------------------------------------------------

    def named_params(self) -> dict[str, np.ndarray]:
        out = {f"backbone.{k}": v for k, v in self.backbone.params().items()}
        for prefix, mod in (("se", self.se), ("sc", self.sc),
                            ("loc", self.loc), ("attn_pool", self.attn_pool)):
            if mod is not None:
                out.update({f"{prefix}.{k}": v for k, v in mod.params().items()})
        out.update({f"fc.{k}": v for k, v in self.fc.params().items()})
        return out

    def head_param_names(self) -> list[str]:
        return [k for k in self.named_params() if not k.startswith("backbone.")]

    # -- forward/backward -------------------------------------------------

    def forward_embed(self, image: np.ndarray,
                      rng: np.random.Generator | None = None):
        """Full forward pass; returns the unit descriptor and caches.

        Pass ``rng`` only during training so the randomized mask
        background is resampled; inference keeps it frozen at zero.
        """
        image = _as_f64(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) image, got shape {image.shape}")
        if min(image.shape[:2]) < MIN_IMAGE_EXTENT:
            raise ValueError(
                f"image extent {image.shape[:2]} below minimum {MIN_IMAGE_EXTENT}")
        caches: dict[str, object] = {}
        f, caches["backbone"] = self.backbone.forward(image)
        if self.se is not None:
            f, caches["se"] = self.se.forward(f)
        if self.sc is not None:
            f, caches["sc"] = self.sc.forward(f)
        if self.attn_pool is not None:
            v, caches["attn_pool"] = self.attn_pool.forward(f)
        else:
            if self.loc is not None:
                f, caches["loc"] = self.loc.forward(f, rng=rng)
            v, caches["gem"] = self.gem.forward(f)
        z, caches["fc"] = self.fc.forward(v)
        norm = L2Normalize()
        u, caches["norm"] = norm.forward(z)
        caches["_norm_layer"] = norm
        return u, caches

    def backward_embed(self, caches, gu):
        """Backprop a descriptor gradient; returns (image_grad, param_grads).

        With ``frozen_backbone`` the walk stops above the backbone: its
        parameters receive no gradient entries and the image gradient is
        None.
        """
        grads: dict[str, np.ndarray] = {}
        gz, _ = caches["_norm_layer"].backward(caches["norm"], gu)
        gv, gfc = self.fc.backward(caches["fc"], gz)
        grads.update({f"fc.{k}": v for k, v in gfc.items()})
        if self.attn_pool is not None:
            gf, gp = self.attn_pool.backward(caches["attn_pool"], gv)
            grads.update({f"attn_pool.{k}": v for k, v in gp.items()})
        else:
            gf, _ = self.gem.backward(caches["gem"], gv)
            if self.loc is not None:
                gf, gl = self.loc.backward(caches["loc"], gf)
                grads.update({f"loc.{k}": v for k, v in gl.items()})
        if self.sc is not None:
            gf, gs = self.sc.backward(caches["sc"], gf)
            grads.update({f"sc.{k}": v for k, v in gs.items()})
        if self.se is not None:
            gf, ge = self.se.backward(caches["se"], gf)
            grads.update({f"se.{k}": v for k, v in ge.items()})
        if self.frozen_backbone:
            return None, grads
        gimage, gb = self.backbone.backward(caches["backbone"], gf)
        grads.update({f"backbone.{k}": v for k, v in gb.items()})
        return gimage, grads

    def attention_of(self, image: np.ndarray) -> np.ndarray:
        """Attention map at feature resolution for a single image."""
        if self.loc is None:
            raise ValueError("model has no mask-based localization stage")
        image = _as_f64(image)
        f, _ = self.backbone.forward(image)
        if self.se is not None:
            f, _ = self.se.forward(f)
        if self.sc is not None:
            f, _ = self.sc.forward(f)
        return self.loc.attention(f)


def embed(model: EmbeddingModel, image: np.ndarray, image_id: str = "",
          category_id: str | None = None) -> Descriptor:
    """Embed one image to a unit-norm descriptor (whitening if attached)."""
    u, _ = model.forward_embed(image)
    if model.whiten is not None:
        u = whiten_apply(u, model.whiten)
    return Descriptor(image_id=image_id, category_id=category_id, vector=u)


def embed_multires(model: EmbeddingModel, image: np.ndarray,
                   scales=MULTIRES_SCALES, image_id: str = "",
                   category_id: str | None = None) -> Descriptor:
    """Average per-scale descriptors over resized copies, then renormalize.

    Scales that shrink an extent below the model minimum are skipped with
    a warning; if every scale is skipped that is an error.
    """
    image = _as_f64(image)
    h, w = image.shape[:2]
    vecs = []
    for s in scales:
        if s <= 0:
            raise ValueError(f"scale {s} must be positive")
        nh, nw = int(round(h * s)), int(round(w * s))
        if min(nh, nw) < MIN_IMAGE_EXTENT:
            warnings.warn(f"scale {s} gives {nh}x{nw}, below the {MIN_IMAGE_EXTENT}px "
                          "minimum; skipped")
            continue
        vecs.append(embed(model, resize_bilinear(image, nh, nw)).vector)
    if not vecs:
        raise ValueError("all scales were skipped; nothing to embed")
    mean = np.mean(vecs, axis=0)
    mean = mean / np.linalg.norm(mean)
    return Descriptor(image_id=image_id, category_id=category_id, vector=mean)


# ---------------------------------------------------------------------------
# checkpointing


def save_model(path: str | Path, model: EmbeddingModel,
               backbone_channels: int | None = None) -> None:
    path = Path(path)
    ckt.write_bundle(path, model.named_params())
    manifest = {
        "head_config": json.loads(model.cfg.to_json()),
        "backbone_channels": model.backbone.out_channels,
        "frozen_backbone": model.frozen_backbone,
        "whiten": None,
    }
    if model.whiten is not None:
        manifest["whiten"] = {
            "mean": model.whiten.mean.tolist(),
            "basis": model.whiten.basis.tolist(),
            "eigvals": model.whiten.eigvals.tolist(),
        }
    with open(path.with_suffix(path.suffix + ".manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_model(path: str | Path) -> EmbeddingModel:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = HeadConfig.from_json(json.dumps(manifest["head_config"]))
    model = EmbeddingModel.build(cfg, backbone_channels=manifest["backbone_channels"])
    model.frozen_backbone = manifest["frozen_backbone"]
    params = ckt.read_bundle(path)
    live = model.named_params()
    for name, value in params.items():
        if name not in live:
            raise ValueError(f"checkpoint tensor {name!r} has no slot in the model")
        if live[name].shape != value.shape:
            raise ValueError(f"checkpoint tensor {name!r} shape {value.shape} != "
                             f"model {live[name].shape}")
        live[name][...] = value
    if manifest["whiten"] is not None:
        wz = manifest["whiten"]
        model.whiten = WhitenTransform(
            mean=np.array(wz["mean"]), basis=np.array(wz["basis"]),
            eigvals=np.array(wz["eigvals"]))
    return model
