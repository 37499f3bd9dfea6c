"""Training-time guidance that aligns BEV features with the scene's content.

Two signals, both dropped entirely at inference so the deployed detector is
byte-for-byte the plain one:

* Contrastive BEV alignment.  Each instance is encoded to a C-vector from
  its class one-hot and normalized box row (``gt_encode``), and a matching
  C-vector is average-pooled from the BEV cells under the instance's
  footprint (``crop_pool``).  The score matrix between the L2-normalized
  rows, scaled by a learned temperature, is pushed toward the identity by
  symmetric cross-entropy over rows and columns.

* Ground-truth query decoding.  The encoded instances run through the same
  decoder and head as the learned queries, as their own isolated query set
  (padding rows are masked out of self-attention).  Row i is supervised
  directly by instance i, so no matching step is involved, and gradients
  reach the decoder and head but never the learned query embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import FEATURE_DIM, instance_features, regression_targets
from .matching import BOX_WEIGHT
from .model import (Detector, HeadOutput, ModelConfig, decode, head,
                    _trunc_normal)
from .scene import Geometry, GtInstance, GtScene

__all__ = [
    "Guidance", "init_guidance", "gt_encode", "footprint_cells", "crop_pool",
    "object_features", "contrastive_loss", "gt_query_decode", "gtqi_loss",
    "LOGIT_SCALE_INIT", "LOGIT_SCALE_MAX",
]

# temperature starts at exp(2.659) ~ 14.3 and is capped at 100
LOGIT_SCALE_INIT = 2.659
LOGIT_SCALE_MAX = 100.0


@dataclass
class Guidance:
    """Parameters that exist only while training with guidance enabled."""

    seed: int
    params: dict = field(default_factory=dict)


def init_guidance(config: ModelConfig, seed: int, dtype=np.float32) -> Guidance:
    rng = np.random.default_rng(np.random.PCG64(seed))
    c = config.embed_dim
    f = config.ffn_width
    g = Guidance(seed=seed)

    def weight(name, shape):
        g.params[name] = Tensor(_trunc_normal(rng, shape).astype(dtype),
                                requires_grad=True)

    weight("gt_enc.w1", (FEATURE_DIM, f))
    g.params["gt_enc.b1"] = Tensor(np.zeros(f, dtype=dtype), requires_grad=True)
    weight("gt_enc.w2", (f, c))
    g.params["gt_enc.b2"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
    g.params["logit_scale"] = Tensor(
        np.full((1,), LOGIT_SCALE_INIT, dtype=dtype), requires_grad=True)
    return g


def gt_encode(guidance: Guidance, instances: Sequence[GtInstance],
              geometry: Geometry) -> Tensor:
    """Encode instances to (N, C) rows: one-hot class and normalized box
    through a two-layer FFN."""
    p = guidance.params
    feats = instance_features(instances, geometry).astype(p["gt_enc.w1"].dtype)
    h = ad.relu(ad.linear(Tensor(feats), p["gt_enc.w1"], p["gt_enc.b1"]))
    return ad.linear(h, p["gt_enc.w2"], p["gt_enc.b2"])


def footprint_cells(instance: GtInstance, geometry: Geometry) -> list[int]:
    """Flat BEV indices whose cell centers lie in the instance's footprint.

    The footprint is the axis-aligned bounding rectangle of the yaw-rotated
    (width, length) box.  Falls back to the single cell containing the box
    center, so the result is never empty.  Flat index = iy * bev_w + ix with
    ix counting cells along +x and iy along +y from the range corner.
    """
    r = geometry.range_m
    cw, ch = geometry.cell_w, geometry.cell_h
    cx, cy = instance.center[0], instance.center[1]
    w, l = instance.size[0], instance.size[1]
    cos_t = abs(np.cos(instance.yaw))
    sin_t = abs(np.sin(instance.yaw))
    # length runs along the heading, width across it
    hx = 0.5 * (l * cos_t + w * sin_t)
    hy = 0.5 * (l * sin_t + w * cos_t)
    cells = []
    for iy in range(geometry.bev_h):
        yc = -r + (iy + 0.5) * ch
        if abs(yc - cy) > hy:
            continue
        for ix in range(geometry.bev_w):
            xc = -r + (ix + 0.5) * cw
            if abs(xc - cx) <= hx:
                cells.append(iy * geometry.bev_w + ix)
    if not cells:
        ix = min(max(int((cx + r) / cw), 0), geometry.bev_w - 1)
        iy = min(max(int((cy + r) / ch), 0), geometry.bev_h - 1)
        cells.append(iy * geometry.bev_w + ix)
    return cells


def crop_pool(z_scene: Tensor, instance: GtInstance,
              geometry: Geometry) -> Tensor:
    """Average the (H_b*W_b, C) BEV rows under one instance's footprint."""
    return ad.mean_pool(z_scene, footprint_cells(instance, geometry))


def object_features(z_scene: Tensor, instances: Sequence[GtInstance],
                    geometry: Geometry) -> Tensor:
    """Stack crop-pooled vectors into (N, C), one row per instance."""
    c = z_scene.shape[-1]
    rows = [ad.reshape(crop_pool(z_scene, inst, geometry), (1, c))
            for inst in instances]
    return ad.concat(rows, axis=0)


def contrastive_loss(alpha: Tensor, beta: Tensor, logit_scale: Tensor) -> Tensor:
    """Symmetric cross-entropy pulling the (N, N) score matrix toward I.

    ``alpha`` holds the pooled BEV rows, ``beta`` the encoded instances;
    both are row-normalized here.  A single instance gives exactly zero (a
    softmax over one logit is certain), and the roles of the two sides are
    interchangeable.
    """
    if alpha.shape != beta.shape or alpha.ndim != 2:
        raise ad.ShapeError(
            f"contrastive_loss: rows disagree, {alpha.shape} vs {beta.shape}")
    n = alpha.shape[0]
    if n == 0:
        return Tensor(np.zeros((), dtype=alpha.dtype))
    scale = ad.clamp_max(ad.exp(logit_scale), LOGIT_SCALE_MAX)
    m = ad.scale_by(ad.matmul(ad.l2_normalize(alpha),
                              ad.transpose(ad.l2_normalize(beta))), scale)
    target = np.arange(n)
    return ad.scale(ad.add(ad.cross_entropy(m, target),
                           ad.cross_entropy(ad.transpose(m), target)), 0.5)


def gt_query_decode(det: Detector, z_bev: Tensor,
                    betas: Sequence[Tensor | None]) -> list[HeadOutput | None]:
    """Run per-scene encoded instances through the shared decoder and head.

    ``betas[s]`` is the (N_s, C) query set for scene s, or None/empty to
    skip.  All live scenes decode as one padded batch; padding rows are
    masked out of self-attention so each scene's rows see only each other.
    Returns one HeadOutput per scene, aligned with ``betas``.
    """
    live = [s for s, b in enumerate(betas)
            if b is not None and b.shape[0] > 0]
    out: list[HeadOutput | None] = [None] * len(betas)
    if not live:
        return out
    c = det.config.embed_dim
    width = max(betas[s].shape[0] for s in live)
    dtype = det.params["query_emb"].dtype
    padded = []
    self_mask = np.zeros((len(live), width), dtype=bool)
    for row, s in enumerate(live):
        b = betas[s]
        n = b.shape[0]
        self_mask[row, :n] = True
        if n < width:
            b = ad.concat([b, Tensor(np.zeros((width - n, c), dtype=dtype))],
                          axis=0)
        padded.append(ad.reshape(b, (1, width, c)))
    z = ad.concat([ad.reshape(ad.index_batch(z_bev, s), (1,) + z_bev.shape[1:])
                   for s in live], axis=0)
    informed = decode(det, z, ad.concat(padded, axis=0), self_mask=self_mask)
    for row, s in enumerate(live):
        rows = ad.slice_rows(ad.index_batch(informed, row),
                             0, betas[s].shape[0])
        out[s] = head(det, rows)
    return out


def gtqi_loss(preds: HeadOutput, scene: GtScene, geometry: Geometry) -> Tensor:
    """Direct row-for-row supervision of decoded ground-truth queries.

    Same per-instance terms as a matched learned query (class and attribute
    cross-entropy plus weighted box L1), averaged over the scene's
    instances; alignment is positional, so there is no matching step.
    """
    n = len(scene.instances)
    if n == 0 or preds.class_logits.shape[0] != n:
        raise ad.ShapeError(
            f"gtqi_loss: {preds.class_logits.shape[0]} prediction rows for "
            f"{n} instances")
    cls_t = np.array([i.class_id for i in scene.instances], dtype=np.int64)
    attr_t = np.array([i.attribute_id for i in scene.instances], dtype=np.int64)
    targets = regression_targets(scene.instances, geometry).astype(
        preds.boxes.dtype)
    loss = ad.cross_entropy(preds.class_logits, cls_t, reduction="sum")
    loss = ad.add(loss, ad.cross_entropy(preds.attr_logits, attr_t,
                                         reduction="sum"))
    diff = ad.sub(preds.boxes, Tensor(targets))
    loss = ad.add(loss, ad.scale(ad.sum_all(ad.absolute(diff)), BOX_WEIGHT))
    return ad.scale(loss, 1.0 / n)
