"""Transformer BEV detector: view tokens -> BEV grid -> query decoder -> heads.

Data flow for a batch of B scenes:

  view features (V, H_v, W_v, C_in) per scene
    -> per-pixel linear projection to width C, plus a learned embedding and a
       fixed sinusoidal geometry code per view pixel -> tokens (B, T, C)
  learned per-cell BEV embeddings plus the matching
  geometry code seed the grid                       -> z (B, H_b*W_b, C)
  encoder layer x L_enc: cross-attend z over unmasked tokens, self-attend,
  FFN (pre-norm residuals, one output norm per stack) -> z_bev
  learned query embeddings                          -> q (B, N_q, C)
  decoder layer x L_dec: self-attend among queries, cross-attend to z_bev
  (keys carry the BEV cell embeddings and codes), FFN -> q'
  heads on each query row: class logits over K+1 with a trailing no-object
  column, a 2-way attribute branch off the class trunk's hidden layer, and a
  10-d box row whose first two entries are sigmoid-squashed BEV coordinates.

The geometry codes express every location, view pixel or BEV cell alike, as
sinusoids of its world bearing and range fraction, so both sides of the
encoder's cross-attention share one O(1)-magnitude coordinate system from
step zero.  That cross-attention additionally carries a fixed projection
prior on its logits: each cell prefers the pixels its center projects to
under the rendering geometry, the desk-scale analog of calibrated spatial
sampling.  Codes and prior are deterministic functions of rig and geometry
and add no parameters; without them the grid reads a near-uniform mix of
all pixels at init and scene content reaches the detector hundreds of
times weaker than the constant embedding payload.

Masked views contribute no attention keys.  Queries carry no positional
encoding of their own, so decoding is equivariant to query permutation.
Residual blocks are pre-norm: at the pinned sigma 0.02 init a query's only
distinguishing signal is its own small embedding, and post-norm stacks
renormalize it away at every sublayer, which at this scale froze query
specialization entirely.

Parameter inventory for the default configuration (C=32, 4 heads, 2+2
layers, 30 queries, FFN width 64, 6 views of 6x6x16 features, 16x16 BEV):
token projection 544, token embeddings 6912, BEV embeddings 8192, encoder
layers 2x12832 plus an output norm 64, query embeddings 960, decoder
layers 2x12832 plus an output norm 64, heads 5719; 73783 in total.  The
test suite recomputes this closed form from shapes.

Checkpoints: magic "GTBV", a format version, a JSON header carrying the
configuration and tensor shapes, then the raw tensors as little-endian
float32 in header order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .codec import BOX_DIM
from .scene import CameraRig, Geometry, ViewFeatures

__all__ = [
    "ModelConfig", "Detector", "EncodeResult", "HeadOutput", "init_params",
    "bev_encode", "encode_tokens", "view_tokens", "decode", "head",
    "token_geometry", "cell_geometry", "projection_prior",
    "parameter_count", "save_checkpoint", "load_checkpoint",
    "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"GTBV"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    num_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 30
    ffn_width: int = 64
    num_classes: int = 10       # foreground classes; logits get one extra column
    num_attributes: int = 2

    def validate(self):
        if self.embed_dim < 1 or self.embed_dim % self.num_heads:
            raise ValueError(
                f"model config: width {self.embed_dim} not divisible by "
                f"{self.num_heads} heads")
        for name in ("enc_layers", "dec_layers", "num_queries", "ffn_width",
                     "num_classes", "num_attributes"):
            if getattr(self, name) < 1:
                raise ValueError(f"model config: {name} must be positive")


@dataclass
class Detector:
    """Parameter set bound to its configuration and scene geometry."""

    config: ModelConfig
    rig: CameraRig
    geometry: Geometry
    seed: int
    params: dict = field(default_factory=dict)   # name -> Tensor, fixed order

    @property
    def num_tokens(self) -> int:
        return self.rig.views * self.rig.view_h * self.rig.view_w

    @property
    def num_cells(self) -> int:
        return self.geometry.bev_h * self.geometry.bev_w


@dataclass
class EncodeResult:
    z_bev: Tensor                       # (B, H_b*W_b, C)
    all_masked: tuple                   # batch indices that had no live view


@dataclass
class HeadOutput:
    class_logits: Tensor                # (N, K+1)
    attr_logits: Tensor                 # (N, A)
    boxes: Tensor                       # (N, 10)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02):
    """Normal draw with tails beyond 2 sigma redrawn."""
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > 2.0 * std
        if not bad.any():
            return x
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))


def _attention_names(prefix):
    for part in ("q", "k", "v", "o"):
        yield f"{prefix}.{part}.w"
        yield f"{prefix}.{part}.b"


def init_params(config: ModelConfig, rig: CameraRig, geometry: Geometry,
                seed: int, dtype=np.float32) -> Detector:
    """Fresh detector: truncated-normal weights (sigma 0.02), zero biases,
    unit layer-norm gains; bit-deterministic per seed."""
    config.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    c = config.embed_dim
    f = config.ffn_width
    det = Detector(config=config, rig=rig, geometry=geometry, seed=seed)
    tokens = rig.views * rig.view_h * rig.view_w
    cells = geometry.bev_h * geometry.bev_w

    def weight(name, shape):
        det.params[name] = Tensor(
            _trunc_normal(rng, shape).astype(dtype), requires_grad=True)

    def zeros(name, shape):
        det.params[name] = Tensor(np.zeros(shape, dtype=dtype),
                                  requires_grad=True)

    def ones(name, shape):
        det.params[name] = Tensor(np.ones(shape, dtype=dtype),
                                  requires_grad=True)

    def attention(prefix):
        for part in ("q", "k", "v", "o"):
            weight(f"{prefix}.{part}.w", (c, c))
            zeros(f"{prefix}.{part}.b", (c,))

    def ffn(prefix):
        weight(f"{prefix}.w1", (c, f))
        zeros(f"{prefix}.b1", (f,))
        weight(f"{prefix}.w2", (f, c))
        zeros(f"{prefix}.b2", (c,))

    def norm(prefix):
        ones(f"{prefix}.g", (c,))
        zeros(f"{prefix}.b", (c,))

    weight("view_proj.w", (rig.channels, c))
    zeros("view_proj.b", (c,))
    weight("view_pos", (tokens, c))
    weight("bev_pos", (cells, c))
    for j in range(config.enc_layers):
        attention(f"enc{j}.cross")
        attention(f"enc{j}.self")
        ffn(f"enc{j}.ffn")
        for k in (1, 2, 3):
            norm(f"enc{j}.ln{k}")
    norm("enc.out")
    weight("query_emb", (config.num_queries, c))
    for j in range(config.dec_layers):
        attention(f"dec{j}.self")
        attention(f"dec{j}.cross")
        ffn(f"dec{j}.ffn")
        for k in (1, 2, 3):
            norm(f"dec{j}.ln{k}")
    norm("dec.out")
    weight("head.cls.w1", (c, f))
    zeros("head.cls.b1", (f,))
    weight("head.cls.w2", (f, config.num_classes + 1))
    zeros("head.cls.b2", (config.num_classes + 1,))
    weight("head.attr.w", (f, config.num_attributes))
    zeros("head.attr.b", (config.num_attributes,))
    weight("head.box.w1", (c, f))
    zeros("head.box.b1", (f,))
    weight("head.box.w2", (f, BOX_DIM))
    zeros("head.box.b2", (BOX_DIM,))
    return det


def parameter_count(det: Detector) -> int:
    return sum(t.size for t in det.params.values())


# --- fixed geometry codes ---------------------------------------------------

# interleaved (bearing, range) sin/cos pairs, low frequency first, so a
# narrow embedding still keeps the coarse component of both coordinates
GEO_BEARING_FREQS = (1.0, 2.0, 4.0, 8.0)
GEO_RANGE_FREQS = (1.0, 2.0, 3.0, 4.0)

_geo_cache: dict = {}


def _token_polar(rig: CameraRig):
    """(T,) world bearing and far-corner range fraction per view pixel.

    A pixel's bearing is (view + u) * sector width with u the column
    fraction, and its range fraction is the row fraction, mirroring how
    scenes rasterize into views.
    """
    u = np.arange(rig.view_w) / max(rig.view_w - 1, 1)
    theta = (np.arange(rig.views)[:, None, None] + u) * rig.sector_width
    r = (np.arange(rig.view_h) / max(rig.view_h - 1, 1))[None, :, None]
    shape = (rig.views, rig.view_h, rig.view_w)
    return (np.broadcast_to(theta, shape).reshape(-1),
            np.broadcast_to(r, shape).reshape(-1))


def _cell_polar(geometry: Geometry):
    """(H_b*W_b,) bearing and range fraction per BEV cell center, row-major."""
    r = geometry.range_m
    cx = -r + (np.arange(geometry.bev_w) + 0.5) * (2.0 * r / geometry.bev_w)
    cy = -r + (np.arange(geometry.bev_h) + 0.5) * (2.0 * r / geometry.bev_h)
    xx, yy = np.meshgrid(cx, cy)
    theta = np.arctan2(yy, xx) % (2.0 * math.pi)
    r_frac = np.hypot(xx, yy) / (math.sqrt(2.0) * r)
    return theta.reshape(-1), r_frac.reshape(-1)


def _geo_code(theta, r_frac, width, dtype):
    cols = []
    for kb, kr in zip(GEO_BEARING_FREQS, GEO_RANGE_FREQS):
        cols.append(np.sin(kb * theta))
        cols.append(np.cos(kb * theta))
        cols.append(np.sin(math.pi * kr * r_frac))
        cols.append(np.cos(math.pi * kr * r_frac))
    code = np.stack(cols, axis=-1)[..., :width]
    out = np.zeros(theta.shape + (width,), dtype=dtype)
    out[..., : code.shape[-1]] = code
    return out


def token_geometry(rig: CameraRig, embed_dim: int, dtype=np.float32) -> Tensor:
    """(T, C) fixed code for every view pixel, in token order."""
    key = ("tok", rig, embed_dim, np.dtype(dtype).str)
    if key not in _geo_cache:
        theta, r = _token_polar(rig)
        _geo_cache[key] = Tensor(_geo_code(theta, r, embed_dim, dtype))
    return _geo_cache[key]


def cell_geometry(geometry: Geometry, embed_dim: int, dtype=np.float32) -> Tensor:
    """(H_b*W_b, C) fixed code for every BEV cell center, row-major."""
    key = ("cell", geometry, embed_dim, np.dtype(dtype).str)
    if key not in _geo_cache:
        theta, r = _cell_polar(geometry)
        _geo_cache[key] = Tensor(_geo_code(theta, r, embed_dim, dtype))
    return _geo_cache[key]


def projection_prior(rig: CameraRig, geometry: Geometry) -> np.ndarray:
    """(H_b*W_b, T) fixed cross-attention logit prior.

    Each BEV cell center projects, via the rendering geometry, to one point
    of one view; the prior is a log-Gaussian in (bearing, range) distance
    with one pixel pitch of slack per axis.  Added to the encoder's
    cross-attention logits it plays the role calibrated spatial sampling
    plays at full scale: the grid reads its own pixels from the first step
    instead of waiting for embeddings to discover the camera model.  The
    learned logits ride on top and can sharpen or override it.
    """
    key = ("prior", rig, geometry)
    if key not in _geo_cache:
        tt, tr = _token_polar(rig)
        ct, cr = _cell_polar(geometry)
        dt = np.abs(ct[:, None] - tt[None, :])
        dt = np.minimum(dt, 2.0 * math.pi - dt)            # wrap bearing
        sig_t = rig.sector_width / max(rig.view_w - 1, 1)  # one column
        sig_r = 1.0 / max(rig.view_h - 1, 1)               # one row
        dr = cr[:, None] - tr[None, :]
        _geo_cache[key] = -0.5 * ((dt / sig_t) ** 2 + (dr / sig_r) ** 2)
    return _geo_cache[key]


# --- forward pieces ---------------------------------------------------------


def _attn(p, prefix, q, kv, num_heads, key_mask=None, bias=None):
    qh = ad.linear(q, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"])
    kh = ad.linear(kv, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"])
    vh = ad.linear(kv, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"])
    out = ad.attend(qh, kh, vh, num_heads, key_mask=key_mask, bias=bias)
    return ad.linear(out, p[f"{prefix}.o.w"], p[f"{prefix}.o.b"])


def _ffn(p, prefix, x):
    h = ad.relu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return ad.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _norm(p, prefix, x):
    return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def view_tokens(det: Detector, views: Sequence[ViewFeatures]):
    """Project view pixels to attention tokens.

    Returns the (B, T, C) token tensor and a (B, T) key mask with False for
    every pixel of a masked view.
    """
    t = det.num_tokens
    rig = det.rig
    per_view = rig.view_h * rig.view_w
    dtype = det.params["view_proj.w"].dtype
    stacked = np.empty((len(views), t, rig.channels), dtype=dtype)
    key_mask = np.ones((len(views), t), dtype=bool)
    for i, vf in enumerate(views):
        if vf.data.shape != (rig.views, rig.view_h, rig.view_w, rig.channels):
            raise ShapeError(
                f"view_tokens: features {vf.data.shape} do not match the rig")
        stacked[i] = vf.data.reshape(t, rig.channels)
        for v in range(rig.views):
            if not vf.mask[v]:
                key_mask[i, v * per_view:(v + 1) * per_view] = False
    p = det.params
    x = ad.linear(Tensor(stacked), p["view_proj.w"], p["view_proj.b"])
    pos = ad.add(p["view_pos"], token_geometry(rig, det.config.embed_dim, dtype))
    x = ad.add(x, ad.tile_batch(pos, len(views)))
    return x, key_mask


def encode_tokens(det: Detector, tokens: Tensor, key_mask=None,
                  token_index=None) -> Tensor:
    """BEV grid attends over the given tokens; returns (B, H_b*W_b, C).

    ``token_index`` names the original rig position of each token column
    when a subset is passed, so the projection prior follows the tokens it
    describes; by default the full rig order is assumed.
    """
    p = det.params
    heads = det.config.num_heads
    b = tokens.shape[0]
    prior = projection_prior(det.rig, det.geometry)
    if token_index is not None:
        prior = prior[:, np.asarray(token_index)]
    if prior.shape[1] != tokens.shape[1]:
        raise ShapeError(f"encode: {tokens.shape[1]} tokens do not cover the "
                         f"rig's {prior.shape[1]}; pass token_index")
    geo = cell_geometry(det.geometry, det.config.embed_dim,
                        p["bev_pos"].dtype)
    z = ad.tile_batch(ad.add(p["bev_pos"], geo), b)
    # pre-norm residual blocks: the grid's positional identity rides the
    # residual stream untouched and only the final norm rescales it
    for j in range(det.config.enc_layers):
        z = ad.add(z, _attn(p, f"enc{j}.cross", _norm(p, f"enc{j}.ln1", z),
                            tokens, heads, key_mask=key_mask, bias=prior))
        zn = _norm(p, f"enc{j}.ln2", z)
        z = ad.add(z, _attn(p, f"enc{j}.self", zn, zn, heads))
        z = ad.add(z, _ffn(p, f"enc{j}.ffn", _norm(p, f"enc{j}.ln3", z)))
    return _norm(p, "enc.out", z)


def bev_encode(det: Detector, views: Sequence[ViewFeatures]) -> EncodeResult:
    """Aggregate per-scene view features into BEV features.

    A scene with every view masked still encodes (the grid keeps its
    embedding content; cross-attention contributes zeros) and is reported in
    ``all_masked``.
    """
    tokens, key_mask = view_tokens(det, views)
    all_masked = tuple(int(i) for i in np.flatnonzero(~key_mask.any(axis=1)))
    return EncodeResult(z_bev=encode_tokens(det, tokens, key_mask),
                        all_masked=all_masked)


def decode(det: Detector, z_bev: Tensor, queries: Tensor | None = None,
           self_mask=None) -> Tensor:
    """Run a query set against BEV features; (B, N, C) -> (B, N, C).

    ``queries=None`` uses the learned embeddings.  Any other query set of
    width C runs through the identical parameters, which is what lets
    ground-truth-derived queries share the decoder without extra capacity.
    ``self_mask`` (B, N) removes padding rows from the self-attention key
    pool when query sets of unequal size are batched together.
    """
    p = det.params
    heads = det.config.num_heads
    b = z_bev.shape[0]
    if queries is None:
        q = ad.tile_batch(p["query_emb"], b)
    else:
        q = queries
    if q.ndim != 3 or q.shape[0] != b or q.shape[2] != det.config.embed_dim:
        raise ShapeError(f"decode: queries {q.shape} do not fit BEV {z_bev.shape}")
    geo = cell_geometry(det.geometry, det.config.embed_dim,
                        p["bev_pos"].dtype)
    keys = ad.add(z_bev, ad.tile_batch(ad.add(p["bev_pos"], geo), b))
    # pre-norm blocks: each query's identity accumulates additively and is
    # normalized exactly once, at the stack output
    for j in range(det.config.dec_layers):
        qn = _norm(p, f"dec{j}.ln1", q)
        q = ad.add(q, _attn(p, f"dec{j}.self", qn, qn, heads,
                            key_mask=self_mask))
        q = ad.add(q, _attn(p, f"dec{j}.cross", _norm(p, f"dec{j}.ln2", q),
                            keys, heads))
        q = ad.add(q, _ffn(p, f"dec{j}.ffn", _norm(p, f"dec{j}.ln3", q)))
    return _norm(p, "dec.out", q)


def head(det: Detector, rows: Tensor) -> HeadOutput:
    """Prediction branches over (N, C) query rows.

    The attribute branch reads the classification trunk's hidden layer; the
    box branch squashes its first two outputs to (0, 1) BEV coordinates.
    """
    p = det.params
    if rows.ndim != 2 or rows.shape[1] != det.config.embed_dim:
        raise ShapeError(f"head: expected (N, {det.config.embed_dim}) rows, "
                         f"got {rows.shape}")
    cls_hidden = ad.relu(ad.linear(rows, p["head.cls.w1"], p["head.cls.b1"]))
    class_logits = ad.linear(cls_hidden, p["head.cls.w2"], p["head.cls.b2"])
    attr_logits = ad.linear(cls_hidden, p["head.attr.w"], p["head.attr.b"])
    box_hidden = ad.relu(ad.linear(rows, p["head.box.w1"], p["head.box.b1"]))
    raw = ad.linear(box_hidden, p["head.box.w2"], p["head.box.b2"])
    boxes = ad.concat([ad.sigmoid(ad.slice_cols(raw, 0, 2)),
                       ad.slice_cols(raw, 2, BOX_DIM)], axis=1)
    return HeadOutput(class_logits=class_logits, attr_logits=attr_logits,
                      boxes=boxes)


# --- checkpoints ------------------------------------------------------------


def _config_dict(det: Detector) -> dict:
    return {
        "model": asdict(det.config),
        "rig": asdict(det.rig),
        "geometry": asdict(det.geometry),
        "seed": det.seed,
    }


def save_checkpoint(det: Detector, path) -> None:
    header = {
        "config": _config_dict(det),
        "tensors": {name: list(t.shape) for name, t in det.params.items()},
    }
    # tensor blobs follow in header-dict order, so the header must keep its
    # insertion order through the JSON round trip
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in header["tensors"]:
            fh.write(np.ascontiguousarray(
                det.params[name].data, dtype="<f4").tobytes())


def load_checkpoint(path) -> Detector:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"checkpoint: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint: unsupported version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        cfg = header["config"]
        det = Detector(config=ModelConfig(**cfg["model"]),
                       rig=CameraRig(**cfg["rig"]),
                       geometry=Geometry(**cfg["geometry"]),
                       seed=cfg["seed"])
        expect = init_params(det.config, det.rig, det.geometry, det.seed)
        for name, shape in header["tensors"].items():
            if name not in expect.params:
                raise ValueError(f"checkpoint: unexpected tensor {name!r}")
            if tuple(shape) != expect.params[name].shape:
                raise ValueError(
                    f"checkpoint: tensor {name!r} has shape {tuple(shape)}, "
                    f"expected {expect.params[name].shape}")
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError(f"checkpoint: truncated tensor {name!r}")
            det.params[name] = Tensor(
                np.frombuffer(raw, dtype="<f4").reshape(shape).copy(),
                requires_grad=True)
        missing = set(expect.params) - set(det.params)
        if missing:
            raise ValueError(f"checkpoint: missing tensors {sorted(missing)}")
    return det
