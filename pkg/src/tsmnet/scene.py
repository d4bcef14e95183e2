"""Scene-level description path: align first, then fuse.

A global image embedding (projected from the fused global vector) and a
description embedding (same text body as the class path, separate readout
head) are pulled together by a symmetric in-batch InfoNCE loss. Afterwards
the description embedding is injected into every pyramid layer through a
per-layer cross-attention block whose single key/value token is the
projected description; a zeroed output projection makes the injection an
exact identity.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from . import layers as ly
from . import text as tx
from .autograd import Tensor
from .fusion import NUM_LAYERS, FusedPyramid
from .layers import Params
from .text import TextConfig, Tokenizer


def init_params(embed_dim: int, seed: int, prefix: str = "scene") -> Params:
    c = embed_dim
    params: Params = {}
    ly.init_linear(params, f"{prefix}.img_proj", c, c, seed)
    for i in range(NUM_LAYERS):
        name = f"{prefix}.layer{i}"
        ly.init_linear(params, f"{name}.txt", c, c, seed)
        for proj in ("q", "k", "v", "o"):
            ly.init_linear(params, f"{name}.{proj}", c, c, seed)
    return params


def scene_embed(pyramid: FusedPyramid, params: Params,
                prefix: str = "scene") -> Tensor:
    """Unit-norm global image embedding from the fused global vector."""
    c = pyramid.global_repr.shape[0]
    g = ag.reshape(pyramid.global_repr, (1, c))
    out = ly.linear(g, params, f"{prefix}.img_proj")
    return ag.reshape(ag.l2_normalize(out, axis=-1), (c,))


def encode_description(description: str, params: Params, cfg: TextConfig,
                       tokenizer: Tokenizer, text_prefix: str = "text") -> Tensor:
    """Unit-norm embedding of a free-text scene description."""
    if not description.strip():
        raise ValueError("encode_description: empty description")
    ids = tokenizer.encode(description)
    if not ids:
        raise ValueError(f"description tokenized to nothing: {description!r}")
    if len(ids) > cfg.max_len:
        raise ValueError(f"description has {len(ids)} tokens, max is {cfg.max_len}")
    ids = np.asarray(ids + [tx.PAD_ID] * (cfg.max_len - len(ids)), dtype=np.int64)
    hidden = tx._encode_row(ids, params, cfg, text_prefix, with_context=False)
    c = hidden.shape[0]
    out = ly.linear(ag.reshape(hidden, (1, c)), params, f"{text_prefix}.desc_head")
    return ag.reshape(ag.l2_normalize(out, axis=-1), (c,))


def info_nce(image_embs: Tensor, text_embs: Tensor, tau: float) -> Tensor:
    """Symmetric in-batch InfoNCE over matched (image, description) rows.

    Row i of each side is the positive for row i of the other; all rows in
    the batch (positive included) form the candidate set. The two directions
    are averaged. With all pairwise similarities equal the loss is ln(B).
    """
    if tau <= 0:
        raise ValueError(f"info_nce: temperature must be positive, got {tau}")
    if image_embs.ndim != 2 or image_embs.shape != text_embs.shape:
        raise ValueError(f"info_nce: embedding shapes differ: "
                         f"{image_embs.shape} vs {text_embs.shape}")
    b = image_embs.shape[0]
    if b < 2:
        raise ValueError("info_nce: batch must hold at least 2 pairs")
    for side, emb in (("image", image_embs), ("text", text_embs)):
        norms = np.linalg.norm(emb.data, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError(f"info_nce: {side} rows are not unit-norm")
    logits = ag.mul(ag.matmul(image_embs, ag.transpose(text_embs)), 1.0 / tau)
    eye = np.eye(b)
    i2t = ag.neg(ag.mul(ag.tsum(ag.mul(ag.log_softmax(logits, axis=1), eye)), 1.0 / b))
    t2i = ag.neg(ag.mul(ag.tsum(ag.mul(ag.log_softmax(ag.transpose(logits), axis=1), eye)),
                        1.0 / b))
    return ag.mul(ag.add(i2t, t2i), 0.5)


def _enrich_layer(layer: Tensor, desc: Tensor, params: Params, name: str) -> Tensor:
    if layer.ndim == 1:
        tokens = ag.reshape(layer, (1, layer.shape[0]))
        shape = layer.shape
    else:
        h, w, c = layer.shape
        tokens = ag.reshape(layer, (h * w, c))
        shape = layer.shape
    c = tokens.shape[-1]
    txt = ly.linear(ag.reshape(desc, (1, c)), params, f"{name}.txt")
    q = ly.linear(tokens, params, f"{name}.q")
    k = ly.linear(txt, params, f"{name}.k")
    v = ly.linear(txt, params, f"{name}.v")
    scale = 1.0 / math.sqrt(c)
    att = ag.softmax(ag.mul(ag.matmul(q, ag.transpose(k)), scale), axis=-1)
    upd = ly.linear(ag.matmul(att, v), params, f"{name}.o")
    return ag.reshape(ag.add(tokens, upd), shape)


def scene_fusion(pyramid: FusedPyramid, desc: Tensor, params: Params,
                 prefix: str = "scene") -> FusedPyramid:
    """Residually inject the description embedding into every pyramid layer."""
    if desc.shape[0] != pyramid.global_repr.shape[0]:
        raise ValueError(f"scene_fusion: channel mismatch {desc.shape} vs "
                         f"{pyramid.global_repr.shape}")
    enriched = [_enrich_layer(layer, desc, params, f"{prefix}.layer{i}")
                for i, layer in enumerate(pyramid.layers())]
    return FusedPyramid.from_layers(enriched)
