"""Cross-modal rectification and fusion of the optical/SAR feature layers.

Rectification cross-gates each modality with channel and spatial weights
computed from both; the gates are centered sigmoids (sigmoid(h) - 1/2), so a
module with all-zero parameters is exactly the identity on both inputs.
Fusion runs bidirectional single-head cross-attention between the rectified
layers and projects the two branch outputs back to the common width around
an average-mix base. Parameters are per layer (not shared across stages).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autograd as ag
from . import layers as ly
from .autograd import Tensor
from .encoder import VisualFeatures
from .layers import Params

NUM_LAYERS = 6  # 4 stage maps + global vector + local spatial map


@dataclass
class FusedPyramid:
    """Fused counterpart of VisualFeatures, one map per input layer."""
    stages: list[Tensor]
    global_repr: Tensor
    local_spatial: Tensor

    def layers(self) -> list[Tensor]:
        return [*self.stages, self.global_repr, self.local_spatial]

    @classmethod
    def from_layers(cls, maps: list[Tensor]) -> "FusedPyramid":
        return cls(stages=maps[:4], global_repr=maps[4], local_spatial=maps[5])


def init_params(embed_dim: int, seed: int, prefix: str = "fuse") -> Params:
    c = embed_dim
    params: Params = {}
    for i, spatial in enumerate(VisualFeatures.layer_is_spatial()):
        name = f"{prefix}.layer{i}"
        ly.init_linear(params, f"{name}.rect.ch.fc1", 2 * c, c, seed)
        ly.init_linear(params, f"{name}.rect.ch.fc2", c, c, seed)
        if spatial:
            ly.init_linear(params, f"{name}.rect.sp", 2 * c, 1, seed)
        for branch in ("ab", "ba"):
            for proj in ("q", "k", "v"):
                ly.init_linear(params, f"{name}.mix.{branch}.{proj}", c, c, seed)
        ly.init_linear(params, f"{name}.mix.proj", 2 * c, c, seed)
    return params


def _as_tokens(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    if x.ndim == 1:
        return ag.reshape(x, (1, x.shape[0])), x.shape
    h, w, c = x.shape
    return ag.reshape(x, (h * w, c)), x.shape


def _gate(h: Tensor) -> Tensor:
    # sigmoid centered at zero: exactly 0 when h == 0, range (-1/2, 1/2)
    return ag.sub(ag.sigmoid(h), 0.5)


def _pool(tokens: Tensor) -> Tensor:
    return ag.tmean(tokens, axis=0, keepdims=True)


def _channel_gate(target: Tensor, other: Tensor, params: Params, name: str) -> Tensor:
    pooled = ag.concat([_pool(target), _pool(other)], axis=1)
    h = ly.linear(ag.gelu(ly.linear(pooled, params, f"{name}.fc1")), params, f"{name}.fc2")
    return _gate(h)


def rectify_layer(x: Tensor, y: Tensor, params: Params, name: str,
                  spatial: bool) -> tuple[Tensor, Tensor]:
    if x.shape != y.shape:
        raise ValueError(f"rectify: layer shapes differ: {x.shape} vs {y.shape}")
    tx, shape = _as_tokens(x)
    ty, _ = _as_tokens(y)
    c = tx.shape[-1]
    n = tx.shape[0]

    gx = _channel_gate(tx, ty, params, f"{name}.rect.ch")  # gates y's contribution to x
    gy = _channel_gate(ty, tx, params, f"{name}.rect.ch")
    upd_x = ag.mul(ag.repeat(gx, 0, n), ty)
    upd_y = ag.mul(ag.repeat(gy, 0, n), tx)
    if spatial:
        mx = _gate(ly.linear(ag.concat([tx, ty], axis=1), params, f"{name}.rect.sp"))
        my = _gate(ly.linear(ag.concat([ty, tx], axis=1), params, f"{name}.rect.sp"))
        upd_x = ag.add(upd_x, ag.mul(ag.repeat(mx, 1, c), ty))
        upd_y = ag.add(upd_y, ag.mul(ag.repeat(my, 1, c), tx))
    out_x = ag.reshape(ag.add(tx, upd_x), shape)
    out_y = ag.reshape(ag.add(ty, upd_y), shape)
    return out_x, out_y


def mfrm(x: VisualFeatures, y: VisualFeatures, params: Params,
         prefix: str = "fuse") -> tuple[list[Tensor], list[Tensor]]:
    """Rectify all six layers; returns the two corrected layer lists."""
    spatial = VisualFeatures.layer_is_spatial()
    out_x: list[Tensor] = []
    out_y: list[Tensor] = []
    for i, (lx, ly_) in enumerate(zip(x.layers(), y.layers())):
        rx, ry = rectify_layer(lx, ly_, params, f"{prefix}.layer{i}", spatial[i])
        out_x.append(rx)
        out_y.append(ry)
    return out_x, out_y


def _branch(q_src: Tensor, kv_src: Tensor, params: Params, name: str) -> Tensor:
    q = ly.linear(q_src, params, f"{name}.q")
    k = ly.linear(kv_src, params, f"{name}.k")
    v = ly.linear(kv_src, params, f"{name}.v")
    return ly._attend(q, k, v)


def fuse_layer(x: Tensor, y: Tensor, params: Params, name: str) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"fuse: layer shapes differ: {x.shape} vs {y.shape}")
    tx, shape = _as_tokens(x)
    ty, _ = _as_tokens(y)
    a = _branch(tx, ty, params, f"{name}.mix.ab")
    b = _branch(ty, tx, params, f"{name}.mix.ba")
    mix = ag.mul(ag.add(tx, ty), 0.5)
    out = ag.add(mix, ly.linear(ag.concat([a, b], axis=1), params, f"{name}.mix.proj"))
    return ag.reshape(out, shape)


def mffm(x_layers: list[Tensor], y_layers: list[Tensor], params: Params,
         prefix: str = "fuse") -> FusedPyramid:
    """Cross-attend and merge the rectified layer lists into one pyramid."""
    if len(x_layers) != NUM_LAYERS or len(y_layers) != NUM_LAYERS:
        raise ValueError("mffm: expected six layers per modality")
    fused = [fuse_layer(lx, ly_, params, f"{prefix}.layer{i}")
             for i, (lx, ly_) in enumerate(zip(x_layers, y_layers))]
    return FusedPyramid.from_layers(fused)


def fuse_all(opt: VisualFeatures, sar: VisualFeatures, params: Params,
             prefix: str = "fuse") -> FusedPyramid:
    """Rectify then fuse, layer by layer."""
    rx, ry = mfrm(opt, sar, params, prefix)
    return mffm(rx, ry, params, prefix)


def passthrough(opt: VisualFeatures) -> FusedPyramid:
    """Single-modality route: optical features become the pyramid unchanged."""
    return FusedPyramid(stages=list(opt.stages), global_repr=opt.global_repr,
                        local_spatial=opt.local_spatial)
