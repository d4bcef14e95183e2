"""Hierarchical ViT-lite visual encoder.

One encoder maps an (H, W, 3) image to a six-layer representation: four
stage maps whose spatial extent halves between stages (patch embedding sets
the first stride, so strides are patch_size * {1, 2, 4, 8}), one global
vector read from a learned class token, and one local spatial map — the
final-stage tokens after the output norm. Optical and SAR use two encoders
of identical architecture with independent parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import layers as ly
from .autograd import Tensor
from .layers import Params

NUM_STAGES = 4


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 32
    num_stages: int = NUM_STAGES
    blocks_per_stage: int = 1
    num_heads: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_stages != NUM_STAGES:
            raise ValueError(f"num_stages must be {NUM_STAGES}")

    def stage_sizes(self) -> list[int]:
        """Token-grid side length per stage; a 1x1 grid stops shrinking."""
        side = self.image_size // self.patch_size
        sizes = [side]
        for _ in range(self.num_stages - 1):
            if side == 1:
                sizes.append(1)
            elif side % 2 == 0:
                side //= 2
                sizes.append(side)
            else:
                raise ValueError(f"stage grid {side} is odd and cannot be merged 2x2")
        return sizes


@dataclass
class VisualFeatures:
    """Six-layer output: 4 stage maps + global vector + local spatial map."""
    stages: list[Tensor]
    global_repr: Tensor
    local_spatial: Tensor

    def layers(self) -> list[Tensor]:
        return [*self.stages, self.global_repr, self.local_spatial]

    @staticmethod
    def layer_is_spatial() -> list[bool]:
        return [True, True, True, True, False, True]


def init_params(config: EncoderConfig, prefix: str = "enc") -> Params:
    """Truncated-normal weights (std 0.02), zero biases, unit norm gains."""
    c = config.embed_dim
    seed = config.seed
    sizes = config.stage_sizes()
    params: Params = {}
    ly.add_weight(params, f"{prefix}.patch.w", (config.patch_size ** 2 * 3, c), seed)
    ly.add_zeros(params, f"{prefix}.patch.b", (c,))
    ly.add_weight(params, f"{prefix}.cls", (1, c), seed)
    ly.add_weight(params, f"{prefix}.pos", (1 + sizes[0] ** 2, c), seed)
    for s in range(config.num_stages):
        for b in range(config.blocks_per_stage):
            ly.init_block(params, f"{prefix}.stage{s}.block{b}", c, seed)
        if s < config.num_stages - 1:
            merged = 4 * c if sizes[s] > 1 else c
            ly.init_linear(params, f"{prefix}.merge{s}.tokens", merged, c, seed)
            ly.init_linear(params, f"{prefix}.merge{s}.cls", c, c, seed)
    ly.init_layer_norm(params, f"{prefix}.ln_f", c)
    return params


def param_count_formula(config: EncoderConfig) -> int:
    """Closed-form parameter count for one encoder."""
    c = config.embed_dim
    sizes = config.stage_sizes()
    n = (config.patch_size ** 2 * 3) * c + c          # patch projection
    n += c                                            # cls token
    n += (1 + sizes[0] ** 2) * c                      # positions
    per_block = 2 * 2 * c                             # two norms
    per_block += 4 * (c * c + c)                      # q,k,v,o
    per_block += c * 4 * c + 4 * c + 4 * c * c + c    # mlp
    n += config.num_stages * config.blocks_per_stage * per_block
    for s in range(config.num_stages - 1):
        merged = 4 * c if sizes[s] > 1 else c
        n += merged * c + c                           # token merge
        n += c * c + c                                # cls carry
    n += 2 * c                                        # final norm
    return n


def _patchify(image: Tensor, patch: int) -> Tensor:
    h, w, ch = image.shape
    g = h // patch
    x = ag.reshape(image, (g, patch, w // patch, patch, ch))
    x = ag.transpose(x, (0, 2, 1, 3, 4))
    return ag.reshape(x, (g * (w // patch), patch * patch * ch))


def _merge_tokens(tokens: Tensor, side: int, params: Params, name: str) -> tuple[Tensor, int]:
    c = tokens.shape[-1]
    if side == 1:
        return ly.linear(tokens, params, name), 1
    x = ag.reshape(tokens, (side // 2, 2, side // 2, 2, c))
    x = ag.transpose(x, (0, 2, 1, 3, 4))
    x = ag.reshape(x, ((side // 2) ** 2, 4 * c))
    return ly.linear(x, params, name), side // 2


def encode_visual(image: Tensor, params: Params, config: EncoderConfig,
                  prefix: str = "enc") -> VisualFeatures:
    """Run one modality through the encoder.

    Accepts (H, W, 3) input, or (H, W, 1) which is replicated to three
    channels at ingest.
    """
    if image.ndim != 3:
        raise ValueError(f"encode_visual: expected (H, W, ch), got {image.shape}")
    h, w, ch = image.shape
    if h != config.image_size or w != config.image_size:
        raise ValueError(
            f"encode_visual: expected {config.image_size}x{config.image_size} input, "
            f"got {h}x{w}")
    if ch == 1:
        image = ag.concat([image, image, image], axis=2)
    elif ch != 3:
        raise ValueError(f"encode_visual: expected 1 or 3 channels, got {ch}")

    c = config.embed_dim
    sizes = config.stage_sizes()
    tokens = ag.add(ly.linear(_patchify(image, config.patch_size), params, f"{prefix}.patch"),
                    params[f"{prefix}.pos"][1:, :])
    cls = ag.add(params[f"{prefix}.cls"], params[f"{prefix}.pos"][0:1, :])

    stages: list[Tensor] = []
    for s in range(config.num_stages):
        seq = ag.concat([cls, tokens], axis=0)
        for b in range(config.blocks_per_stage):
            seq = ly.block(seq, params, f"{prefix}.stage{s}.block{b}", config.num_heads)
        cls = seq[0:1, :]
        tokens = seq[1:, :]
        stages.append(ag.reshape(tokens, (sizes[s], sizes[s], c)))
        if s < config.num_stages - 1:
            tokens, _ = _merge_tokens(tokens, sizes[s], params, f"{prefix}.merge{s}.tokens")
            cls = ly.linear(cls, params, f"{prefix}.merge{s}.cls")

    final = ly.layer_norm(ag.concat([cls, tokens], axis=0), params, f"{prefix}.ln_f")
    global_repr = ag.reshape(final[0:1, :], (c,))
    local_spatial = ag.reshape(final[1:, :], (sizes[-1], sizes[-1], c))
    return VisualFeatures(stages=stages, global_repr=global_repr,
                          local_spatial=local_spatial)
