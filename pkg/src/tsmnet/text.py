"""Class-name text path: prompts, toy text encoder, context-aware prompt
refinement, pixel-text score map, and the pyramid-decoding neck.

The text encoder is a small two-block transformer over learned token
embeddings with a whitespace tokenizer and a fixed word list shipped in
`assets/token_vocab.txt` — a stand-in with the same interface a pretrained
language model would have. Class rows are encoded independently, so any
reordering of the vocabulary reorders the outputs exactly.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import layers as ly
from .autograd import Tensor
from .fusion import FusedPyramid
from .layers import Params

PAD_ID = 0
UNK_ID = 1
CLS_PLACEHOLDER = "[CLS]"
DEFAULT_TEMPLATE = "a photo of a [CLS]"
GAMMA_INIT = 1e-4
_STRIP = ",.;:!?"


@dataclass(frozen=True)
class TextConfig:
    embed_dim: int = 32
    n_ctx: int = 4
    max_len: int = 16
    num_heads: int = 2
    num_blocks: int = 2
    seed: int = 0


class Vocabulary:
    """Ordered class names; order fixes channel order everywhere downstream."""

    def __init__(self, names: list[str]):
        cleaned = [n.strip() for n in names]
        if any(not n for n in cleaned):
            raise ValueError("vocabulary: empty class name")
        if len(set(cleaned)) != len(cleaned):
            raise ValueError("vocabulary: duplicate class names")
        self.names = cleaned

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln.strip()])

    @classmethod
    def from_inline(cls, spec: str) -> "Vocabulary":
        return cls([part for part in spec.split(",") if part.strip()])


class Tokenizer:
    """Lowercase + whitespace tokenizer over a fixed word list.

    Surrounding punctuation is split off before lookup; anything not in the
    word list maps to the reserved <unk> id (never silently dropped).
    """

    def __init__(self, words: list[str] | None = None):
        if words is None:
            ref = importlib.resources.files("tsmnet").joinpath("assets/token_vocab.txt")
            words = [w for w in ref.read_text(encoding="utf-8").splitlines() if w]
        self.words = words
        self.ids = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        out = []
        for raw in text.lower().split():
            word = raw.strip(_STRIP)
            if not word:
                continue
            out.append(self.ids.get(word, UNK_ID))
        return out


def build_prompts(names, template: str, tokenizer: Tokenizer, max_len: int,
                  allow_duplicates: bool = False) -> np.ndarray:
    """Token-id matrix (K, max_len), one padded prompt per class name."""
    if template.count(CLS_PLACEHOLDER) != 1:
        raise ValueError(f"template must contain exactly one {CLS_PLACEHOLDER}: {template!r}")
    names = list(names)
    if not allow_duplicates and len(set(names)) != len(names):
        raise ValueError("duplicate class names")
    rows = []
    for name in names:
        ids = tokenizer.encode(template.replace(CLS_PLACEHOLDER, name))
        if not ids:
            raise ValueError(f"prompt for {name!r} tokenized to nothing")
        if len(ids) > max_len:
            raise ValueError(f"prompt for {name!r} has {len(ids)} tokens, max is {max_len}")
        rows.append(ids + [PAD_ID] * (max_len - len(ids)))
    return np.asarray(rows, dtype=np.int64)


@dataclass
class TextBank:
    """Encoded class-name features plus the learnable pieces behind them."""
    names: list[str]
    token_ids: np.ndarray           # (K, max_len)
    name_embeddings: Tensor         # (K, C) mean of name-token embeddings
    features: Tensor                # (K, C) encoded rows t
    gamma: Tensor                   # scalar residual gain


def init_params(cfg: TextConfig, vocab_size: int, prefix: str = "text") -> Params:
    c = cfg.embed_dim
    seed = cfg.seed
    params: Params = {}
    ly.add_weight(params, f"{prefix}.tok", (vocab_size, c), seed)
    ly.add_weight(params, f"{prefix}.pos", (cfg.n_ctx + cfg.max_len, c), seed)
    ly.add_weight(params, f"{prefix}.ctx", (cfg.n_ctx, c), seed)
    for b in range(cfg.num_blocks):
        ly.init_block(params, f"{prefix}.block{b}", c, seed)
    ly.init_layer_norm(params, f"{prefix}.ln_f", c)
    ly.init_linear(params, f"{prefix}.desc_head", c, c, seed)
    ly.add_const(params, f"{prefix}.gamma", GAMMA_INIT)
    ly.init_cross_block(params, f"{prefix}.prompt", c, seed)
    return params


def _run_body(seq: Tensor, readout: int, params: Params, cfg: TextConfig,
              prefix: str) -> Tensor:
    for b in range(cfg.num_blocks):
        seq = ly.block(seq, params, f"{prefix}.block{b}", cfg.num_heads)
    seq = ly.layer_norm(seq, params, f"{prefix}.ln_f")
    return ag.reshape(seq[readout:readout + 1, :], (cfg.embed_dim,))


def _encode_row(ids: np.ndarray, params: Params, cfg: TextConfig, prefix: str,
                with_context: bool) -> Tensor:
    real = int(np.sum(ids != PAD_ID))
    if real == 0:
        raise ValueError("cannot encode an all-padding sequence")
    emb = ag.gather_rows(params[f"{prefix}.tok"], ids)
    pos = params[f"{prefix}.pos"]
    if with_context:
        seq = ag.concat([params[f"{prefix}.ctx"], emb], axis=0)
        seq = ag.add(seq, pos[: cfg.n_ctx + len(ids), :])
        readout = cfg.n_ctx + real - 1
    else:
        seq = ag.add(emb, pos[cfg.n_ctx: cfg.n_ctx + len(ids), :])
        readout = real - 1
    return _run_body(seq, readout, params, cfg, prefix)


def encode_text(token_ids: np.ndarray, params: Params, cfg: TextConfig,
                prefix: str = "text") -> Tensor:
    """Encode each padded prompt row to a (K, C) class-feature matrix.

    Rows run through [learned context; token embeddings] independently and
    read out at the last non-pad position.
    """
    if token_ids.ndim != 2 or token_ids.shape[1] > cfg.max_len:
        raise ValueError(f"token ids must be (K, <= {cfg.max_len}), got {token_ids.shape}")
    rows = [_encode_row(token_ids[k], params, cfg, prefix, with_context=True)
            for k in range(token_ids.shape[0])]
    return ag.stack_rows(rows)


def make_text_bank(names, template: str, tokenizer: Tokenizer, params: Params,
                   cfg: TextConfig, prefix: str = "text",
                   allow_duplicates: bool = False) -> TextBank:
    ids = build_prompts(names, template, tokenizer, cfg.max_len,
                        allow_duplicates=allow_duplicates)
    name_rows = []
    for name in names:
        nids = np.asarray(tokenizer.encode(name) or [UNK_ID], dtype=np.int64)
        name_rows.append(ag.tmean(ag.gather_rows(params[f"{prefix}.tok"], nids), axis=0))
    return TextBank(names=list(names), token_ids=ids,
                    name_embeddings=ag.stack_rows(name_rows),
                    features=encode_text(ids, params, cfg, prefix),
                    gamma=params[f"{prefix}.gamma"])


def context_prompt(t: Tensor, global_repr: Tensor, local_spatial: Tensor,
                   params: Params, cfg: TextConfig, prefix: str = "text") -> Tensor:
    """Refine class features against the visual tokens: t + gamma * v.

    The class rows are the queries; the keys/values are the global vector
    (as one token) followed by the flattened local spatial map.
    """
    c = t.shape[-1]
    if global_repr.shape[-1] != c or local_spatial.shape[-1] != c:
        raise ValueError(
            f"context_prompt: channel mismatch t={t.shape} global={global_repr.shape} "
            f"local={local_spatial.shape}")
    h, w, _ = local_spatial.shape
    visual = ag.concat([ag.reshape(global_repr, (1, c)),
                        ag.reshape(local_spatial, (h * w, c))], axis=0)
    v = ly.cross_block(t, visual, params, f"{prefix}.prompt", cfg.num_heads)
    return ag.add(t, ag.mul(v, params[f"{prefix}.gamma"]))


def score_map(z_map: Tensor, t_prime: Tensor) -> Tensor:
    """Cosine similarity between every pixel feature and every class row.

    Both sides are unit-normalized along channels; the product is clamped to
    [-1, 1] to absorb last-ulp rounding above 1.
    """
    h, w, c = z_map.shape
    if t_prime.shape[-1] != c:
        raise ValueError(f"score_map: channel mismatch {z_map.shape} vs {t_prime.shape}")
    zn = ag.l2_normalize(ag.reshape(z_map, (h * w, c)), axis=-1)
    tn = ag.l2_normalize(t_prime, axis=-1)
    s = ag.clip(ag.matmul(zn, ag.transpose(tn)), -1.0, 1.0)
    return ag.reshape(s, (h, w, t_prime.shape[0]))


# ---------------------------------------------------------------------------
# Decoding neck: score-map injection + top-down pyramid + sub-pixel head.

def init_neck_params(embed_dim: int, patch_size: int, seed: int,
                     prefix: str = "neck") -> Params:
    c = embed_dim
    params: Params = {}
    for s in range(4):
        ly.init_linear(params, f"{prefix}.lat{s}", c, c, seed)
    ly.init_linear(params, f"{prefix}.score", c, c, seed)
    for s in range(3):
        ly.init_linear(params, f"{prefix}.up{s}", c, c, seed)
    for o in range(patch_size * patch_size):
        ly.init_linear(params, f"{prefix}.pix{o}", c, c, seed)
    return params


def _tokens(m: Tensor) -> tuple[Tensor, int, int]:
    h, w, c = m.shape
    return ag.reshape(m, (h * w, c)), h, w


def _subpixel(tokens: Tensor, grid: int, patch: int, params: Params,
              prefix: str) -> Tensor:
    c = tokens.shape[-1]
    offs = [ag.reshape(ly.linear(tokens, params, f"{prefix}.pix{o}"),
                       (tokens.shape[0], 1, c))
            for o in range(patch * patch)]
    x = ag.concat(offs, axis=1)                       # (N, patch^2, C)
    x = ag.reshape(x, (grid, grid, patch, patch, c))
    x = ag.transpose(x, (0, 2, 1, 3, 4))
    return ag.reshape(x, (grid * patch, grid * patch, c))


def neck_fuse(pyramid: FusedPyramid, s: Tensor, t_hat: Tensor, params: Params,
              canon_order: np.ndarray, patch_size: int,
              seg_temperature: float, prefix: str = "neck"
              ) -> tuple[list[Tensor], Tensor, Tensor]:
    """Decode the pyramid into full-resolution features and class logits.

    The score map is folded into the coarsest lateral through a projection
    of the (normalized) class features, so the injection works for any
    number of classes. `canon_order` fixes the class summation order (sorted
    by name), keeping the result bit-identical under vocabulary reordering.
    Returns (per-scale decoder maps coarse-to-fine, features (H, W, C),
    logits (H, W, K)).
    """
    stages = pyramid.stages
    h4 = stages[3].shape[0]
    if s.shape[0] != h4 or s.shape[1] != stages[3].shape[1]:
        raise ValueError(f"neck_fuse: score map {s.shape} does not match "
                         f"final stage {stages[3].shape}")
    canon = np.asarray(canon_order, dtype=np.int64)

    tok4, gh, gw = _tokens(stages[3])
    lat = ly.linear(tok4, params, f"{prefix}.lat3")
    s_tok = ag.reshape(s, (gh * gw, s.shape[2]))
    proj = ly.linear(t_hat, params, f"{prefix}.score")   # (K, C)
    inj = ag.matmul(ag.take(s_tok, (slice(None), canon)),
                    ag.take(proj, (canon, slice(None))))
    p = ag.reshape(ag.add(lat, inj), (gh, gw, lat.shape[-1]))

    decoder = [p]
    for s_idx in (2, 1, 0):
        target = stages[s_idx]
        factor = target.shape[0] // p.shape[0]
        up = ag.upsample2d(p, factor) if factor > 1 else p
        utok, uh, uw = _tokens(up)
        utok = ly.linear(utok, params, f"{prefix}.up{s_idx}")
        ltok, _, _ = _tokens(target)
        ltok = ly.linear(ltok, params, f"{prefix}.lat{s_idx}")
        p = ag.reshape(ag.add(ltok, utok), (uh, uw, utok.shape[-1]))
        decoder.append(p)

    grid = p.shape[0]
    feats = _subpixel(_tokens(p)[0], grid, patch_size, params, prefix)
    hh, ww, c = feats.shape
    fn = ag.l2_normalize(ag.reshape(feats, (hh * ww, c)), axis=-1)
    cos = ag.clip(ag.matmul(fn, ag.transpose(t_hat)), -1.0, 1.0)
    logits = ag.reshape(ag.mul(cos, 1.0 / seg_temperature),
                        (hh, ww, t_hat.shape[0]))
    return decoder, feats, logits
