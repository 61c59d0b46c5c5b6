"""Fusion embeddings: the four channel tables and their combination.

Per position, the active channel vectors (glyph 576, pinyin 30, POS 5,
contextual 768, in that fixed order) are concatenated, projected by one
learned linear map to the model dimension, and offset by the sinusoidal
positional encoding.  All tables stay trainable after initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotation import AnnotatedSequence, GlyphAtlas, glyph_to_weight, render_glyph, unk_glyph
from .corpus import Vocab
from .layers import embedding_grad, linear_backward, linear_forward, positional_encoding

GLYPH_DIM = 576
PINYIN_DIM = 30
POS_DIM = 5
CONTEXT_DIM = 768

CHANNEL_ORDER = ("glyph", "pinyin", "pos", "context")


@dataclass
class EmbeddingTable:
    """A (rows x dim) learnable matrix with a recorded initialization."""

    rows: int
    dim: int
    weights: np.ndarray
    init_scheme: str  # "glyph" | "uniform-sqrt3" | "standard-normal"

    def __post_init__(self):
        if self.weights.shape != (self.rows, self.dim):
            raise ValueError(f"table weights {self.weights.shape} != ({self.rows}, {self.dim})")


@dataclass
class FusionSpec:
    """Which channels feed the model and at what width they are fused."""

    use_glyph: bool
    use_pinyin: bool
    use_pos: bool
    use_context: bool
    d_model: int
    glyph_dim: int = GLYPH_DIM
    pinyin_dim: int = PINYIN_DIM
    pos_dim: int = POS_DIM
    context_dim: int = CONTEXT_DIM

    def __post_init__(self):
        if not (self.use_glyph or self.use_pinyin or self.use_pos or self.use_context):
            raise ValueError("at least one fusion channel must be active")

    @property
    def active_channels(self) -> tuple[str, ...]:
        flags = {
            "glyph": self.use_glyph,
            "pinyin": self.use_pinyin,
            "pos": self.use_pos,
            "context": self.use_context,
        }
        return tuple(ch for ch in CHANNEL_ORDER if flags[ch])

    @property
    def fused_dim(self) -> int:
        dims = {
            "glyph": self.glyph_dim,
            "pinyin": self.pinyin_dim,
            "pos": self.pos_dim,
            "context": self.context_dim,
        }
        return sum(dims[ch] for ch in self.active_channels)

    @classmethod
    def context_only(cls, d_model: int) -> "FusionSpec":
        return cls(use_glyph=False, use_pinyin=False, use_pos=False, use_context=True, d_model=d_model)

    @classmethod
    def all_channels(cls, d_model: int) -> "FusionSpec":
        return cls(use_glyph=True, use_pinyin=True, use_pos=True, use_context=True, d_model=d_model)


def init_glyph_table(vocab: Vocab, atlas: GlyphAtlas) -> EmbeddingTable:
    """One 576-wide row per vocabulary id, loaded from the atlas.

    PAD gets the all-background row (all zeros after the ink flip); the
    other special tokens share the fallback glyph.  The table is a plain
    trainable matrix afterwards.
    """
    unk_row = glyph_to_weight(unk_glyph())
    rows = np.empty((vocab.size, GLYPH_DIM), dtype=np.float64)
    for idx, token in enumerate(vocab.tokens):
        if idx == 0:  # PAD: all background
            rows[idx] = 0.0
        elif len(token) != 1:  # BOS/EOS/UNK/SEP markers
            rows[idx] = unk_row
        else:
            rows[idx] = glyph_to_weight(render_glyph(token, atlas))
    return EmbeddingTable(vocab.size, GLYPH_DIM, rows, "glyph")


def init_uniform_table(rows: int, dim: int, seed: int) -> EmbeddingTable:
    """I.i.d. uniform on [-sqrt(3/dim), +sqrt(3/dim)], seeded."""
    if rows < 1 or dim < 1:
        raise ValueError("table must have at least one row and one column")
    bound = np.sqrt(3.0 / dim)
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = rng.uniform(-bound, bound, size=(rows, dim))
    return EmbeddingTable(rows, dim, weights, "uniform-sqrt3")


def init_normal_table(rows: int, dim: int, seed: int) -> EmbeddingTable:
    """Standard-normal entries, seeded; used for the contextual table."""
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = rng.standard_normal((rows, dim))
    return EmbeddingTable(rows, dim, weights, "standard-normal")


def init_projection(fused_dim: int, d_model: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fusion projection: normal scaled by 1/sqrt(fan_in), zero bias."""
    rng = np.random.Generator(np.random.PCG64(seed))
    w = rng.standard_normal((fused_dim, d_model)) / np.sqrt(fused_dim)
    return w, np.zeros(d_model, dtype=np.float64)


def fuse_forward(
    char_ids: np.ndarray,
    pinyin_ids: np.ndarray,
    pos_ids: np.ndarray,
    ctx: np.ndarray | None,
    spec: FusionSpec,
    tables: dict[str, np.ndarray],
):
    """Batched fusion: id arrays are (..., L); returns (..., L, d_model).

    ``tables`` holds the channel matrices under their channel names plus
    ``proj_w``/``proj_b``.  ``ctx`` is either precomputed vectors of shape
    (..., L, context_dim) or None when the contextual channel reads the
    trainable table.
    """
    char_ids = np.asarray(char_ids, dtype=np.int64)
    parts = []
    ctx_from_table = False
    for ch in spec.active_channels:
        if ch == "glyph":
            parts.append(tables["glyph"][char_ids])
        elif ch == "pinyin":
            parts.append(tables["pinyin"][np.asarray(pinyin_ids, dtype=np.int64)])
        elif ch == "pos":
            parts.append(tables["pos"][np.asarray(pos_ids, dtype=np.int64)])
        else:
            if ctx is not None:
                parts.append(np.asarray(ctx, dtype=np.float64))
            else:
                ctx_from_table = True
                parts.append(tables["context"][char_ids])
    lengths = {p.shape[-2] for p in parts}
    if len(lengths) != 1:
        raise ValueError(f"fusion channels disagree on sequence length: {sorted(lengths)}")
    concat = np.concatenate(parts, axis=-1)
    projected, lin_cache = linear_forward(concat, tables["proj_w"], tables["proj_b"])
    pe = positional_encoding(projected.shape[-2], spec.d_model)
    out = projected + pe
    cache = (lin_cache, spec, char_ids, np.asarray(pinyin_ids, dtype=np.int64),
             np.asarray(pos_ids, dtype=np.int64), ctx_from_table, tables)
    return out, cache


def fuse_backward(d_out: np.ndarray, cache):
    """Gradients for the projection and every active channel table."""
    lin_cache, spec, char_ids, pinyin_ids, pos_ids, ctx_from_table, tables = cache
    d_concat, d_proj_w, d_proj_b = linear_backward(d_out, lin_cache)
    grads = {"proj_w": d_proj_w, "proj_b": d_proj_b}
    dims = {"glyph": spec.glyph_dim, "pinyin": spec.pinyin_dim,
            "pos": spec.pos_dim, "context": spec.context_dim}
    ids = {"glyph": char_ids, "pinyin": pinyin_ids, "pos": pos_ids, "context": char_ids}
    off = 0
    for ch in spec.active_channels:
        d_slice = d_concat[..., off : off + dims[ch]]
        off += dims[ch]
        if ch == "context" and not ctx_from_table:
            continue  # precomputed vectors are inputs, not parameters
        grads[ch] = embedding_grad(d_slice, ids[ch], tables[ch].shape)
    return grads


def fuse(
    annotated: AnnotatedSequence,
    ctx: np.ndarray | None,
    spec: FusionSpec,
    tables: dict[str, np.ndarray],
) -> np.ndarray:
    """Single-sequence fusion of an annotated input to L x d_model."""
    out, _ = fuse_forward(
        np.asarray(annotated.char_ids),
        np.asarray(annotated.pinyin_ids),
        np.asarray(annotated.pos_ids),
        ctx,
        spec,
        tables,
    )
    return out
