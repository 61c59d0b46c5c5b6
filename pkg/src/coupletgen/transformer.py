"""The numerical core: attention, residual blocks, and the two model variants.

Both variants run pre-norm residual blocks over fused embeddings:

* decoder-only — one causal stack over the stream
  ``BOS upper SEP lower EOS``; the loss is taken on the lower-line part.
* encoder-decoder — a bidirectional encoder over the upper line and a
  causal decoder with cross-attention, teacher-forced on ``BOS lower``.

Forward passes collect caches so gradients can be computed analytically;
everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import layers
from .fusion import FusionSpec, fuse_backward, fuse_forward
from .layers import (
    attention_core_backward,
    attention_core_forward,
    dropout_backward,
    dropout_forward,
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
)

DECODER_ONLY = "decoder-only"
ENCODER_DECODER = "encoder-decoder"


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal positional table of shape (length, d_model)."""
    return layers.positional_encoding(length, d_model)


def scaled_dot_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None = None
) -> np.ndarray:
    """softmax(q kᵀ / sqrt(d)) v for q (n x d), k (m x d), v (m x dv).

    ``mask`` is boolean (n x m); True marks keys a query may attend.  A
    query row with every key blocked is an error.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError("attention shapes disagree")
    out, _ = attention_core_forward(q, k, v, mask)
    return out


@dataclass
class ModelConfig:
    variant: str
    n_layers_enc: int
    n_layers_dec: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    dropout: float = 0.1
    max_len: int = 80

    def __post_init__(self):
        if self.variant not in (DECODER_ONLY, ENCODER_DECODER):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def paper_config(variant: str, vocab_size: int, d_model: int = 512) -> ModelConfig:
    """Full-scale preset: 6 encoder and 6 decoder layers, 12 heads."""
    n_enc = 6 if variant == ENCODER_DECODER else 0
    return ModelConfig(variant, n_enc, 6, 12, d_model, 4 * d_model, vocab_size)


def desk_config(variant: str, vocab_size: int, max_len: int = 80) -> ModelConfig:
    """Small CPU-friendly preset: 2 layers, 4 heads, d_model 128.

    Dropout is off so overfitting runs and seeded-curve comparisons are
    deterministic in value, not just in distribution.
    """
    n_enc = 2 if variant == ENCODER_DECODER else 0
    return ModelConfig(variant, n_enc, 2, 4, 128, 512, vocab_size, dropout=0.0, max_len=max_len)


@dataclass
class AnnotatedBatch:
    """Padded id channels for one side of a batch."""

    char_ids: np.ndarray  # (B, L) int64
    pinyin_ids: np.ndarray
    pos_ids: np.ndarray
    pad_mask: np.ndarray  # (B, L) bool, True = real token
    ctx: np.ndarray | None = None  # (B, L, ctx_dim) when contextual vectors are data

    @property
    def shape(self):
        return self.char_ids.shape


@dataclass
class ModelBatch:
    """Model input: the decoder-side stream, optional encoder source,
    and the teacher-forcing targets with their loss mask."""

    inputs: AnnotatedBatch
    targets: np.ndarray  # (B, L) int64
    loss_mask: np.ndarray  # (B, L) bool
    source: AnnotatedBatch | None = None


class Model:
    """Parameter store plus the configuration needed to rebuild it."""

    def __init__(self, config: ModelConfig, fusion: FusionSpec, params: dict[str, np.ndarray],
                 pinyin_rows: int, pos_rows: int, context_trainable: bool = True):
        self.config = config
        self.fusion = fusion
        self.params = params
        self.pinyin_rows = pinyin_rows
        self.pos_rows = pos_rows
        self.context_trainable = context_trainable

    def fusion_tables(self) -> dict[str, np.ndarray]:
        keys = {"glyph": "fusion.glyph", "pinyin": "fusion.pinyin",
                "pos": "fusion.pos", "context": "fusion.context"}
        tables = {ch: self.params[k] for ch, k in keys.items() if k in self.params}
        tables["proj_w"] = self.params["fusion.proj_w"]
        tables["proj_b"] = self.params["fusion.proj_b"]
        return tables

    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def build_meta(self) -> dict:
        """Everything needed to reconstruct the parameter shapes."""
        return {
            "config": {
                "variant": self.config.variant,
                "n_layers_enc": self.config.n_layers_enc,
                "n_layers_dec": self.config.n_layers_dec,
                "n_heads": self.config.n_heads,
                "d_model": self.config.d_model,
                "d_ff": self.config.d_ff,
                "vocab_size": self.config.vocab_size,
                "dropout": self.config.dropout,
                "max_len": self.config.max_len,
            },
            "fusion": {
                "use_glyph": self.fusion.use_glyph,
                "use_pinyin": self.fusion.use_pinyin,
                "use_pos": self.fusion.use_pos,
                "use_context": self.fusion.use_context,
                "d_model": self.fusion.d_model,
            },
            "pinyin_rows": self.pinyin_rows,
            "pos_rows": self.pos_rows,
            "context_trainable": self.context_trainable,
        }

    @classmethod
    def from_meta(cls, meta: dict, params: dict[str, np.ndarray]) -> "Model":
        config = ModelConfig(**meta["config"])
        fusion = FusionSpec(**meta["fusion"])
        return cls(config, fusion, params, meta["pinyin_rows"], meta["pos_rows"],
                   meta["context_trainable"])


def init_model(
    config: ModelConfig,
    fusion: FusionSpec,
    seed: int,
    pinyin_rows: int,
    pos_rows: int,
    vocab=None,
    atlas=None,
    context_trainable: bool = True,
) -> Model:
    """Seeded parameter initialization.

    Glyph rows come from the atlas; pinyin/POS tables are uniform on
    ±sqrt(3/dim); the contextual table is standard normal; projections are
    normal scaled by 1/sqrt(fan_in).  Two builds from the same arguments
    are identical.
    """
    from .fusion import init_glyph_table, init_normal_table, init_projection, init_uniform_table

    if fusion.d_model != config.d_model:
        raise ValueError("fusion d_model must match the model d_model")
    rng = np.random.Generator(np.random.PCG64(seed))

    def sub_seed() -> int:
        return int(rng.integers(0, 2**63 - 1))

    def dense(shape):
        fan_in = shape[0]
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    params: dict[str, np.ndarray] = {}
    if fusion.use_glyph:
        if vocab is None or atlas is None:
            raise ValueError("glyph channel requires a vocab and a glyph atlas")
        params["fusion.glyph"] = init_glyph_table(vocab, atlas).weights
    if fusion.use_pinyin:
        params["fusion.pinyin"] = init_uniform_table(pinyin_rows, fusion.pinyin_dim, sub_seed()).weights
    if fusion.use_pos:
        params["fusion.pos"] = init_uniform_table(pos_rows, fusion.pos_dim, sub_seed()).weights
    if fusion.use_context and context_trainable:
        params["fusion.context"] = init_normal_table(config.vocab_size, fusion.context_dim, sub_seed()).weights
    params["fusion.proj_w"], params["fusion.proj_b"] = init_projection(
        fusion.fused_dim, config.d_model, sub_seed()
    )

    d, ff = config.d_model, config.d_ff

    def add_attention(prefix):
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{prefix}.{name}"] = dense((d, d))
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{prefix}.{name}"] = np.zeros(d)

    def add_norm(prefix):
        params[f"{prefix}.g"] = np.ones(d)
        params[f"{prefix}.b"] = np.zeros(d)

    def add_ffn(prefix):
        params[f"{prefix}.w1"] = dense((d, ff))
        params[f"{prefix}.b1"] = np.zeros(ff)
        params[f"{prefix}.w2"] = dense((ff, d))
        params[f"{prefix}.b2"] = np.zeros(d)

    if config.variant == ENCODER_DECODER:
        for i in range(config.n_layers_enc):
            add_norm(f"enc.{i}.norm1")
            add_attention(f"enc.{i}.attn")
            add_norm(f"enc.{i}.norm2")
            add_ffn(f"enc.{i}.ffn")
        if config.n_layers_enc > 0:
            add_norm("enc.norm")
    for i in range(config.n_layers_dec):
        add_norm(f"dec.{i}.norm1")
        add_attention(f"dec.{i}.self")
        if config.variant == ENCODER_DECODER:
            add_norm(f"dec.{i}.norm2")
            add_attention(f"dec.{i}.cross")
            add_norm(f"dec.{i}.norm3")
        else:
            add_norm(f"dec.{i}.norm2")
        add_ffn(f"dec.{i}.ffn")
    if config.n_layers_dec > 0:
        add_norm("dec.norm")
    params["out.w"] = dense((d, config.vocab_size))
    params["out.b"] = np.zeros(config.vocab_size)
    return Model(config, fusion, params, pinyin_rows, pos_rows, context_trainable)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, length, d = x.shape
    return x.reshape(b, length, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, length, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, length, h * dh)


def _mha_forward(params, prefix, x_q, x_kv, n_heads, mask):
    q, cq = linear_forward(x_q, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k, ck = linear_forward(x_kv, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v, cv = linear_forward(x_kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    heads, att_cache = attention_core_forward(
        _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads), mask
    )
    merged = _merge_heads(heads)
    out, co = linear_forward(merged, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return out, (prefix, n_heads, cq, ck, cv, att_cache, co)


def _mha_backward(dout, cache, grads):
    prefix, n_heads, cq, ck, cv, att_cache, co = cache
    dmerged, dwo, dbo = linear_backward(dout, co)
    grads[f"{prefix}.wo"] = grads.get(f"{prefix}.wo", 0) + dwo
    grads[f"{prefix}.bo"] = grads.get(f"{prefix}.bo", 0) + dbo
    dq_h, dk_h, dv_h = attention_core_backward(_split_heads(dmerged, n_heads), att_cache)
    dq, dwq, dbq = linear_backward(_merge_heads(dq_h), cq)
    dk, dwk, dbk = linear_backward(_merge_heads(dk_h), ck)
    dv, dwv, dbv = linear_backward(_merge_heads(dv_h), cv)
    for name, g in (("wq", dwq), ("bq", dbq), ("wk", dwk), ("bk", dbk), ("wv", dwv), ("bv", dbv)):
        key = f"{prefix}.{name}"
        grads[key] = grads.get(key, 0) + g
    return dq, dk + dv


def multi_head_attention(
    params: dict[str, np.ndarray],
    prefix: str,
    x: np.ndarray,
    n_heads: int,
    memory: np.ndarray | None = None,
    causal: bool = False,
    key_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Multi-head attention over ``x`` (self) or from ``x`` into ``memory``
    (cross).  Heads are disjoint d_model/n_heads slices of the learned
    projections.  Accepts (L, d_model) or (B, L, d_model)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
        memory = None if memory is None else memory[None]
    if x.shape[-1] % n_heads != 0:
        raise ValueError("d_model must be divisible by n_heads")
    kv = x if memory is None else memory
    mask = _build_mask(x.shape[1], kv.shape[1], causal, key_mask)
    out, _ = _mha_forward(params, prefix, x, kv, n_heads, mask)
    return out[0] if squeeze else out


def _build_mask(n_q: int, n_k: int, causal: bool, key_mask: np.ndarray | None):
    """Combine a causal triangle with a per-batch key-padding mask into a
    boolean array broadcastable over (B, H, n_q, n_k)."""
    mask = None
    if causal:
        mask = np.tril(np.ones((n_q, n_k), dtype=bool))
    if key_mask is not None:
        km = key_mask[:, None, None, :]  # (B,1,1,n_k)
        mask = km if mask is None else np.logical_and(mask, km)
    return mask


def _ffn_forward(params, prefix, x):
    h, c1 = linear_forward(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    a, cr = relu_forward(h)
    out, c2 = linear_forward(a, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    return out, (prefix, c1, cr, c2)


def _ffn_backward(dout, cache, grads):
    prefix, c1, cr, c2 = cache
    da, dw2, db2 = linear_backward(dout, c2)
    dh = relu_backward(da, cr)
    dx, dw1, db1 = linear_backward(dh, c1)
    for name, g in (("w1", dw1), ("b1", db1), ("w2", dw2), ("b2", db2)):
        key = f"{prefix}.{name}"
        grads[key] = grads.get(key, 0) + g
    return dx


def _norm_forward(params, prefix, x):
    out, cache = layernorm_forward(x, params[f"{prefix}.g"], params[f"{prefix}.b"])
    return out, (prefix, cache)


def _norm_backward(dout, cache, grads):
    prefix, ln_cache = cache
    dx, dg, db = layernorm_backward(dout, ln_cache)
    grads[f"{prefix}.g"] = grads.get(f"{prefix}.g", 0) + dg
    grads[f"{prefix}.b"] = grads.get(f"{prefix}.b", 0) + db
    return dx


def _sublayer_forward(x, inner_out, p, rng, train):
    dropped, dcache = dropout_forward(inner_out, p, rng, train)
    return x + dropped, dcache


class _Ctx:
    """Per-forward settings bundle (dropout probability and rng)."""

    def __init__(self, p, rng, train):
        self.p = p if train else 0.0
        self.rng = rng
        self.train = train


def _encoder_stack_forward(model: Model, x, key_mask, ctx: _Ctx):
    cfg = model.config
    caches = []
    for i in range(cfg.n_layers_enc):
        normed, cn1 = _norm_forward(model.params, f"enc.{i}.norm1", x)
        mask = _build_mask(x.shape[1], x.shape[1], False, key_mask)
        att, ca = _mha_forward(model.params, f"enc.{i}.attn", normed, normed, cfg.n_heads, mask)
        x, cd1 = _sublayer_forward(x, att, ctx.p, ctx.rng, ctx.train)
        normed2, cn2 = _norm_forward(model.params, f"enc.{i}.norm2", x)
        ff, cf = _ffn_forward(model.params, f"enc.{i}.ffn", normed2)
        x, cd2 = _sublayer_forward(x, ff, ctx.p, ctx.rng, ctx.train)
        caches.append((cn1, ca, cd1, cn2, cf, cd2))
    final_cache = None
    if cfg.n_layers_enc > 0:
        x, final_cache = _norm_forward(model.params, "enc.norm", x)
    return x, (caches, final_cache)


def _encoder_stack_backward(dx, cache, model: Model, grads):
    caches, final_cache = cache
    if final_cache is not None:
        dx = _norm_backward(dx, final_cache, grads)
    for cn1, ca, cd1, cn2, cf, cd2 in reversed(caches):
        dff = dropout_backward(dx, cd2)
        dnormed2 = _ffn_backward(dff, cf, grads)
        dx = dx + _norm_backward(dnormed2, cn2, grads)
        datt = dropout_backward(dx, cd1)
        dq, dkv = _mha_backward(datt, ca, grads)
        dx = dx + _norm_backward(dq + dkv, cn1, grads)
    return dx


def _decoder_stack_forward(model: Model, x, memory, memory_key_mask, ctx: _Ctx):
    cfg = model.config
    cross = memory is not None
    causal = _build_mask(x.shape[1], x.shape[1], True, None)
    caches = []
    for i in range(cfg.n_layers_dec):
        normed, cn1 = _norm_forward(model.params, f"dec.{i}.norm1", x)
        att, ca = _mha_forward(model.params, f"dec.{i}.self", normed, normed, cfg.n_heads, causal)
        x, cd1 = _sublayer_forward(x, att, ctx.p, ctx.rng, ctx.train)
        cross_cache = None
        if cross:
            normed_c, cnc = _norm_forward(model.params, f"dec.{i}.norm2", x)
            mask = _build_mask(x.shape[1], memory.shape[1], False, memory_key_mask)
            catt, cc = _mha_forward(model.params, f"dec.{i}.cross", normed_c, memory, cfg.n_heads, mask)
            x, cdc = _sublayer_forward(x, catt, ctx.p, ctx.rng, ctx.train)
            cross_cache = (cnc, cc, cdc)
        ffn_norm = f"dec.{i}.norm3" if cross else f"dec.{i}.norm2"
        normed2, cn2 = _norm_forward(model.params, ffn_norm, x)
        ff, cf = _ffn_forward(model.params, f"dec.{i}.ffn", normed2)
        x, cd2 = _sublayer_forward(x, ff, ctx.p, ctx.rng, ctx.train)
        caches.append((cn1, ca, cd1, cross_cache, cn2, cf, cd2))
    final_cache = None
    if cfg.n_layers_dec > 0:
        x, final_cache = _norm_forward(model.params, "dec.norm", x)
    return x, (caches, final_cache)


def _decoder_stack_backward(dx, cache, model: Model, grads):
    caches, final_cache = cache
    if final_cache is not None:
        dx = _norm_backward(dx, final_cache, grads)
    dmemory = 0
    for cn1, ca, cd1, cross_cache, cn2, cf, cd2 in reversed(caches):
        dff = dropout_backward(dx, cd2)
        dnormed2 = _ffn_backward(dff, cf, grads)
        dx = dx + _norm_backward(dnormed2, cn2, grads)
        if cross_cache is not None:
            cnc, cc, cdc = cross_cache
            dcatt = dropout_backward(dx, cdc)
            dq, dkv = _mha_backward(dcatt, cc, grads)
            dmemory = dmemory + dkv
            dx = dx + _norm_backward(dq, cnc, grads)
        datt = dropout_backward(dx, cd1)
        dq, dkv = _mha_backward(datt, ca, grads)
        dx = dx + _norm_backward(dq + dkv, cn1, grads)
    return dx, dmemory


def encoder_forward(inputs: np.ndarray, model: Model, pad_mask: np.ndarray | None = None) -> np.ndarray:
    """Run the encoder stack (plus its final norm) over fused inputs of
    shape (L, d_model) or (B, L, d_model), evaluation mode."""
    squeeze = inputs.ndim == 2
    x = inputs[None] if squeeze else inputs
    out, _ = _encoder_stack_forward(model, x, pad_mask, _Ctx(0.0, None, False))
    return out[0] if squeeze else out


def decoder_forward(
    targets: np.ndarray,
    memory: np.ndarray | None,
    model: Model,
    memory_pad_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Run the causal decoder stack over fused target inputs; with
    ``memory`` present each block also cross-attends into it."""
    squeeze = targets.ndim == 2
    x = targets[None] if squeeze else targets
    mem = None if memory is None else (memory[None] if memory.ndim == 2 else memory)
    out, _ = _decoder_stack_forward(model, x, mem, memory_pad_mask, _Ctx(0.0, None, False))
    return out[0] if squeeze else out


def _fuse_batch(model: Model, side: AnnotatedBatch, ctx: _Ctx):
    if side.char_ids.shape[1] > model.config.max_len:
        raise ValueError(
            f"sequence length {side.char_ids.shape[1]} exceeds max_len {model.config.max_len}"
        )
    fused, fcache = fuse_forward(
        side.char_ids, side.pinyin_ids, side.pos_ids, side.ctx, model.fusion, model.fusion_tables()
    )
    out, dcache = dropout_forward(fused, ctx.p, ctx.rng, ctx.train)
    return out, (fcache, dcache)


def _fuse_batch_backward(dout, cache, grads):
    fcache, dcache = cache
    dfused = dropout_backward(dout, dcache)
    for name, g in fuse_backward(dfused, fcache).items():
        key = f"fusion.{name}" if name not in ("proj_w", "proj_b") else f"fusion.{name}"
        grads[key] = grads.get(key, 0) + g


def model_forward(
    batch: ModelBatch,
    model: Model,
    train: bool = False,
    rng: np.random.Generator | None = None,
    want_cache: bool = False,
):
    """Logits of shape (B, L, vocab) over the decoder-side positions."""
    ctx = _Ctx(model.config.dropout, rng, train)
    if train and model.config.dropout > 0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")
    memory = None
    enc_cache = None
    src_mask = None
    if model.config.variant == ENCODER_DECODER:
        if batch.source is None:
            raise ValueError("encoder-decoder model needs batch.source")
        src_fused, src_fuse_cache = _fuse_batch(model, batch.source, ctx)
        src_mask = batch.source.pad_mask
        memory, enc_cache = _encoder_stack_forward(model, src_fused, src_mask, ctx)
    elif batch.source is not None:
        raise ValueError("decoder-only model takes no batch.source")
    dec_fused, dec_fuse_cache = _fuse_batch(model, batch.inputs, ctx)
    hidden, dec_cache = _decoder_stack_forward(model, dec_fused, memory, src_mask, ctx)
    logits, out_cache = linear_forward(hidden, model.params["out.w"], model.params["out.b"])
    if not want_cache:
        return logits
    cache = (enc_cache, src_fuse_cache if memory is not None else None,
             dec_fuse_cache, dec_cache, out_cache)
    return logits, cache


def model_backward(dlogits: np.ndarray, cache, model: Model) -> dict[str, np.ndarray]:
    """Analytic gradients of every parameter given dLoss/dlogits."""
    enc_cache, src_fuse_cache, dec_fuse_cache, dec_cache, out_cache = cache
    grads: dict[str, np.ndarray] = {}
    dhidden, dw, db = linear_backward(dlogits, out_cache)
    grads["out.w"] = dw
    grads["out.b"] = db
    ddec, dmemory = _decoder_stack_backward(dhidden, dec_cache, model, grads)
    _fuse_batch_backward(ddec, dec_fuse_cache, grads)
    if enc_cache is not None:
        dsrc = _encoder_stack_backward(dmemory, enc_cache, model, grads)
        _fuse_batch_backward(dsrc, src_fuse_cache, grads)
    return grads


def count_params(
    config: ModelConfig,
    fusion: FusionSpec,
    pinyin_rows: int = 0,
    pos_rows: int = 0,
    context_trainable: bool = True,
) -> int:
    """Closed-form parameter count for a model built from this config."""
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    total = 0
    if fusion.use_glyph:
        total += v * fusion.glyph_dim
    if fusion.use_pinyin:
        total += pinyin_rows * fusion.pinyin_dim
    if fusion.use_pos:
        total += pos_rows * fusion.pos_dim
    if fusion.use_context and context_trainable:
        total += v * fusion.context_dim
    total += fusion.fused_dim * d + d

    attention = 4 * (d * d + d)
    norm = 2 * d
    ffn = d * ff + ff + ff * d + d
    if config.variant == ENCODER_DECODER:
        total += config.n_layers_enc * (attention + 2 * norm + ffn)
        if config.n_layers_enc > 0:
            total += norm
        total += config.n_layers_dec * (2 * attention + 3 * norm + ffn)
    else:
        total += config.n_layers_dec * (attention + 2 * norm + ffn)
    if config.n_layers_dec > 0:
        total += norm
    total += d * v + v
    return total
