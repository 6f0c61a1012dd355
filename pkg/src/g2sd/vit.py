"""Vanilla ViT building blocks: patch partition, fixed 2D sin-cos positions,
pre-norm transformer blocks, class/distillation tokens, classification heads.

Models are plain dicts of name -> Tensor plus pure forward functions, so the
same weights can be evaluated concurrently and serialize to a flat namespace.
"""

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from g2sd import tensor as T
from g2sd.tensor import Tensor

LN_EPS = 1e-6


@dataclass(frozen=True)
class PatchSpec:
    """Image geometry and patch stride; token count is (H*W)/P^2."""

    image_h: int
    image_w: int
    channels: int
    patch_size: int

    def __post_init__(self):
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} not divisible by patch "
                f"size {self.patch_size}"
            )

    @property
    def grid_h(self):
        return self.image_h // self.patch_size

    @property
    def grid_w(self):
        return self.image_w // self.patch_size

    @property
    def n_tokens(self):
        return self.grid_h * self.grid_w

    @property
    def token_len(self):
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class VitSpec:
    """Transformer encoder hyperparameters."""

    patch: PatchSpec
    depth: int
    dim: int
    heads: int
    mlp_ratio: float = 4.0
    drop_path: float = 0.0
    use_distill_token: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if not 0.0 <= self.drop_path < 1.0:
            raise ValueError("drop_path must lie in [0, 1)")

    @property
    def n_special(self):
        return 2 if self.use_distill_token else 1


@dataclass
class TokenBatch:
    """Per-sample token sequences with grid positions.

    ``position_ids`` holds the patch-grid index of each token and -1 for
    special (class/distillation) slots, which always precede patch tokens.
    """

    tokens: Tensor
    position_ids: np.ndarray
    n_special: int = 0

    def patch_tokens(self):
        return self.tokens[:, self.n_special:]


def patchify(images, spec: PatchSpec) -> TokenBatch:
    """Split (b, H, W, C) images into raster-ordered tokens of length P*P*C.

    Within a patch, values are flattened row-major with channels last.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (spec.image_h, spec.image_w, spec.channels):
        raise ValueError(
            f"expected (b, {spec.image_h}, {spec.image_w}, {spec.channels}) images, "
            f"got {images.shape}"
        )
    b, p = images.shape[0], spec.patch_size
    x = images.reshape(b, spec.grid_h, p, spec.grid_w, p, spec.channels)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, spec.n_tokens, spec.token_len)
    ids = np.broadcast_to(np.arange(spec.n_tokens), (b, spec.n_tokens)).copy()
    return TokenBatch(Tensor(np.ascontiguousarray(x)), ids, n_special=0)


def unpatchify(tokens, spec: PatchSpec):
    """Exact inverse of :func:`patchify` for full-grid token batches."""
    if isinstance(tokens, TokenBatch):
        tokens = tokens.tokens
    data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    if data.ndim != 3 or data.shape[1] != spec.n_tokens or data.shape[2] != spec.token_len:
        raise ValueError(
            f"expected (b, {spec.n_tokens}, {spec.token_len}) tokens, got {data.shape}"
        )
    b, p = data.shape[0], spec.patch_size
    x = data.reshape(b, spec.grid_h, spec.grid_w, p, p, spec.channels)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, spec.image_h, spec.image_w, spec.channels)


@functools.lru_cache(maxsize=32)
def _positional_embedding_cached(grid_h, grid_w, dim):
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    rows = np.repeat(np.arange(grid_h, dtype=np.float64), grid_w)
    cols = np.tile(np.arange(grid_w, dtype=np.float64), grid_h)
    parts = []
    for coord in (rows, cols):
        angles = np.outer(coord, omega)
        parts.extend([np.sin(angles), np.cos(angles)])
    emb = np.concatenate(parts, axis=1).astype(np.float32)
    emb.setflags(write=False)
    return emb


def positional_embedding(spec: PatchSpec, dim):
    """Fixed 2D sin-cos embeddings, one row per grid position, values in [-1, 1]."""
    if dim % 4:
        raise ValueError(f"positional embedding dim must be divisible by 4, got {dim}")
    return _positional_embedding_cached(spec.grid_h, spec.grid_w, dim)


def _normal(rng, shape, std=0.02):
    return Tensor(rng.normal(0.0, std, shape).astype(np.float32), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def init_blocks(params, prefix, depth, dim, heads, mlp_ratio, rng):
    """Append transformer-block parameters under ``prefix`` to ``params``.

    Attention carries query/value biases but no key bias: a key bias shifts
    every attention logit in a row equally, so it would be unreachable by
    gradients.
    """
    hidden = int(dim * mlp_ratio)
    for i in range(depth):
        base = f"{prefix}.blocks.{i}"
        params[f"{base}.ln1.g"] = _ones(dim)
        params[f"{base}.ln1.b"] = _zeros(dim)
        params[f"{base}.attn.wq"] = _normal(rng, (dim, dim))
        params[f"{base}.attn.bq"] = _zeros(dim)
        params[f"{base}.attn.wk"] = _normal(rng, (dim, dim))
        params[f"{base}.attn.wv"] = _normal(rng, (dim, dim))
        params[f"{base}.attn.bv"] = _zeros(dim)
        params[f"{base}.attn.wo"] = _normal(rng, (dim, dim))
        params[f"{base}.attn.bo"] = _zeros(dim)
        params[f"{base}.ln2.g"] = _ones(dim)
        params[f"{base}.ln2.b"] = _zeros(dim)
        params[f"{base}.mlp.w1"] = _normal(rng, (dim, hidden))
        params[f"{base}.mlp.b1"] = _zeros(hidden)
        params[f"{base}.mlp.w2"] = _normal(rng, (hidden, dim))
        params[f"{base}.mlp.b2"] = _zeros(dim)


def init_encoder(spec: VitSpec, rng, params=None, prefix="enc"):
    """Parameters for patch projection, special tokens, blocks, final norm."""
    params = {} if params is None else params
    params[f"{prefix}.patch_embed.w"] = _normal(rng, (spec.patch.token_len, spec.dim))
    params[f"{prefix}.patch_embed.b"] = _zeros(spec.dim)
    params[f"{prefix}.cls_token"] = _normal(rng, (spec.dim,))
    if spec.use_distill_token:
        params[f"{prefix}.distill_token"] = _normal(rng, (spec.dim,))
    init_blocks(params, prefix, spec.depth, spec.dim, spec.heads, spec.mlp_ratio, rng)
    params[f"{prefix}.norm.g"] = _ones(spec.dim)
    params[f"{prefix}.norm.b"] = _zeros(spec.dim)
    return params


def init_heads(spec: VitSpec, n_classes, rng, params=None):
    params = {} if params is None else params
    params["head.w"] = _normal(rng, (spec.dim, n_classes))
    params["head.b"] = _zeros(n_classes)
    if spec.use_distill_token:
        params["head_dist.w"] = _normal(rng, (spec.dim, n_classes))
        params["head_dist.b"] = _zeros(n_classes)
    return params


def drop_path(x, rate, rng):
    """Per-sample stochastic depth on a residual branch; identity when inactive."""
    if rate <= 0.0 or rng is None:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape[0]) < keep).astype(np.float32) / keep
    return T.mul(x, Tensor(mask.reshape((-1,) + (1,) * (x.ndim - 1)), check=False))


def _split_heads(x, heads):
    b, n, dim = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, dim // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * hd))


def run_blocks(params, prefix, x, heads, depth=None, upto=None,
               drop_path_rate=0.0, rng=None):
    """Pre-norm transformer stack under ``prefix``; ``upto`` stops after that
    many blocks (1-based) without running the rest."""
    i = 0
    limit = depth if upto is None else upto
    while limit is None or i < limit:
        base = f"{prefix}.blocks.{i}"
        if f"{base}.ln1.g" not in params:
            if limit is not None:
                raise KeyError(f"missing block parameters under {base}")
            break
        h = T.layer_norm(x, params[f"{base}.ln1.g"], params[f"{base}.ln1.b"], LN_EPS)
        q = _split_heads(T.linear(h, params[f"{base}.attn.wq"], params[f"{base}.attn.bq"]), heads)
        k = _split_heads(T.linear(h, params[f"{base}.attn.wk"]), heads)
        v = _split_heads(T.linear(h, params[f"{base}.attn.wv"], params[f"{base}.attn.bv"]), heads)
        a = _merge_heads(T.scaled_dot_product_attention(q, k, v))
        a = T.linear(a, params[f"{base}.attn.wo"], params[f"{base}.attn.bo"])
        x = T.add(x, drop_path(a, drop_path_rate, rng))
        h = T.layer_norm(x, params[f"{base}.ln2.g"], params[f"{base}.ln2.b"], LN_EPS)
        m = T.linear(T.gelu(T.linear(h, params[f"{base}.mlp.w1"], params[f"{base}.mlp.b1"])),
                     params[f"{base}.mlp.w2"], params[f"{base}.mlp.b2"])
        x = T.add(x, drop_path(m, drop_path_rate, rng))
        i += 1
    return x


def encode(params, batch: TokenBatch, spec: VitSpec, prefix="enc",
           use_positions=True, rng=None, upto=None) -> TokenBatch:
    """Project raw patch tokens, add positions, prepend special tokens, and
    run the block stack. Token count is preserved; the final norm is applied
    separately by :func:`final_norm` so a depth-0 stack is exactly the
    embedding. ``upto`` stops after that many blocks for feature taps."""
    if batch.n_special:
        raise ValueError("encode expects raw patch tokens without special slots")
    x = batch.tokens
    if x.shape[-1] != spec.patch.token_len:
        raise T.ShapeError(
            f"patch tokens of length {x.shape[-1]} do not match spec "
            f"({spec.patch.token_len})"
        )
    x = T.linear(x, params[f"{prefix}.patch_embed.w"], params[f"{prefix}.patch_embed.b"])
    if use_positions:
        table = positional_embedding(spec.patch, spec.dim)
        x = T.add(x, Tensor(table[batch.position_ids], check=False))
    b = x.shape[0]
    one = Tensor(np.ones((b, 1, 1), dtype=np.float32), check=False)
    specials = [T.mul(one, params[f"{prefix}.cls_token"])]
    if spec.use_distill_token:
        specials.append(T.mul(one, params[f"{prefix}.distill_token"]))
    x = T.concat(specials + [x], axis=1)
    if upto is not None and not 1 <= upto <= spec.depth:
        raise ValueError(f"layer {upto} outside encoder of depth {spec.depth}")
    x = run_blocks(params, prefix, x, spec.heads, depth=spec.depth, upto=upto,
                   drop_path_rate=spec.drop_path, rng=rng)
    n_special = len(specials)
    ids = np.concatenate(
        [np.full((b, n_special), -1, dtype=batch.position_ids.dtype), batch.position_ids],
        axis=1,
    )
    return TokenBatch(x, ids, n_special=n_special)


def final_norm(params, feats: TokenBatch, prefix="enc") -> TokenBatch:
    """Encoder output norm, applied by consumers of encoded features."""
    x = T.layer_norm(feats.tokens, params[f"{prefix}.norm.g"],
                     params[f"{prefix}.norm.b"], LN_EPS)
    return TokenBatch(x, feats.position_ids, feats.n_special)


def classify(params, feats: TokenBatch, spec: VitSpec):
    """Logits from the class-token head, plus distillation-head logits when
    the spec carries a distillation token."""
    if feats.n_special < 1:
        raise ValueError("class token slot missing from features")
    logits = T.linear(feats.tokens[:, 0], params["head.w"], params["head.b"])
    if not spec.use_distill_token:
        return logits, None
    if feats.n_special < 2:
        raise ValueError("distillation token slot missing from features")
    distill = T.linear(feats.tokens[:, 1], params["head_dist.w"], params["head_dist.b"])
    return logits, distill


def combined_log_probs(logits, distill_logits=None):
    """Inference-time prediction: mean of the two heads' log-probabilities,
    or the class head alone when no distillation head exists."""
    lp = T.log_softmax(logits)
    if distill_logits is None:
        return lp
    return T.mul(T.add(lp, T.log_softmax(distill_logits)), 0.5)
