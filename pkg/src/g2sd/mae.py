"""Masked-autoencoder machinery: random mask plans, visible-token encoding,
mask-token mixing, and the per-patch-normalized reconstruction loss.

The decoder sees all N patch positions: encoded features where tokens were
visible and a single shared learnable mask token elsewhere, plus decoder
positional embeddings over the full grid. The loss reads only masked
positions against per-patch standardized pixels.
"""

import math
from dataclasses import dataclass

import numpy as np

from g2sd import tensor as T
from g2sd import vit
from g2sd.tensor import Tensor
from g2sd.vit import TokenBatch, VitSpec


class MaskConfigError(ValueError):
    """Mask ratio leaves no visible or no masked tokens."""


@dataclass(frozen=True)
class MaeSpec:
    """Encoder spec plus decoder depth/width and the training mask ratio."""

    encoder: VitSpec
    decoder_depth: int
    decoder_width: int
    decoder_heads: int
    mask_ratio: float = 0.75

    def __post_init__(self):
        if self.decoder_depth < 1:
            raise ValueError("decoder depth must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.decoder_width % self.decoder_heads:
            raise ValueError("decoder width not divisible by decoder heads")


@dataclass
class MaskPlan:
    """Per-sample partition of patch indices into visible and masked sets."""

    visible: np.ndarray
    masked: np.ndarray
    ratio: float
    n_tokens: int

    @property
    def batch_size(self):
        return self.visible.shape[0]

    def validate(self):
        for v, m in zip(self.visible, self.masked):
            merged = np.concatenate([v, m])
            if len(np.unique(merged)) != self.n_tokens or merged.min() < 0 \
                    or merged.max() != self.n_tokens - 1:
                raise ValueError("visible and masked sets do not partition the tokens")
        return self


def n_masked(n_tokens, ratio):
    """Masked-token count: round(ratio * N), half away from zero."""
    return int(math.floor(ratio * n_tokens + 0.5))


def sample_mask(n_tokens, ratio, rng, batch_size=1) -> MaskPlan:
    """Uniform random visible/masked partition, fresh per sample.

    Index arrays come out sorted; ordering never affects downstream losses.
    """
    if not 0.0 < ratio < 1.0:
        raise MaskConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    km = n_masked(n_tokens, ratio)
    if km < 1 or km >= n_tokens:
        raise MaskConfigError(
            f"ratio {ratio} over {n_tokens} tokens leaves an empty set"
        )
    visible = np.empty((batch_size, n_tokens - km), dtype=np.int64)
    masked = np.empty((batch_size, km), dtype=np.int64)
    for s in range(batch_size):
        perm = rng.permutation(n_tokens)
        masked[s] = np.sort(perm[:km])
        visible[s] = np.sort(perm[km:])
    return MaskPlan(visible, masked, float(ratio), n_tokens)


def mix_tokens(visible_feats: Tensor, mask_token: Tensor, plan: MaskPlan,
               positions=None) -> Tensor:
    """Assemble the full decoder input sequence: encoded features at visible
    indices, the shared mask token at masked indices, then positional
    embeddings over the whole sequence when given."""
    if visible_feats.shape[1] != plan.visible.shape[1]:
        raise T.ShapeError(
            f"got {visible_feats.shape[1]} features for {plan.visible.shape[1]} "
            "visible tokens"
        )
    if mask_token.shape != (visible_feats.shape[2],):
        raise T.ShapeError("mask token width does not match decoder width")
    full = T.scatter_rows(visible_feats, plan.visible, plan.n_tokens)
    indicator = np.zeros((plan.batch_size, plan.n_tokens, 1), dtype=np.float32)
    indicator[np.arange(plan.batch_size)[:, None], plan.masked] = 1.0
    full = T.add(full, T.mul(Tensor(indicator, check=False), mask_token))
    if positions is not None:
        full = T.add(full, Tensor(positions, check=False))
    return full


def per_patch_normalize(patches, eps=1e-6):
    """Affine-free standardization of each patch pixel vector (the
    reconstruction target)."""
    patches = np.asarray(patches)
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return ((patches - mu) / np.sqrt(var + eps)).astype(np.float32)


def mae_loss(pred: Tensor, patches, plan: MaskPlan) -> Tensor:
    """Mean squared error between predictions and standardized pixels,
    evaluated at masked positions only."""
    if plan.masked.shape[1] == 0:
        raise MaskConfigError("no masked tokens to reconstruct")
    if pred.shape[2] != np.asarray(patches).shape[2]:
        raise T.ShapeError(
            f"prediction length {pred.shape[2]} != patch length "
            f"{np.asarray(patches).shape[2]}"
        )
    target = per_patch_normalize(patches)
    target = np.take_along_axis(target, plan.masked[:, :, None], axis=1)
    diff = T.sub(T.gather_rows(pred, plan.masked), Tensor(target, check=False))
    return T.mul(diff, diff).mean()


def init_mae(spec: MaeSpec, rng):
    """Encoder, neck, mask token, decoder blocks, decoder norm, pixel head."""
    params = vit.init_encoder(spec.encoder, rng)
    dim, width = spec.encoder.dim, spec.decoder_width
    params["dec.neck.w"] = vit._normal(rng, (dim, width))
    params["dec.neck.b"] = vit._zeros(width)
    params["dec.mask_token"] = vit._normal(rng, (width,))
    vit.init_blocks(params, "dec", spec.decoder_depth, width, spec.decoder_heads,
                    spec.encoder.mlp_ratio, rng)
    params["dec.norm.g"] = vit._ones(width)
    params["dec.norm.b"] = vit._zeros(width)
    params["dec.pred.w"] = vit._normal(rng, (width, spec.encoder.patch.token_len))
    params["dec.pred.b"] = vit._zeros(spec.encoder.patch.token_len)
    return params


def encode_visible(params, images, enc_spec: VitSpec, plan: MaskPlan, rng=None):
    """Run an encoder over visible patch tokens only (plus the class slot).

    Returns the final-normed features and the full raw patch table.
    """
    full = vit.patchify(images, enc_spec.patch)
    vis_tokens = np.take_along_axis(full.tokens.data, plan.visible[:, :, None], axis=1)
    vis = TokenBatch(Tensor(vis_tokens, check=False), plan.visible, 0)
    feats = vit.encode(params, vis, enc_spec, rng=rng)
    return vit.final_norm(params, feats), full.tokens.data


def decoder_input(params, enc_feats: TokenBatch, patch_spec, decoder_width,
                  plan: MaskPlan) -> Tensor:
    """Project visible features to decoder width and mix in mask tokens."""
    patch_feats = enc_feats.patch_tokens()
    h = T.linear(patch_feats, params["dec.neck.w"], params["dec.neck.b"])
    positions = vit.positional_embedding(patch_spec, decoder_width)
    return mix_tokens(h, params["dec.mask_token"], plan, positions)


def run_decoder(params, mixed: Tensor, spec: MaeSpec, upto=None) -> Tensor:
    """Decoder block stack; with ``upto`` return that layer's raw hidden
    features, otherwise finish with the norm and pixel prediction head."""
    if upto is not None and not 1 <= upto <= spec.decoder_depth:
        raise ValueError(
            f"layer {upto} outside decoder of depth {spec.decoder_depth}"
        )
    x = vit.run_blocks(params, "dec", mixed, spec.decoder_heads,
                       depth=spec.decoder_depth, upto=upto)
    if upto is not None:
        return x
    x = T.layer_norm(x, params["dec.norm.g"], params["dec.norm.b"], vit.LN_EPS)
    return T.linear(x, params["dec.pred.w"], params["dec.pred.b"])


def mae_forward(params, images, spec: MaeSpec, plan: MaskPlan, rng=None):
    """Full masked-autoencoder step: returns (loss, predictions, raw patches)."""
    enc_feats, patches = encode_visible(params, images, spec.encoder, plan, rng=rng)
    mixed = decoder_input(params, enc_feats, spec.encoder.patch, spec.decoder_width, plan)
    pred = run_decoder(params, mixed, spec)
    return mae_loss(pred, patches, plan), pred, patches
