"""Distillation objectives.

Generic stage: the student runs its own masked encoder and a shallow decoder
whose projected outputs chase the hidden features of a frozen teacher decoder
layer, under a mask plan shared between both models. Specific stage: a
classification student is trained jointly on ground truth and the frozen
fine-tuned teacher's hard decisions through a dedicated distillation token.
"""

from dataclasses import dataclass

import numpy as np

from g2sd import mae, tensor as T, vit
from g2sd.mae import MaeSpec, MaskPlan, per_patch_normalize
from g2sd.tensor import Tensor
from g2sd.vit import VitSpec

TARGET_MODES = (
    "decoder-all",
    "decoder-masked",
    "encoder-visible",
    "encoder-visible+decoder-masked",
)

REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class GenericDistillSpec:
    """Student architecture and alignment configuration for the generic stage.

    ``target_layer`` doubles as the student decoder depth: the student applies
    exactly as many decoder blocks as the teacher layer it imitates.
    """

    student_encoder: VitSpec
    decoder_width: int
    decoder_heads: int
    target_layer: int
    mask_ratio: float = 0.75
    delta: float = 1.0
    targets: str = "decoder-all"
    reduction: str = "mean"

    def __post_init__(self):
        if self.target_layer < 1:
            raise ValueError("target layer index is 1-based")
        if self.decoder_width % self.decoder_heads:
            raise ValueError("decoder width not divisible by decoder heads")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.delta <= 0:
            raise ValueError("smooth-l1 delta must be positive")
        if self.targets not in TARGET_MODES:
            raise ValueError(f"targets must be one of {TARGET_MODES}, got {self.targets!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")

    @property
    def needs_decoder(self):
        return "decoder" in self.targets

    @property
    def needs_encoder_projection(self):
        return "encoder-visible" in self.targets


@dataclass
class AlignmentBatch:
    """One step's alignment pair: detached teacher features, live student
    predictions, and the mask plan both sides shared."""

    teacher_features: np.ndarray
    student_predictions: Tensor
    plan: MaskPlan


def teacher_decoder_features(params, spec: MaeSpec, images, plan: MaskPlan, layer):
    """Hidden features of the teacher decoder's ``layer``-th block at every
    token position. Runs without gradient recording; the result is detached.
    """
    with T.no_grad():
        enc_feats, _ = mae.encode_visible(params, images, spec.encoder, plan)
        mixed = mae.decoder_input(params, enc_feats, spec.encoder.patch,
                                  spec.decoder_width, plan)
        return mae.run_decoder(params, mixed, spec, upto=layer).data


def teacher_encoder_features(params, enc_spec: VitSpec, images, plan: MaskPlan):
    """Teacher encoder patch features at visible positions, detached."""
    with T.no_grad():
        enc_feats, _ = mae.encode_visible(params, images, enc_spec, plan)
        return enc_feats.patch_tokens().data


def init_generic_student(spec: GenericDistillSpec, teacher_decoder_width,
                         teacher_encoder_dim, rng):
    """Student encoder, decoder stub of ``target_layer`` blocks, and bias-free
    projections onto the teacher widths (small uniform, fan-in scaled)."""
    params = vit.init_encoder(spec.student_encoder, rng)
    enc = spec.student_encoder
    width = spec.decoder_width
    if spec.needs_decoder:
        params["dec.neck.w"] = vit._normal(rng, (enc.dim, width))
        params["dec.neck.b"] = vit._zeros(width)
        params["dec.mask_token"] = vit._normal(rng, (width,))
        vit.init_blocks(params, "dec", spec.target_layer, width, spec.decoder_heads,
                        enc.mlp_ratio, rng)
        params["proj.w"] = _fan_in_uniform(rng, width, teacher_decoder_width)
    if spec.needs_encoder_projection:
        params["enc_proj.w"] = _fan_in_uniform(rng, enc.dim, teacher_encoder_dim)
    return params


def _fan_in_uniform(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32),
                  requires_grad=True)


def student_predictions(params, spec: GenericDistillSpec, images, plan: MaskPlan,
                        rng=None):
    """Student forward: masked encoding, ``target_layer`` decoder blocks, and
    the linear projection onto the teacher feature width.

    Returns (projected predictions over all N tokens, encoder features).
    """
    enc_feats, _ = mae.encode_visible(params, images, spec.student_encoder, plan,
                                      rng=rng)
    if not spec.needs_decoder:
        return None, enc_feats
    mixed = mae.decoder_input(params, enc_feats, spec.student_encoder.patch,
                              spec.decoder_width, plan)
    h = vit.run_blocks(params, "dec", mixed, spec.decoder_heads,
                       depth=spec.target_layer)
    return T.matmul(h, params["proj.w"]), enc_feats


def generic_loss(teacher_feats, student_preds: Tensor, plan: MaskPlan = None,
                 delta=1.0, tokens="all", reduction="mean") -> Tensor:
    """Smooth-l1 between standardized teacher features and raw student
    predictions.

    The affine-free normalization applies to the teacher side only. ``tokens``
    restricts the reduction to the masked or visible subset of a full-length
    sequence; the default covers every position.
    """
    teacher_feats = np.asarray(teacher_feats)
    if teacher_feats.shape != tuple(student_preds.shape):
        raise T.ShapeError(
            f"teacher {teacher_feats.shape} and student {tuple(student_preds.shape)} "
            "feature shapes differ"
        )
    if tokens not in ("all", "masked", "visible"):
        raise ValueError(f"unknown token subset {tokens!r}")
    target = per_patch_normalize(teacher_feats)
    if tokens != "all":
        if plan is None:
            raise ValueError(f"token subset {tokens!r} requires a mask plan")
        index = plan.masked if tokens == "masked" else plan.visible
        target = np.take_along_axis(target, index[:, :, None], axis=1)
        student_preds = T.gather_rows(student_preds, index)
    penalty = T.smooth_l1(T.sub(Tensor(target, check=False), student_preds), delta)
    return penalty.mean() if reduction == "mean" else penalty.sum()


def generic_step_loss(student, teacher, s_spec: GenericDistillSpec, t_spec: MaeSpec,
                      images, plan: MaskPlan, rng=None):
    """Stage-1 loss for one batch under the configured target mode."""
    preds, enc_feats = student_predictions(student, s_spec, images, plan, rng=rng)
    terms = []
    if s_spec.needs_decoder:
        t_dec = teacher_decoder_features(teacher, t_spec, images, plan,
                                         s_spec.target_layer)
        subset = "masked" if s_spec.targets.endswith("decoder-masked") else "all"
        terms.append(generic_loss(t_dec, preds, plan, s_spec.delta, subset,
                                  s_spec.reduction))
    if s_spec.needs_encoder_projection:
        t_enc = teacher_encoder_features(teacher, t_spec.encoder, images, plan)
        s_enc = T.matmul(enc_feats.patch_tokens(), student["enc_proj.w"])
        terms.append(generic_loss(t_enc, s_enc, plan, s_spec.delta, "all",
                                  s_spec.reduction))
    loss = terms[0]
    for extra in terms[1:]:
        loss = T.add(loss, extra)
    return loss


def hard_label(logits):
    """Teacher decision per row: argmax with ties broken by lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError(f"expected (batch, >=2 classes) logits, got {data.shape}")
    return data.argmax(axis=1)


def specific_loss(cls_logits, distill_logits, labels, teacher_labels, beta=1.0,
                  smoothing=0.1):
    """Joint stage-2 objective: smoothed cross-entropy on ground truth plus
    beta times unsmoothed cross-entropy on the teacher's hard labels.

    Returns (total, task term, distillation term).
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    task = T.softmax_cross_entropy(cls_logits, labels, smoothing)
    if beta == 0:
        return task, task, Tensor(np.zeros((), dtype=cls_logits.data.dtype))
    if distill_logits is None:
        raise ValueError("distillation head required when beta > 0")
    kd = T.softmax_cross_entropy(distill_logits, teacher_labels, 0.0)
    return T.add(task, T.mul(kd, float(beta))), task, kd


def soft_distillation_loss(student_logits, teacher_logits):
    """Ablation variant: cross-entropy against the teacher's soft distribution."""
    probs = T.softmax(Tensor(np.asarray(teacher_logits), check=False))
    lp = T.log_softmax(student_logits)
    return T.neg(T.mul(lp, probs.detach()).sum(axis=-1).mean())
