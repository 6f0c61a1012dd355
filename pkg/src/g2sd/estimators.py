"""Estimator API over the three training stages.

``MaePretrainer`` fits a masked autoencoder on unlabeled images,
``GenericDistiller`` aligns a fresh student with a frozen pretrained teacher,
and ``ViTClassifier`` trains a classifier with optional hard-label teacher
distillation and optional encoder initialization. All three follow sklearn
conventions (constructor params only stored, ``fit`` returns self, fitted
state in trailing-underscore attributes, ``get_params``/``set_params``), so
they compose with sklearn tooling such as ``clone``.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from g2sd import data, distill, mae, optim, tensor as T, vit
from g2sd.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from g2sd.distill import GenericDistillSpec
from g2sd.mae import MaeSpec
from g2sd.metrics import MetricsLog
from g2sd.tensor import Tensor
from g2sd.vit import PatchSpec, TokenBatch, VitSpec


class TrainingDiverged(RuntimeError):
    """Loss left the finite range; carries the stage and step index."""

    def __init__(self, stage, step, detail=""):
        super().__init__(f"{stage} diverged at step {step}: {detail}")
        self.stage = stage
        self.step = step


def check_images(X, image_size=None, channels=None):
    """Validate and convert an image batch to float32 (b, H, W, C)."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"expected (b, H, W, C) images, got shape {X.shape}")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape}")
    if channels is not None and X.shape[3] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[3]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    return X


def check_labels(y, n=None, n_classes=None):
    """Validate integer labels in [0, n_classes)."""
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be a 1-d integer array")
    if n is not None and len(y) != n:
        raise ValueError(f"got {len(y)} labels for {n} samples")
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ValueError(f"label {y.max()} outside [0, {n_classes})")
    return y.astype(np.int64)


def _rng_streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def _freeze_view(params):
    return {k: Tensor(v.data, requires_grad=False, check=False) for k, v in params.items()}


def _as_tensors(tensors, requires_grad=True):
    return {k: Tensor(v.copy(), requires_grad=requires_grad, check=False)
            for k, v in tensors.items()}


def _meta_patch(meta):
    return PatchSpec(int(meta["image_h"]), int(meta["image_w"]),
                     int(meta["channels"]), int(meta["patch_size"]))


def _encoder_meta(spec: VitSpec):
    return {
        "image_h": str(spec.patch.image_h),
        "image_w": str(spec.patch.image_w),
        "channels": str(spec.patch.channels),
        "patch_size": str(spec.patch.patch_size),
        "dim": str(spec.dim),
        "depth": str(spec.depth),
        "heads": str(spec.heads),
        "mlp_ratio": repr(spec.mlp_ratio),
        "distill_token": str(spec.use_distill_token).lower(),
    }


def _encoder_from_meta(meta):
    return VitSpec(
        patch=_meta_patch(meta),
        depth=int(meta["depth"]),
        dim=int(meta["dim"]),
        heads=int(meta["heads"]),
        mlp_ratio=float(meta["mlp_ratio"]),
        use_distill_token=meta.get("distill_token", "false") == "true",
    )


def save_model(path, kind, spec_meta, params):
    meta = {"kind": kind, **spec_meta}
    save_checkpoint(path, Checkpoint(meta=meta, tensors={
        k: p.data for k, p in params.items()
    }))


def _load_kind(path, expected):
    ckpt = load_checkpoint(path)
    kind = ckpt.meta.get("kind", "?")
    if kind != expected:
        raise ValueError(f"{path}: expected a {expected} checkpoint, found {kind}")
    return ckpt


def _resolve_mae(teacher):
    """Accept a fitted MaePretrainer or a checkpoint path; return a frozen
    (MaeSpec, params) pair."""
    if isinstance(teacher, MaePretrainer):
        if not hasattr(teacher, "params_"):
            raise ValueError("teacher MaePretrainer is not fitted")
        return teacher.spec_, _freeze_view(teacher.params_)
    if isinstance(teacher, (str, bytes)) or hasattr(teacher, "__fspath__"):
        ckpt = _load_kind(teacher, "mae")
        spec = MaeSpec(
            encoder=_encoder_from_meta(ckpt.meta),
            decoder_depth=int(ckpt.meta["decoder_depth"]),
            decoder_width=int(ckpt.meta["decoder_width"]),
            decoder_heads=int(ckpt.meta["decoder_heads"]),
            mask_ratio=float(ckpt.meta["mask_ratio"]),
        )
        return spec, _as_tensors(ckpt.tensors, requires_grad=False)
    raise TypeError(f"cannot interpret {type(teacher).__name__} as an MAE teacher")


def _resolve_classifier(teacher):
    if isinstance(teacher, ViTClassifier):
        if not hasattr(teacher, "params_"):
            raise ValueError("teacher classifier is not fitted")
        return teacher
    if isinstance(teacher, (str, bytes)) or hasattr(teacher, "__fspath__"):
        return ViTClassifier.load(teacher)
    raise TypeError(f"cannot interpret {type(teacher).__name__} as a classifier")


def _resolve_encoder_init(init):
    """Encoder weights from a fitted stage-0/1 estimator or checkpoint."""
    if init is None:
        return None
    if isinstance(init, (MaePretrainer, GenericDistiller, ViTClassifier)):
        if not hasattr(init, "params_"):
            raise ValueError("init estimator is not fitted")
        if isinstance(init, MaePretrainer):
            enc = init.spec_.encoder
        elif isinstance(init, GenericDistiller):
            enc = init.spec_.student_encoder
        else:
            enc = init.spec_
        return enc, {k: v.data for k, v in init.params_.items()}
    if isinstance(init, (str, bytes)) or hasattr(init, "__fspath__"):
        ckpt = load_checkpoint(init)
        return _encoder_from_meta(ckpt.meta), ckpt.tensors
    raise TypeError(f"cannot interpret {type(init).__name__} as encoder init")


def _step(stage, step_index, params, opt, lr, loss_thunk, lr_scales=None):
    """One optimization step under a fresh tape; surfaces divergence with the
    offending step index."""
    with T.tape() as tp:
        try:
            loss, extras = loss_thunk()
        except T.NonFiniteError as exc:
            raise TrainingDiverged(stage, step_index, str(exc)) from exc
        if not np.isfinite(loss.data):
            raise TrainingDiverged(stage, step_index, "non-finite loss")
        tp.backward(loss)
    opt.step(params, lr, lr_scales)
    T.zero_grads(params)
    return float(loss.data), extras


class MaePretrainer(BaseEstimator):
    """Masked-autoencoder pre-training of a ViT encoder plus pixel decoder.

    Parameters mirror the architecture and optimization settings; ``fit``
    consumes unlabeled images. Fitted state: ``spec_``, ``params_`` (flat
    name -> Tensor), ``history_`` (one dict per step), ``n_steps_``.
    """

    def __init__(self, image_size=32, channels=3, patch_size=4, dim=128, depth=6,
                 heads=4, mlp_ratio=4.0, decoder_depth=4, decoder_width=64,
                 decoder_heads=4, mask_ratio=0.75, epochs=12, batch_size=64,
                 lr=2e-3, weight_decay=0.05, betas=(0.9, 0.999), warmup_epochs=2,
                 min_lr=0.0, crop=False, flip=False, seed=0, metrics_path=None):
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.decoder_depth = decoder_depth
        self.decoder_width = decoder_width
        self.decoder_heads = decoder_heads
        self.mask_ratio = mask_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.warmup_epochs = warmup_epochs
        self.min_lr = min_lr
        self.crop = crop
        self.flip = flip
        self.seed = seed
        self.metrics_path = metrics_path

    def _build_spec(self):
        patch = PatchSpec(self.image_size, self.image_size, self.channels,
                          self.patch_size)
        enc = VitSpec(patch=patch, depth=self.depth, dim=self.dim, heads=self.heads,
                      mlp_ratio=self.mlp_ratio)
        return MaeSpec(encoder=enc, decoder_depth=self.decoder_depth,
                       decoder_width=self.decoder_width,
                       decoder_heads=self.decoder_heads, mask_ratio=self.mask_ratio)

    def fit(self, X, y=None):
        X = check_images(X, self.image_size, self.channels)
        spec = self._build_spec()
        init_rng, order_rng, mask_rng, aug_rng = _rng_streams(self.seed, 4)
        self.spec_ = spec
        self.params_ = mae.init_mae(spec, init_rng)
        opt = optim.AdamW(self.betas, weight_decay=self.weight_decay)
        steps_per_epoch = max(1, -(-len(X) // self.batch_size))
        n_steps = steps_per_epoch * self.epochs
        warmup = steps_per_epoch * self.warmup_epochs
        log = MetricsLog(self.metrics_path, ["loss", "lr"], fresh=True) \
            if self.metrics_path else None
        self.history_ = []
        n_tokens = spec.encoder.patch.n_tokens
        step = 0
        for _ in range(self.epochs):
            for idx in data.batches(len(X), self.batch_size, order_rng):
                images = data.augment(X[idx], aug_rng, self.crop, self.flip)
                plan = mae.sample_mask(n_tokens, self.mask_ratio, mask_rng, len(idx))
                lr = optim.cosine_schedule(step, n_steps, self.lr, warmup, self.min_lr)
                loss, _ = _step(
                    "pretrain", step, self.params_, opt, lr,
                    lambda: (mae.mae_forward(self.params_, images, spec, plan)[0], {}),
                )
                row = {"step": step, "loss": loss, "lr": lr}
                self.history_.append(row)
                if log:
                    log.append(step, {"loss": loss, "lr": lr})
                step += 1
        self.n_steps_ = step
        return self

    def reconstruct(self, X, seed=0):
        """Decode masked inputs back to image space for visual inspection."""
        X = check_images(X, self.image_size, self.channels)
        plan = mae.sample_mask(self.spec_.encoder.patch.n_tokens, self.mask_ratio,
                               np.random.default_rng(seed), len(X))
        with T.no_grad():
            _, pred, _ = mae.mae_forward(self.params_, X, self.spec_, plan)
        return vit.unpatchify(pred.data, self.spec_.encoder.patch), plan

    def save(self, path):
        meta = {
            **_encoder_meta(self.spec_.encoder),
            "decoder_depth": str(self.spec_.decoder_depth),
            "decoder_width": str(self.spec_.decoder_width),
            "decoder_heads": str(self.spec_.decoder_heads),
            "mask_ratio": repr(self.spec_.mask_ratio),
        }
        save_model(path, "mae", meta, self.params_)
        return path

    @classmethod
    def load(cls, path):
        ckpt = _load_kind(path, "mae")
        spec = MaeSpec(
            encoder=_encoder_from_meta(ckpt.meta),
            decoder_depth=int(ckpt.meta["decoder_depth"]),
            decoder_width=int(ckpt.meta["decoder_width"]),
            decoder_heads=int(ckpt.meta["decoder_heads"]),
            mask_ratio=float(ckpt.meta["mask_ratio"]),
        )
        est = cls(
            image_size=spec.encoder.patch.image_h,
            channels=spec.encoder.patch.channels,
            patch_size=spec.encoder.patch.patch_size,
            dim=spec.encoder.dim, depth=spec.encoder.depth, heads=spec.encoder.heads,
            mlp_ratio=spec.encoder.mlp_ratio, decoder_depth=spec.decoder_depth,
            decoder_width=spec.decoder_width, decoder_heads=spec.decoder_heads,
            mask_ratio=spec.mask_ratio,
        )
        est.spec_ = spec
        est.params_ = _as_tensors(ckpt.tensors)
        est.history_ = []
        return est


class GenericDistiller(BaseEstimator):
    """Stage 1: align a fresh student with a frozen MAE teacher's decoder
    features under a shared mask plan.

    The student applies ``target_layer`` decoder blocks and a bias-free
    projection onto the teacher's decoder width. Patch geometry is inherited
    from the teacher. Fitted state: ``spec_``, ``params_``, ``teacher_spec_``,
    ``history_``.
    """

    def __init__(self, teacher=None, student_dim=64, student_depth=3,
                 student_heads=4, mlp_ratio=4.0, decoder_width=32, decoder_heads=4,
                 target_layer=2, mask_ratio=0.75, delta=1.0, targets="decoder-all",
                 reduction="mean", epochs=12, batch_size=64, lr=2e-3,
                 weight_decay=0.05, betas=(0.9, 0.999), warmup_epochs=2, min_lr=0.0,
                 crop=False, flip=False, seed=0, metrics_path=None):
        self.teacher = teacher
        self.student_dim = student_dim
        self.student_depth = student_depth
        self.student_heads = student_heads
        self.mlp_ratio = mlp_ratio
        self.decoder_width = decoder_width
        self.decoder_heads = decoder_heads
        self.target_layer = target_layer
        self.mask_ratio = mask_ratio
        self.delta = delta
        self.targets = targets
        self.reduction = reduction
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.warmup_epochs = warmup_epochs
        self.min_lr = min_lr
        self.crop = crop
        self.flip = flip
        self.seed = seed
        self.metrics_path = metrics_path

    def fit(self, X, y=None):
        if self.teacher is None:
            raise ValueError("GenericDistiller requires a pretrained teacher")
        t_spec, t_params = _resolve_mae(self.teacher)
        if self.target_layer > t_spec.decoder_depth:
            raise ValueError(
                f"target layer {self.target_layer} exceeds teacher decoder depth "
                f"{t_spec.decoder_depth}"
            )
        patch = t_spec.encoder.patch
        X = check_images(X, patch.image_h, patch.channels)
        s_enc = VitSpec(patch=patch, depth=self.student_depth, dim=self.student_dim,
                        heads=self.student_heads, mlp_ratio=self.mlp_ratio)
        s_spec = GenericDistillSpec(
            student_encoder=s_enc, decoder_width=self.decoder_width,
            decoder_heads=self.decoder_heads, target_layer=self.target_layer,
            mask_ratio=self.mask_ratio, delta=self.delta, targets=self.targets,
            reduction=self.reduction)
        init_rng, order_rng, mask_rng, aug_rng = _rng_streams(self.seed, 4)
        self.teacher_spec_ = t_spec
        self.spec_ = s_spec
        self.params_ = distill.init_generic_student(
            s_spec, t_spec.decoder_width, t_spec.encoder.dim, init_rng)
        opt = optim.AdamW(self.betas, weight_decay=self.weight_decay)
        steps_per_epoch = max(1, -(-len(X) // self.batch_size))
        n_steps = steps_per_epoch * self.epochs
        warmup = steps_per_epoch * self.warmup_epochs
        log = MetricsLog(self.metrics_path, ["L_GD", "lr"], fresh=True) \
            if self.metrics_path else None
        self.history_ = []
        step = 0
        for _ in range(self.epochs):
            for idx in data.batches(len(X), self.batch_size, order_rng):
                images = data.augment(X[idx], aug_rng, self.crop, self.flip)
                plan = mae.sample_mask(patch.n_tokens, self.mask_ratio, mask_rng,
                                       len(idx))
                lr = optim.cosine_schedule(step, n_steps, self.lr, warmup, self.min_lr)
                loss, _ = _step(
                    "distill-generic", step, self.params_, opt, lr,
                    lambda: (distill.generic_step_loss(
                        self.params_, t_params, s_spec, t_spec, images, plan), {}),
                )
                self.history_.append({"step": step, "L_GD": loss, "lr": lr})
                if log:
                    log.append(step, {"L_GD": loss, "lr": lr})
                step += 1
        self.n_steps_ = step
        return self

    def save(self, path):
        meta = {
            **_encoder_meta(self.spec_.student_encoder),
            "decoder_width": str(self.spec_.decoder_width),
            "decoder_heads": str(self.spec_.decoder_heads),
            "target_layer": str(self.spec_.target_layer),
            "targets": self.spec_.targets,
        }
        save_model(path, "generic-student", meta, self.params_)
        return path


class ViTClassifier(ClassifierMixin, BaseEstimator):
    """ViT classifier with optional hard-label teacher distillation.

    With ``teacher`` set, a distillation token is appended and its head is
    supervised by the teacher's hard decisions (joint loss, weight
    ``kd_weight``); inference averages the two heads' log-probabilities.
    ``init`` warm-starts the encoder from a fitted stage-0/1 estimator or
    checkpoint. With no teacher and no init this is plain supervised training.
    """

    def __init__(self, image_size=32, channels=3, patch_size=4, dim=64, depth=3,
                 heads=4, mlp_ratio=4.0, drop_path=0.0, teacher=None, init=None,
                 distill_token=None, kd_weight=1.0, soft_kd=False,
                 label_smoothing=0.1, layer_decay=1.0,
                 epochs=10, batch_size=64, lr=1e-3, weight_decay=0.05,
                 betas=(0.9, 0.999), warmup_epochs=1, min_lr=0.0, crop=False,
                 flip=False, seed=0, eval_every=10, metrics_path=None):
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.drop_path = drop_path
        self.teacher = teacher
        self.init = init
        self.distill_token = distill_token
        self.kd_weight = kd_weight
        self.soft_kd = soft_kd
        self.label_smoothing = label_smoothing
        self.layer_decay = layer_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.warmup_epochs = warmup_epochs
        self.min_lr = min_lr
        self.crop = crop
        self.flip = flip
        self.seed = seed
        self.eval_every = eval_every
        self.metrics_path = metrics_path

    def _load_encoder(self, init_src, init_rng):
        """Copy encoder weights exactly; the distillation token, when present,
        starts as the class token plus small noise."""
        src_spec, src_tensors = init_src
        mine = self.spec_
        if (src_spec.patch, src_spec.depth, src_spec.dim, src_spec.heads) != (
                mine.patch, mine.depth, mine.dim, mine.heads):
            raise ValueError(
                "init encoder architecture does not match this classifier "
                f"({src_spec} vs {mine})"
            )
        for name, p in self.params_.items():
            if not name.startswith("enc.") or name == "enc.distill_token":
                continue
            if name not in src_tensors:
                raise ValueError(f"init checkpoint is missing {name!r}")
            src = src_tensors[name]
            if src.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            p.data = src.astype(np.float32, copy=True)
        if "enc.distill_token" in self.params_:
            tok = self.params_["enc.cls_token"].data
            noise = init_rng.normal(0.0, 0.02, tok.shape).astype(np.float32)
            self.params_["enc.distill_token"].data = tok + noise

    def _forward(self, images, rng=None):
        batch = vit.patchify(images, self.spec_.patch)
        feats = vit.encode(self.params_, batch, self.spec_, rng=rng)
        return vit.classify(self.params_, vit.final_norm(self.params_, feats),
                            self.spec_)

    def fit(self, X, y, eval_set=None):
        X = check_images(X, self.image_size, self.channels)
        y = check_labels(y, n=len(X))
        self.n_classes_ = int(y.max()) + 1
        if self.n_classes_ < 2:
            raise ValueError("need at least two classes")
        self.classes_ = np.arange(self.n_classes_)
        teacher = None
        if self.teacher is not None:
            teacher = _resolve_classifier(self.teacher)
            if teacher.n_classes_ != self.n_classes_:
                raise ValueError(
                    f"teacher predicts {teacher.n_classes_} classes, data has "
                    f"{self.n_classes_}"
                )
        use_distill = (self.distill_token if self.distill_token is not None
                       else teacher is not None)
        distilling = teacher is not None and (self.kd_weight > 0 or self.soft_kd)
        patch = PatchSpec(self.image_size, self.image_size, self.channels,
                          self.patch_size)
        self.spec_ = VitSpec(patch=patch, depth=self.depth, dim=self.dim,
                             heads=self.heads, mlp_ratio=self.mlp_ratio,
                             drop_path=self.drop_path,
                             use_distill_token=use_distill)
        init_rng, order_rng, aug_rng, path_rng = _rng_streams(self.seed, 4)
        self.params_ = vit.init_encoder(self.spec_, init_rng)
        vit.init_heads(self.spec_, self.n_classes_, init_rng, self.params_)
        init_src = _resolve_encoder_init(self.init)
        if init_src is not None:
            self._load_encoder(init_src, init_rng)
        self.init_encoder_state_ = {
            k: v.data.copy() for k, v in self.params_.items() if k.startswith("enc.")
        }
        scales = optim.layer_decay_scales(list(self.params_), self.depth,
                                          self.layer_decay)
        opt = optim.AdamW(self.betas, weight_decay=self.weight_decay)
        steps_per_epoch = max(1, -(-len(X) // self.batch_size))
        n_steps = steps_per_epoch * self.epochs
        warmup = steps_per_epoch * self.warmup_epochs
        fields = ["L_Task", "L_KD", "L_SD", "lr", "eval_acc"]
        log = MetricsLog(self.metrics_path, fields, fresh=True) \
            if self.metrics_path else None
        self.history_ = []
        eval_acc = self._maybe_eval(eval_set, X, y)
        # without augmentation the teacher sees identical images every epoch,
        # so its scores can be computed once up front
        cached_scores = None
        if distilling and not (self.crop or self.flip):
            cached_scores = teacher.decision_scores(X)
        step = 0
        for epoch in range(self.epochs):
            for idx in data.batches(len(X), self.batch_size, order_rng):
                images = data.augment(X[idx], aug_rng, self.crop, self.flip)
                labels = y[idx]
                lr = optim.cosine_schedule(step, n_steps, self.lr, warmup, self.min_lr)

                def loss_thunk():
                    logits, dlogits = self._forward(images, rng=path_rng)
                    if not distilling:
                        total, task, kd = distill.specific_loss(
                            logits, dlogits, labels, labels, beta=0.0,
                            smoothing=self.label_smoothing)
                        return total, {"L_Task": float(task.data),
                                       "L_KD": float(kd.data)}
                    scores = (cached_scores[idx] if cached_scores is not None
                              else teacher.decision_scores(images))
                    if self.soft_kd:
                        task = T.softmax_cross_entropy(logits, labels,
                                                       self.label_smoothing)
                        kd = distill.soft_distillation_loss(dlogits, scores)
                        total = T.add(task, T.mul(kd, float(self.kd_weight)))
                    else:
                        total, task, kd = distill.specific_loss(
                            logits, dlogits, labels, distill.hard_label(scores),
                            beta=self.kd_weight, smoothing=self.label_smoothing)
                    return total, {"L_Task": float(task.data), "L_KD": float(kd.data)}

                loss, extras = _step("distill-specific", step, self.params_, opt,
                                     lr, loss_thunk, scales)
                row = {"step": step, "L_SD": loss, "lr": lr, "eval_acc": eval_acc,
                       **extras}
                self.history_.append(row)
                if log:
                    log.append(step, {"L_Task": extras["L_Task"],
                                      "L_KD": extras["L_KD"], "L_SD": loss,
                                      "lr": lr, "eval_acc": eval_acc})
                step += 1
            if (epoch + 1) % self.eval_every == 0 or epoch == self.epochs - 1:
                eval_acc = self._maybe_eval(eval_set, X, y)
                if self.history_:
                    self.history_[-1]["eval_acc"] = eval_acc
        self.n_steps_ = step
        return self

    def _maybe_eval(self, eval_set, X, y):
        if eval_set is not None:
            return float(self.score(*eval_set))
        return float(self.score(X, y))

    def decision_scores(self, X, keep=None, batch_size=None):
        """Combined-head log-probabilities as a plain array.

        ``keep`` (n, k) restricts inference to those patch-token indices per
        sample (token-drop occlusion); special tokens always remain.
        """
        X = check_images(X, self.image_size, self.channels)
        batch_size = batch_size or max(self.batch_size, 64)
        out = []
        with T.no_grad():
            for start in range(0, len(X), batch_size):
                images = X[start:start + batch_size]
                if keep is None:
                    logits, dlogits = self._forward(images)
                else:
                    logits, dlogits = self._forward_subset(
                        images, keep[start:start + batch_size])
                out.append(vit.combined_log_probs(logits, dlogits).data)
        return np.concatenate(out, axis=0)

    def _forward_subset(self, images, keep):
        full = vit.patchify(images, self.spec_.patch)
        tokens = np.take_along_axis(full.tokens.data, keep[:, :, None], axis=1)
        batch = TokenBatch(Tensor(tokens, check=False), keep, 0)
        feats = vit.encode(self.params_, batch, self.spec_)
        return vit.classify(self.params_, vit.final_norm(self.params_, feats),
                            self.spec_)

    def predict_log_proba(self, X):
        return self.decision_scores(X)

    def predict(self, X):
        return self.decision_scores(X).argmax(axis=1)

    def encoder_features(self, X, keep=None, layer=None, batch_size=None):
        """Mean-pooled patch-token features (class/distill slots excluded).

        ``layer`` taps the raw output of that 1-based block; default is the
        final-normed last block.
        """
        X = check_images(X, self.image_size, self.channels)
        batch_size = batch_size or max(self.batch_size, 64)
        out = []
        with T.no_grad():
            for start in range(0, len(X), batch_size):
                images = X[start:start + batch_size]
                full = vit.patchify(images, self.spec_.patch)
                if keep is not None:
                    sel = keep[start:start + batch_size]
                    tokens = np.take_along_axis(full.tokens.data, sel[:, :, None], 1)
                    full = TokenBatch(Tensor(tokens, check=False), sel, 0)
                feats = vit.encode(self.params_, full, self.spec_, upto=layer)
                if layer is None:
                    feats = vit.final_norm(self.params_, feats)
                out.append(feats.patch_tokens().data.mean(axis=1))
        return np.concatenate(out, axis=0)

    def save(self, path):
        meta = {**_encoder_meta(self.spec_), "n_classes": str(self.n_classes_)}
        save_model(path, "classifier", meta, self.params_)
        return path

    @classmethod
    def load(cls, path):
        ckpt = _load_kind(path, "classifier")
        spec = _encoder_from_meta(ckpt.meta)
        est = cls(
            image_size=spec.patch.image_h, channels=spec.patch.channels,
            patch_size=spec.patch.patch_size, dim=spec.dim, depth=spec.depth,
            heads=spec.heads, mlp_ratio=spec.mlp_ratio,
        )
        est.spec_ = spec
        est.params_ = _as_tensors(ckpt.tensors)
        est.n_classes_ = int(ckpt.meta["n_classes"])
        est.classes_ = np.arange(est.n_classes_)
        est.history_ = []
        return est
