"""Stage runners behind the CLI verbs, plus the end-to-end arms comparison.

Each runner consumes a resolved RunConfig and a run directory, writes its
artifacts (checkpoints, metrics CSVs, tables) there, and returns a small
result dict. ``run_pipeline`` chains every stage and emits a summary table
comparing the scratch / specific-only / generic-only / g2sd arms.
"""

import os

import numpy as np

from g2sd import analysis, data
from g2sd.config import ConfigError, RunConfig
from g2sd.estimators import (
    GenericDistiller,
    MaePretrainer,
    TrainingDiverged,
    ViTClassifier,
)

ARMS = ("scratch", "specific-only", "generic-only", "g2sd")


def _datasets(cfg: RunConfig, seed, splits=("train", "test")):
    out = {}
    sizes = {"unlabeled": "data.n_unlabeled", "train": "data.n_train",
             "test": "data.n_test"}
    for split in splits:
        out[split] = data.synth_dataset(
            cfg["data.recipe"], seed, cfg.get_int(sizes[split]),
            n_classes=cfg.get_int("data.classes"),
            image_size=cfg.get_int("data.image_size"), split=split)
    return out


def _mae_estimator(cfg: RunConfig, arch, seed, metrics_path=None):
    return MaePretrainer(
        image_size=cfg.get_int("data.image_size"),
        channels=cfg.get_int("data.channels"),
        patch_size=cfg.get_int("teacher.patch_size"),
        dim=cfg.get_int(f"{arch}.dim"), depth=cfg.get_int(f"{arch}.depth"),
        heads=cfg.get_int(f"{arch}.heads"),
        mlp_ratio=cfg.get_float(f"{arch}.mlp_ratio"),
        # the student-MAE baseline halves the teacher decoder depth, matching
        # its halved encoder depth
        decoder_depth=cfg.get_int("teacher.decoder_depth") if arch == "teacher"
        else max(1, cfg.get_int("teacher.decoder_depth") // 2),
        decoder_width=cfg.get_int("teacher.decoder_width") if arch == "teacher"
        else cfg.get_int("student.decoder_width"),
        decoder_heads=cfg.get_int(f"{arch}.decoder_heads"),
        mask_ratio=cfg.get_float("mae.mask_ratio"),
        epochs=cfg.get_int("mae.epochs"), batch_size=cfg.get_int("mae.batch_size"),
        lr=cfg.get_float("mae.lr"), weight_decay=cfg.get_float("mae.weight_decay"),
        betas=(cfg.get_float("mae.beta1"), cfg.get_float("mae.beta2")),
        warmup_epochs=cfg.get_int("mae.warmup_epochs"),
        crop=cfg.get_bool("augment.crop"), flip=cfg.get_bool("augment.flip"),
        seed=seed, metrics_path=metrics_path)


def _generic_estimator(cfg: RunConfig, teacher, seed, metrics_path=None, **over):
    kwargs = dict(
        teacher=teacher,
        student_dim=cfg.get_int("student.dim"),
        student_depth=cfg.get_int("student.depth"),
        student_heads=cfg.get_int("student.heads"),
        mlp_ratio=cfg.get_float("student.mlp_ratio"),
        decoder_width=cfg.get_int("student.decoder_width"),
        decoder_heads=cfg.get_int("student.decoder_heads"),
        target_layer=cfg.get_int("generic.target_layer"),
        mask_ratio=cfg.get_float("generic.mask_ratio"),
        delta=cfg.get_float("generic.delta"),
        targets=cfg.get_str("generic.targets"),
        reduction=cfg.get_str("generic.reduction"),
        epochs=cfg.get_int("generic.epochs"),
        batch_size=cfg.get_int("generic.batch_size"),
        lr=cfg.get_float("generic.lr"),
        weight_decay=cfg.get_float("generic.weight_decay"),
        betas=(cfg.get_float("generic.beta1"), cfg.get_float("generic.beta2")),
        warmup_epochs=cfg.get_int("generic.warmup_epochs"),
        crop=cfg.get_bool("augment.crop"), flip=cfg.get_bool("augment.flip"),
        seed=seed, metrics_path=metrics_path)
    kwargs.update(over)
    return GenericDistiller(**kwargs)


def _classifier(cfg: RunConfig, arch, seed, teacher=None, init=None,
                metrics_path=None):
    # layer decay only applies on top of a pretrained encoder; the wider
    # teacher gets its own schedule
    layer_decay = cfg.get_float("specific.layer_decay") if init is not None else 1.0
    tail = "teacher_epochs" if arch == "teacher" else "epochs"
    lr_key = "specific.teacher_lr" if arch == "teacher" else "specific.lr"
    return ViTClassifier(
        image_size=cfg.get_int("data.image_size"),
        channels=cfg.get_int("data.channels"),
        patch_size=cfg.get_int("teacher.patch_size"),
        dim=cfg.get_int(f"{arch}.dim"), depth=cfg.get_int(f"{arch}.depth"),
        heads=cfg.get_int(f"{arch}.heads"),
        mlp_ratio=cfg.get_float(f"{arch}.mlp_ratio"),
        teacher=teacher, init=init,
        kd_weight=cfg.get_float("specific.beta"),
        soft_kd=cfg.get_bool("specific.soft_kd"),
        label_smoothing=cfg.get_float("specific.smoothing"),
        layer_decay=layer_decay,
        epochs=cfg.get_int(f"specific.{tail}"),
        batch_size=cfg.get_int("specific.batch_size"),
        lr=cfg.get_float(lr_key),
        weight_decay=cfg.get_float("specific.weight_decay"),
        betas=(cfg.get_float("specific.beta1"), cfg.get_float("specific.beta2")),
        warmup_epochs=cfg.get_int("specific.warmup_epochs"),
        crop=cfg.get_bool("augment.crop"), flip=cfg.get_bool("augment.flip"),
        seed=seed, eval_every=cfg.get_int("specific.eval_every"),
        metrics_path=metrics_path)


def run_pretrain(cfg: RunConfig, out_dir):
    seed = cfg.get_int("run.seed")
    ds = _datasets(cfg, seed, splits=("unlabeled",))["unlabeled"]
    est = _mae_estimator(cfg, "teacher", seed,
                         metrics_path=os.path.join(out_dir, "metrics.csv"))
    est.fit(ds.images)
    path = est.save(os.path.join(out_dir, "mae.ckpt"))
    return {"checkpoint": path, "final_loss": est.history_[-1]["loss"],
            "steps": est.n_steps_}


def run_generic(cfg: RunConfig, out_dir):
    seed = cfg.get_int("run.seed")
    ds = _datasets(cfg, seed, splits=("unlabeled",))["unlabeled"]
    est = _generic_estimator(cfg, cfg["generic.teacher"], seed,
                             metrics_path=os.path.join(out_dir, "metrics.csv"))
    est.fit(ds.images)
    path = est.save(os.path.join(out_dir, "student.ckpt"))
    return {"checkpoint": path, "final_L_GD": est.history_[-1]["L_GD"],
            "steps": est.n_steps_}


def run_specific(cfg: RunConfig, out_dir, require_teacher=True):
    seed = cfg.get_int("run.seed")
    ds = _datasets(cfg, seed)
    teacher = cfg["specific.teacher"] or None
    init = cfg["specific.init"] or None
    if require_teacher and (teacher is None or init is None):
        raise ConfigError("distill-specific requires specific.teacher and specific.init")
    est = _classifier(cfg, "student", seed, teacher=teacher, init=init,
                      metrics_path=os.path.join(out_dir, "metrics.csv"))
    est.fit(ds["train"].images, ds["train"].labels,
            eval_set=(ds["test"].images, ds["test"].labels))
    path = est.save(os.path.join(out_dir, "classifier.ckpt"))
    acc = est.score(ds["test"].images, ds["test"].labels)
    return {"checkpoint": path, "accuracy": float(acc), "steps": est.n_steps_}


def run_baseline(cfg: RunConfig, out_dir):
    """Classifier arms without the two-stage requirement: scratch supervised,
    fine-tune from a checkpoint, or label distillation, depending on which of
    specific.teacher / specific.init are set."""
    return run_specific(cfg, out_dir, require_teacher=False)


def run_eval(cfg: RunConfig, out_dir):
    seed = cfg.get_int("run.seed")
    split = cfg["eval.split"]
    ds = _datasets(cfg, seed, splits=(split,))[split]
    model = ViTClassifier.load(cfg["eval.checkpoint"])
    acc = float(model.score(ds.images, ds.labels))
    analysis.write_table(os.path.join(out_dir, "eval.csv"),
                         [{"split": split, "n": len(ds), "accuracy": acc}],
                         ["split", "n", "accuracy"])
    return {"accuracy": acc, "split": split, "n": len(ds)}


def run_analyze(cfg: RunConfig, out_dir):
    seed = cfg.get_int("run.seed")
    ds = _datasets(cfg, seed, splits=("test",))["test"]
    ratios = cfg.get_floats("analyze.ratios")
    mode = cfg["analyze.occlusion_mode"]
    n_seeds = cfg.get_int("analyze.occlusion_seeds")
    corruption_spec = {
        "noise": cfg.get_floats("analyze.noise"),
        "shuffle": cfg.get_floats("analyze.shuffle"),
        "invert": cfg.get_floats("analyze.invert"),
    }
    models = {"model": ViTClassifier.load(cfg["analyze.checkpoint"])}
    if cfg["analyze.baseline"]:
        models["baseline"] = ViTClassifier.load(cfg["analyze.baseline"])
    report = {}
    for name, model in models.items():
        occ = analysis.occlusion_curve(model, ds.images, ds.labels, ratios,
                                       seed=seed, n_seeds=n_seeds, mode=mode)
        analysis.write_curve(os.path.join(out_dir, f"occlusion_{name}.dat"), occ,
                             ["ratio", "accuracy", "cka"])
        analysis.write_table(os.path.join(out_dir, f"occlusion_{name}.csv"), occ,
                             ["ratio", "accuracy", "cka"])
        rows = analysis.corruption_eval(model, ds.images, ds.labels,
                                        corruption_spec, seed=seed)
        analysis.write_table(os.path.join(out_dir, f"corruption_{name}.csv"), rows,
                             ["corruption", "strength", "accuracy", "delta"])
        report[name] = {"occlusion": occ, "corruption": rows}
    if cfg["analyze.teacher"]:
        teacher = ViTClassifier.load(cfg["analyze.teacher"])
        layered = analysis.cka_by_layer(models["model"], teacher, ds.images)
        rows = [{"layer": layer, "cka": cka} for layer, cka in layered]
        analysis.write_table(os.path.join(out_dir, "cka.csv"), rows, ["layer", "cka"])
        report["cka_to_teacher"] = rows
    return report


ABLATE_AXES = ("mask_ratio", "target_layer", "decoder_width", "decoder_depth",
               "targets")


def run_ablate(cfg: RunConfig, out_dir):
    """Sweep one generic-distillation axis, one metrics file per value."""
    axis = cfg["ablate.axis"]
    if axis not in ABLATE_AXES:
        raise ConfigError(f"ablate axis must be one of {ABLATE_AXES}, got {axis!r}")
    seed = cfg.get_int("run.seed")
    ds = _datasets(cfg, seed, splits=("unlabeled",))["unlabeled"]
    teacher = cfg["generic.teacher"]
    if not teacher:
        raise ConfigError("ablate requires generic.teacher")
    values = cfg.get_strs("ablate.values")
    summary = []
    for raw in values:
        # decoder depth is the same knob as the teacher target layer: the
        # student always applies as many blocks as the layer it imitates
        if axis == "mask_ratio":
            over = {"mask_ratio": float(raw)}
        elif axis in ("target_layer", "decoder_depth"):
            over = {"target_layer": int(raw)}
        elif axis == "decoder_width":
            over = {"decoder_width": int(raw)}
        else:
            over = {"targets": raw}
        tag = raw.replace("+", "_")
        metrics_path = os.path.join(out_dir, f"metrics_{axis}_{tag}.csv")
        est = _generic_estimator(cfg, teacher, seed, metrics_path=metrics_path,
                                 **over)
        est.fit(ds.images)
        summary.append({"axis": axis, "value": raw,
                        "final_L_GD": est.history_[-1]["L_GD"]})
    analysis.write_table(os.path.join(out_dir, "ablate_summary.csv"), summary,
                         ["axis", "value", "final_L_GD"])
    return {"axis": axis, "rows": summary}


def _stage(name, seed, fn):
    try:
        return fn()
    except TrainingDiverged as exc:
        raise RuntimeError(
            f"pipeline stage {name!r} (seed {seed}) failed at step {exc.step}"
        ) from exc


def run_pipeline(cfg: RunConfig, out_dir, seeds=None):
    """Train every arm across seeds and emit the comparison table.

    Arms: scratch supervised, specific-only (label distillation from scratch
    init), generic-only (stage 1 then plain fine-tune), and g2sd (both
    stages). ``pipeline.include_mae_arm`` adds a student-MAE-pretrain +
    fine-tune arm. Per arm and seed the report carries held-out accuracy,
    relative accuracy drop under token occlusion, and CKA to the fine-tuned
    teacher's representation.
    """
    seeds = list(seeds) if seeds is not None else cfg.get_ints("pipeline.seeds")
    occl_ratio = cfg.get_float("pipeline.occlusion_ratio")
    n_occl_seeds = cfg.get_int("analyze.occlusion_seeds")
    arms = list(ARMS)
    if cfg.get_bool("pipeline.include_mae_arm"):
        arms.append("mae")
    per_seed = {arm: [] for arm in arms}
    teacher_accs = []
    for seed in seeds:
        seed_dir = os.path.join(out_dir, f"seed-{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        ds = _datasets(cfg, seed, splits=("unlabeled", "train", "test"))
        fit_args = (ds["train"].images, ds["train"].labels)
        eval_set = (ds["test"].images, ds["test"].labels)

        teacher_mae = _stage("pretrain", seed, lambda: _mae_estimator(
            cfg, "teacher", seed,
            metrics_path=os.path.join(seed_dir, "teacher_mae.csv"),
        ).fit(ds["unlabeled"].images))
        teacher_mae.save(os.path.join(seed_dir, "teacher_mae.ckpt"))

        teacher_clf = _stage("teacher-finetune", seed, lambda: _classifier(
            cfg, "teacher", seed, init=teacher_mae,
            metrics_path=os.path.join(seed_dir, "teacher_ft.csv"),
        ).fit(*fit_args, eval_set=eval_set))
        teacher_clf.save(os.path.join(seed_dir, "teacher_classifier.ckpt"))
        teacher_accs.append(teacher_clf.score(*eval_set))

        generic = _stage("distill-generic", seed, lambda: _generic_estimator(
            cfg, teacher_mae, seed,
            metrics_path=os.path.join(seed_dir, "generic.csv"),
        ).fit(ds["unlabeled"].images))
        generic.save(os.path.join(seed_dir, "generic_student.ckpt"))

        models = {}
        models["scratch"] = _stage("train-baseline", seed, lambda: _classifier(
            cfg, "student", seed,
            metrics_path=os.path.join(seed_dir, "scratch.csv"),
        ).fit(*fit_args, eval_set=eval_set))
        models["specific-only"] = _stage("distill-specific", seed, lambda: _classifier(
            cfg, "student", seed, teacher=teacher_clf,
            metrics_path=os.path.join(seed_dir, "specific_only.csv"),
        ).fit(*fit_args, eval_set=eval_set))
        models["generic-only"] = _stage("finetune", seed, lambda: _classifier(
            cfg, "student", seed, init=generic,
            metrics_path=os.path.join(seed_dir, "generic_only.csv"),
        ).fit(*fit_args, eval_set=eval_set))
        models["g2sd"] = _stage("distill-specific", seed, lambda: _classifier(
            cfg, "student", seed, teacher=teacher_clf, init=generic,
            metrics_path=os.path.join(seed_dir, "g2sd.csv"),
        ).fit(*fit_args, eval_set=eval_set))
        if "mae" in arms:
            student_mae = _stage("pretrain-student", seed, lambda: _mae_estimator(
                cfg, "student", seed,
                metrics_path=os.path.join(seed_dir, "student_mae.csv"),
            ).fit(ds["unlabeled"].images))
            models["mae"] = _stage("finetune", seed, lambda: _classifier(
                cfg, "student", seed, init=student_mae,
                metrics_path=os.path.join(seed_dir, "mae_ft.csv"),
            ).fit(*fit_args, eval_set=eval_set))

        teacher_feats = teacher_clf.encoder_features(ds["test"].images)
        for arm, model in models.items():
            model.save(os.path.join(seed_dir, f"{arm.replace('-', '_')}.ckpt"))
            occ = analysis.occlusion_curve(model, ds["test"].images,
                                           ds["test"].labels, [0.0, occl_ratio],
                                           seed=seed, n_seeds=n_occl_seeds)
            clean, occluded = occ[0]["accuracy"], occ[1]["accuracy"]
            drop = (clean - occluded) / max(clean, 1e-9)
            cka = analysis.linear_cka(model.encoder_features(ds["test"].images),
                                      teacher_feats)
            per_seed[arm].append({"seed": seed, "accuracy": clean,
                                  "occlusion_drop": drop, "cka_to_teacher": cka})

    summary = []
    for arm in arms:
        rows = per_seed[arm]
        summary.append({
            "arm": arm,
            "accuracy": float(np.mean([r["accuracy"] for r in rows])),
            "occlusion_drop": float(np.mean([r["occlusion_drop"] for r in rows])),
            "cka_to_teacher": float(np.mean([r["cka_to_teacher"] for r in rows])),
        })
    analysis.write_table(os.path.join(out_dir, "summary.csv"), summary,
                         ["arm", "accuracy", "occlusion_drop", "cka_to_teacher"])
    return {
        "seeds": seeds,
        "teacher_accuracy": float(np.mean(teacher_accs)),
        "per_seed": per_seed,
        "summary": summary,
    }
