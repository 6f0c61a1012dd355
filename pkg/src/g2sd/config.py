"""Flat key=value run configuration with section prefixes.

Every run resolves defaults, then an optional config file, then repeatable
``--set key=value`` overrides. Overrides (and file keys) must name keys that
exist in the defaults, so the resolved echo written into each run directory
fully determines the run.
"""

STAGES = (
    "pretrain", "distill-generic", "distill-specific", "train-baseline",
    "eval", "analyze", "ablate", "pipeline",
)


class ConfigError(ValueError):
    """Unknown key, malformed line, or missing stage requirement."""


DEFAULTS = {
    "run.stage": "pipeline",
    "run.seed": "0",
    "run.workers": "1",
    # dataset synthesis
    "data.recipe": "textured-digits",
    "data.classes": "10",
    "data.image_size": "32",
    "data.channels": "3",
    "data.n_unlabeled": "1536",
    "data.n_train": "256",
    "data.n_test": "512",
    "augment.crop": "false",
    "augment.flip": "false",
    # teacher architecture (MAE-pretrained ViT)
    "teacher.patch_size": "8",
    "teacher.dim": "128",
    "teacher.depth": "6",
    "teacher.heads": "4",
    "teacher.mlp_ratio": "4.0",
    "teacher.decoder_depth": "4",
    "teacher.decoder_width": "64",
    "teacher.decoder_heads": "4",
    # student architecture
    "student.dim": "64",
    "student.depth": "3",
    "student.heads": "4",
    "student.mlp_ratio": "4.0",
    "student.decoder_width": "32",
    "student.decoder_heads": "4",
    # stage 0: masked-autoencoder pre-training
    "mae.mask_ratio": "0.75",
    "mae.epochs": "20",
    "mae.batch_size": "64",
    "mae.lr": "2e-3",
    "mae.weight_decay": "0.05",
    "mae.beta1": "0.9",
    "mae.beta2": "0.95",
    "mae.warmup_epochs": "2",
    # stage 1: generic distillation
    "generic.teacher": "",
    "generic.target_layer": "2",
    "generic.mask_ratio": "0.75",
    "generic.delta": "1.0",
    "generic.targets": "decoder-all",
    "generic.reduction": "mean",
    "generic.epochs": "15",
    "generic.batch_size": "64",
    "generic.lr": "2e-3",
    "generic.weight_decay": "0.05",
    "generic.beta1": "0.9",
    "generic.beta2": "0.999",
    "generic.warmup_epochs": "2",
    # stage 2: specific distillation / classifier training
    "specific.teacher": "",
    "specific.init": "",
    "specific.beta": "1.0",
    "specific.soft_kd": "false",
    "specific.smoothing": "0.1",
    "specific.layer_decay": "0.75",
    "specific.eval_every": "10",
    "specific.epochs": "150",
    "specific.teacher_epochs": "200",
    "specific.batch_size": "64",
    "specific.lr": "1e-2",
    "specific.teacher_lr": "3e-3",
    "specific.weight_decay": "0.05",
    "specific.beta1": "0.9",
    "specific.beta2": "0.999",
    "specific.warmup_epochs": "10",
    # evaluation / analysis
    "eval.checkpoint": "",
    "eval.split": "test",
    "analyze.checkpoint": "",
    "analyze.baseline": "",
    "analyze.teacher": "",
    "analyze.ratios": "0,0.25,0.5,0.75",
    "analyze.occlusion_mode": "drop",
    "analyze.occlusion_seeds": "3",
    "analyze.noise": "0.25,0.5",
    "analyze.shuffle": "0.25,0.5",
    "analyze.invert": "1.0",
    # ablation harness and pipeline
    "ablate.axis": "target_layer",
    "ablate.values": "1,2,4",
    "pipeline.seeds": "0,1,2",
    "pipeline.occlusion_ratio": "0.5",
    "pipeline.include_mae_arm": "false",
}

_REQUIRED = {
    "distill-generic": ("generic.teacher",),
    "distill-specific": ("specific.teacher", "specific.init"),
    "eval": ("eval.checkpoint",),
    "analyze": ("analyze.checkpoint",),
}


def parse_config(text):
    """key=value lines; '#' starts a comment; blank lines ignored."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def format_config(cfg):
    return "\n".join(f"{k} = {cfg[k]}" for k in sorted(cfg)) + "\n"


def resolve(file_text=None, overrides=(), seed=None, stage=None):
    """Defaults <- file <- overrides, rejecting keys outside the schema."""
    cfg = dict(DEFAULTS)
    if file_text:
        for key, value in parse_config(file_text).items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in cfg:
            raise ConfigError(f"--set references unknown key {key!r}")
        cfg[key] = value.strip()
    if seed is not None:
        cfg["run.seed"] = str(int(seed))
    if stage is not None:
        cfg["run.stage"] = stage
    return cfg


def validate_stage(cfg, stage):
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    for key in _REQUIRED.get(stage, ()):
        if not cfg.get(key):
            raise ConfigError(f"stage {stage} requires {key} to be set")


class RunConfig:
    """Typed accessors over a resolved flat config."""

    def __init__(self, values):
        self.values = dict(values)

    def __getitem__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"missing config key {key!r}") from None

    def get_str(self, key):
        return self[key]

    def get_int(self, key):
        try:
            return int(self[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {self[key]!r}") from None

    def get_float(self, key):
        try:
            return float(self[key])
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {self[key]!r}") from None

    def get_bool(self, key):
        value = self[key].lower()
        if value in ("true", "1", "yes"):
            return True
        if value in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {self[key]!r}")

    def get_floats(self, key):
        raw = self[key]
        return [float(v) for v in raw.split(",") if v.strip() != ""]

    def get_ints(self, key):
        return [int(v) for v in self[key].split(",") if v.strip() != ""]

    def get_strs(self, key):
        return [v.strip() for v in self[key].split(",") if v.strip() != ""]
