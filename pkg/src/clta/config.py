"""Flat dotted-key experiment configuration.

The on-disk format is plain text, one ``section.key = value`` per line,
``#`` comments allowed.  Parsing fills every unspecified key with its
default and rejects keys it does not know, so typos fail loudly.  The
normalized dump writes every key back in canonical order; parsing that
dump reproduces the configuration exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .distill import KDConfig, TeacherStrategy
from .errors import FormatError, ParameterError
from .harness import TrainConfig, WarmupConfig

# key -> (type tag, default as normalized string)
# type tags: int, float, bool, str, intlist, optint, optfloat, optstr
_KEY_TABLE: dict[str, tuple[str, str]] = {
    "data.kind": ("str", "synthetic"),
    "data.n_tasks": ("int", "2"),
    "data.classes_per_task": ("int", "2"),
    "data.dim": ("optint", "16"),
    "data.image_shape": ("optstr", "none"),
    "data.samples_per_class": ("int", "40"),
    "data.shift": ("float", "0.0"),
    "data.blob_std": ("float", "0.06"),
    "data.seed": ("optint", "none"),
    "data.num_classes": ("int", "10"),
    "data.images": ("optstr", "none"),
    "data.labels": ("optstr", "none"),
    "data.test_images": ("optstr", "none"),
    "data.test_labels": ("optstr", "none"),
    "data.path": ("optstr", "none"),
    "data.test_path": ("optstr", "none"),
    "data.split_scheme": ("str", "equal"),
    "data.split_parts": ("optint", "none"),
    "data.order_seed": ("optint", "none"),
    "corrupt.severity": ("int", "0"),
    "corrupt.pattern": ("str", "none"),
    "model.arch": ("str", "mlp"),
    "model.norm": ("str", "batch"),
    "model.hidden": ("int", "64"),
    "model.groups": ("int", "4"),
    "model.seed": ("optint", "none"),
    "kd.variant": ("str", "global"),
    "kd.temperature": ("float", "2.0"),
    "kd.weight": ("float", "10.0"),
    "kd.aux_weight": ("optfloat", "none"),
    "teacher.kind": ("str", "frozen"),
    "teacher.lr": ("float", "0.1"),
    "teacher.pretrain_epochs": ("int", "1"),
    "teacher.adapt_with_running": ("bool", "false"),
    "train.epochs": ("int", "20"),
    "train.batch_size": ("int", "128"),
    "train.base_lr": ("float", "0.1"),
    "train.decay_epochs": ("intlist", "6,12,16"),
    "train.decay_factor": ("float", "10.0"),
    "train.grad_clip": ("optfloat", "none"),
    "warmup.enabled": ("bool", "false"),
    "warmup.max_lr": ("float", "0.1"),
    "warmup.ramp_epochs": ("int", "40"),
    "warmup.max_epochs": ("int", "200"),
    "warmup.patience": ("int", "20"),
    "run.seeds": ("intlist", "0"),
    "run.output": ("str", "runs/experiment"),
    "run.config_id": ("str", "experiment"),
    "run.workers": ("int", "1"),
}

_CHOICES = {
    "data.kind": ("synthetic", "idx", "cifar"),
    "data.split_scheme": ("equal", "half_first"),
    "corrupt.pattern": ("none", "every_other"),
    "model.arch": ("mlp", "cnn"),
    "model.norm": ("batch", "none", "layer", "group"),
}


def _parse_value(key: str, tag: str, text: str):
    text = text.strip()
    try:
        if tag == "int":
            return int(text)
        if tag == "float":
            return float(text)
        if tag == "bool":
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if tag == "str":
            return text
        if tag == "intlist":
            return tuple(int(p) for p in text.split(",") if p.strip() != "")
        if tag.startswith("opt"):
            if text in ("none", ""):
                return None
            return _parse_value(key, tag[3:], text)
    except ValueError as exc:
        raise ParameterError(f"{key}: cannot read '{text}' as {tag}") from exc
    raise ParameterError(f"{key}: unhandled type tag {tag}")


def _normalize(tag: str, value) -> str:
    if value is None:
        return "none"
    if tag == "bool" or tag == "optbool":
        return "true" if value else "false"
    if tag == "intlist":
        return ",".join(str(v) for v in value)
    if tag in ("float", "optfloat"):
        return repr(float(value))
    return str(value)


@dataclass
class DataSpec:
    kind: str = "synthetic"
    n_tasks: int = 2
    classes_per_task: int = 2
    dim: int | None = 16
    image_shape: tuple | None = None
    samples_per_class: int = 40
    shift: float = 0.0
    blob_std: float = 0.06
    seed: int | None = None
    num_classes: int = 10
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    path: str | None = None
    test_path: str | None = None
    split_scheme: str = "equal"
    split_parts: int | None = None
    order_seed: int | None = None
    corrupt_severity: int = 0
    corrupt_pattern: str = "none"


@dataclass
class ModelSpec:
    arch: str = "mlp"
    norm: str = "batch"
    hidden: int = 64
    groups: int = 4
    seed: int | None = None


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    kd: KDConfig = field(default_factory=KDConfig)
    strategy: TeacherStrategy = field(default_factory=TeacherStrategy)
    train: TrainConfig = field(default_factory=TrainConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    seeds: tuple = (0,)
    output: str = "runs/experiment"
    config_id: str = "experiment"
    workers: int = 1


def _parse_image_shape(text: str | None):
    if text is None:
        return None
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ParameterError(f"data.image_shape: expected CxHxW, got '{text}'")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ParameterError(f"data.image_shape: expected integers, got '{text}'") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse a key-value document, apply defaults, validate everything."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise FormatError(f"line {lineno}: expected 'key = value', got '{stripped}'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _KEY_TABLE:
            raise ParameterError(f"line {lineno}: unknown key '{key}'")
        if key in raw:
            raise FormatError(f"line {lineno}: duplicate key '{key}'")
        raw[key] = value

    parsed = {}
    normalized = {}
    for key, (tag, default) in _KEY_TABLE.items():
        value = _parse_value(key, tag, raw.get(key, default))
        parsed[key] = value
        normalized[key] = _normalize(tag, value)

    for key, choices in _CHOICES.items():
        if parsed[key] not in choices:
            raise ParameterError(f"{key}: '{parsed[key]}' is not one of {choices}")
    if not parsed["run.seeds"]:
        raise ParameterError("run.seeds: at least one seed is required")
    if parsed["run.workers"] < 1:
        raise ParameterError(f"run.workers: must be >= 1, got {parsed['run.workers']}")
    if parsed["kd.weight"] < 0:
        raise ParameterError(f"kd.weight: must be >= 0, got {parsed['kd.weight']}")
    if parsed["kd.temperature"] <= 0:
        raise ParameterError(f"kd.temperature: must be > 0, got {parsed['kd.temperature']}")
    if not 0 <= parsed["corrupt.severity"] <= 5:
        raise ParameterError(f"corrupt.severity: must be in 0..5, got {parsed['corrupt.severity']}")

    data = DataSpec(
        kind=parsed["data.kind"],
        n_tasks=parsed["data.n_tasks"],
        classes_per_task=parsed["data.classes_per_task"],
        dim=parsed["data.dim"],
        image_shape=_parse_image_shape(parsed["data.image_shape"]),
        samples_per_class=parsed["data.samples_per_class"],
        shift=parsed["data.shift"],
        blob_std=parsed["data.blob_std"],
        seed=parsed["data.seed"],
        num_classes=parsed["data.num_classes"],
        images=parsed["data.images"],
        labels=parsed["data.labels"],
        test_images=parsed["data.test_images"],
        test_labels=parsed["data.test_labels"],
        path=parsed["data.path"],
        test_path=parsed["data.test_path"],
        split_scheme=parsed["data.split_scheme"],
        split_parts=parsed["data.split_parts"],
        order_seed=parsed["data.order_seed"],
        corrupt_severity=parsed["corrupt.severity"],
        corrupt_pattern=parsed["corrupt.pattern"],
    )
    if data.kind == "synthetic" and (data.dim is None) == (data.image_shape is None):
        raise ParameterError("data.dim or data.image_shape: exactly one must be set")
    model = ModelSpec(
        arch=parsed["model.arch"],
        norm=parsed["model.norm"],
        hidden=parsed["model.hidden"],
        groups=parsed["model.groups"],
        seed=parsed["model.seed"],
    )
    try:
        kd = KDConfig(
            variant=parsed["kd.variant"],
            temperature=parsed["kd.temperature"],
            weight=parsed["kd.weight"],
            aux_weight=parsed["kd.aux_weight"],
        )
        strategy = TeacherStrategy(
            kind=parsed["teacher.kind"],
            teacher_lr=parsed["teacher.lr"],
            pretrain_epochs=parsed["teacher.pretrain_epochs"],
            adapt_with_running=parsed["teacher.adapt_with_running"],
        )
        train = TrainConfig(
            epochs=parsed["train.epochs"],
            batch_size=parsed["train.batch_size"],
            base_lr=parsed["train.base_lr"],
            lr_decay_epochs=parsed["train.decay_epochs"],
            lr_decay_factor=parsed["train.decay_factor"],
            grad_clip=parsed["train.grad_clip"],
        )
        warmup = WarmupConfig(
            enabled=parsed["warmup.enabled"],
            max_lr=parsed["warmup.max_lr"],
            ramp_epochs=parsed["warmup.ramp_epochs"],
            max_epochs=parsed["warmup.max_epochs"],
            early_stop_patience=parsed["warmup.patience"],
        )
    except ParameterError as exc:
        raise ParameterError(f"invalid configuration value: {exc}") from exc

    return ExperimentConfig(
        values=normalized,
        data=data,
        model=model,
        kd=kd,
        strategy=strategy,
        train=train,
        warmup=warmup,
        seeds=parsed["run.seeds"],
        output=parsed["run.output"],
        config_id=parsed["run.config_id"],
        workers=parsed["run.workers"],
    )


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parsing it reproduces the configuration."""
    lines = [f"{key} = {cfg.values[key]}" for key in _KEY_TABLE]
    return "\n".join(lines) + "\n"


def validate_config(cfg: ExperimentConfig) -> None:
    """Check constraints that reach outside the document, such as file paths."""
    import os

    required: list[tuple[str, str | None]] = []
    if cfg.data.kind == "idx":
        required = [
            ("data.images", cfg.data.images),
            ("data.labels", cfg.data.labels),
            ("data.test_images", cfg.data.test_images),
            ("data.test_labels", cfg.data.test_labels),
        ]
    elif cfg.data.kind == "cifar":
        required = [("data.path", cfg.data.path), ("data.test_path", cfg.data.test_path)]
    for key, value in required:
        if value is None:
            raise ParameterError(f"{key}: required for data.kind = {cfg.data.kind}")
        if not os.path.isfile(value):
            raise ParameterError(f"{key}: file not found: {value}")


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
