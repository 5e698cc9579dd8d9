"""Experiment configuration: an INI file with four sections.

Example::

    [dataset]
    kind = xor_complementary
    noise_sd = 0.1

    [model]
    hidden = 16, 8

    [training]
    learning_rate = 0.01

    [experiment]
    methods = unimodal_1, unimodal_2, early, late, centralnet

Every key not given takes the default declared on the dataclasses below.
:func:`dump_config` writes the fully resolved form, which parses back to an
equal object.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import TASK_KINDS
from .errors import ConfigError
from .models import LOSS_KINDS, METHODS

METRICS = ("auto", "accuracy", "macro_accuracy", "micro_f1")


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    kind: str | None = None
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    widths: list[int] = field(default_factory=lambda: [8, 8])
    noise_sd: float = 0.1
    n_classes: int = 2
    seed: int = 0
    manifest: str | None = None


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [16, 8])
    loss: str = "auto"
    alignment: str = "zero_pad"
    target_width: int | None = None
    batch_norm: bool = True
    pos_weight: float = 2.0
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5


@dataclass
class TrainingConfig:
    learning_rate: float = 0.01
    lr_decay: float = 0.96
    epochs: int = 100
    patience: int = 10
    dropout: float = 0.5
    moddrop_prob: float = 0.5
    batch_policy: str = "auto"
    per_class: int = 2
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    metric: str = "auto"
    threshold: float = 0.5


@dataclass
class ExperimentSection:
    methods: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: list(range(8)))
    output_dir: str = "runs"
    workers: int = 1
    save_models: bool = False


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    base_dir: str = field(default=".", compare=False)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "experiment": ExperimentSection,
}
REQUIRED = {("experiment", "methods")}


def _convert(raw: str, hint, where: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        inner = next(a for a in args if a is not type(None))
        if raw.lower() in ("", "none"):
            return None
        return _convert(raw, inner, where)
    if origin is list:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return [_convert(p, args[0], where) for p in parts]
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {hint.__name__}") from None
    return raw


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, base_dir: str = ".") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SECTIONS)}")
    parts = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        given = parser[section] if parser.has_section(section) else {}
        kwargs = {}
        for key in given:
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kwargs[key] = _convert(given[key], hints[key], f"[{section}] {key}")
        for sect, key in REQUIRED:
            if sect == section and key not in kwargs:
                raise ConfigError(f"missing required key {key!r} in [{section}]")
        parts[section] = cls(**kwargs)
    config = ExperimentConfig(**parts, base_dir=base_dir)
    validate(config)
    return config


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, base_dir=str(path.parent))


def dump_config(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section in SECTIONS:
        values = dataclasses.asdict(getattr(config, section))
        parser[section] = {k: _format(v) for k, v in values.items()}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate(config: ExperimentConfig) -> None:
    d, m, t, e = config.dataset, config.model, config.training, config.experiment
    _check(d.source in ("synthetic", "files"), f"[dataset] source must be 'synthetic' or 'files', got {d.source!r}")
    if d.source == "synthetic":
        _check(d.kind is not None, "missing required key 'kind' in [dataset] for synthetic data")
        _check(d.kind in TASK_KINDS, f"[dataset] kind must be one of {TASK_KINDS}, got {d.kind!r}")
        _check(min(d.n_train, d.n_val, d.n_test) >= 1, "[dataset] n_train, n_val, n_test must be >= 1")
        _check(bool(d.widths) and min(d.widths) >= 1, f"[dataset] widths must be positive, got {d.widths}")
        _check(d.noise_sd >= 0, f"[dataset] noise_sd must be >= 0, got {d.noise_sd}")
        _check(d.n_classes >= 2, f"[dataset] n_classes must be >= 2, got {d.n_classes}")
    else:
        _check(d.manifest is not None, "missing required key 'manifest' in [dataset] for file data")

    _check(bool(m.hidden) and min(m.hidden) >= 1, f"[model] hidden widths must be positive, got {m.hidden}")
    _check(m.loss == "auto" or m.loss in LOSS_KINDS, f"[model] loss must be auto or one of {LOSS_KINDS}, got {m.loss!r}")
    _check(m.alignment in ("zero_pad", "linear_proj"), f"[model] alignment must be zero_pad or linear_proj, got {m.alignment!r}")
    _check(m.target_width is None or m.target_width >= 1, f"[model] target_width must be >= 1, got {m.target_width}")
    _check(m.pos_weight > 0, f"[model] pos_weight must be > 0, got {m.pos_weight}")
    _check(0 < m.bn_momentum < 1, f"[model] bn_momentum must lie in (0, 1), got {m.bn_momentum}")
    _check(m.bn_epsilon > 0, f"[model] bn_epsilon must be > 0, got {m.bn_epsilon}")

    _check(t.learning_rate > 0, f"[training] learning_rate must be > 0, got {t.learning_rate}")
    _check(0 < t.lr_decay <= 1, f"[training] lr_decay must lie in (0, 1], got {t.lr_decay}")
    _check(t.epochs >= 1, f"[training] epochs must be >= 1, got {t.epochs}")
    _check(t.patience >= 1, f"[training] patience must be >= 1, got {t.patience}")
    _check(0 <= t.dropout < 1, f"[training] dropout must lie in [0, 1), got {t.dropout}")
    _check(0 <= t.moddrop_prob <= 1, f"[training] moddrop_prob must lie in [0, 1], got {t.moddrop_prob}")
    _check(t.batch_policy in ("auto", "balanced", "shuffle"), f"[training] batch_policy must be auto, balanced or shuffle, got {t.batch_policy!r}")
    _check(t.per_class >= 1, f"[training] per_class must be >= 1, got {t.per_class}")
    _check(t.batch_size >= 2, f"[training] batch_size must be >= 2, got {t.batch_size}")
    _check(0 < t.beta1 < 1 and 0 < t.beta2 < 1, f"[training] beta1, beta2 must lie in (0, 1), got {t.beta1}, {t.beta2}")
    _check(t.adam_epsilon > 0, f"[training] adam_epsilon must be > 0, got {t.adam_epsilon}")
    _check(t.metric in METRICS, f"[training] metric must be one of {METRICS}, got {t.metric!r}")
    _check(0 < t.threshold < 1, f"[training] threshold must lie in (0, 1), got {t.threshold}")

    _check(bool(e.methods), "[experiment] methods must name at least one method")
    for method in e.methods:
        ok = method in METHODS or (method.startswith("unimodal_") and method[9:].isdigit() and int(method[9:]) >= 1)
        _check(ok, f"[experiment] unknown method {method!r}")
    _check(len(set(e.methods)) == len(e.methods), f"[experiment] methods repeat: {e.methods}")
    _check(bool(e.seeds), "[experiment] seeds must be non-empty")
    _check(len(set(e.seeds)) == len(e.seeds), f"[experiment] seeds must be distinct, got {e.seeds}")
    _check(min(e.seeds) >= 0, f"[experiment] seeds must be >= 0, got {e.seeds}")
    _check(e.workers >= 1, f"[experiment] workers must be >= 1, got {e.workers}")
    if d.source == "synthetic":
        n_mod = len(d.widths)
        for method in e.methods:
            if method.startswith("unimodal_"):
                _check(int(method[9:]) <= n_mod, f"[experiment] {method}: only {n_mod} modalities configured")
        if "gmu" in e.methods:
            _check(n_mod == 2, f"[experiment] gmu needs exactly 2 modalities, got {n_mod}")
        if m.target_width is not None:
            _check(m.target_width >= max(d.widths),
                   f"[model] target_width {m.target_width} is below the widest modality ({max(d.widths)})")
