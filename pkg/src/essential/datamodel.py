"""Shared domain vocabulary: samples, label spaces, session schedules, run config.

All types here are immutable after construction and safe to share across
concurrent readers.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .exceptions import ConfigError

DATASETS = ("pathmnist", "bloodmnist", "synthetic")
COMPOSITIONS = ("imbalanced", "long_tailed")
SELECTORS = ("uta", "random", "nme", "pool", "committee")
SIMILARITIES = ("cos", "dot", "euc", "mah")
EXPANSION_VARIANTS = (
    "none",
    "rotation",
    "rotation2",
    "color_perm",
    "color_perm3",
    "rot_color_perm6",
    "rot_color_perm12",
)
CE_MODES = ("sum", "trapezoid")
BACKBONES = ("auto", "mlp", "convnet", "resnet20", "resnet18")


@dataclass(frozen=True)
class Sample:
    """One labelled image with its provenance.

    image is H x W x C with values in [0, 1]; label is a non-negative class
    index valid for the session the sample was introduced in.
    """

    id: int
    image: np.ndarray
    label: int
    session_of_origin: int = 0

    def __post_init__(self):
        if self.label < 0:
            raise ValueError("label must be non-negative")
        if self.session_of_origin < 0:
            raise ValueError("session_of_origin must be non-negative")


@dataclass(frozen=True)
class LabelSpace:
    """Per-session class-index sets C^(0)..C^(T)."""

    per_session_classes: tuple[frozenset[int], ...]

    @classmethod
    def from_sets(cls, sets) -> "LabelSpace":
        return cls(tuple(frozenset(s) for s in sets))

    def all_classes(self) -> frozenset[int]:
        out: frozenset[int] = frozenset()
        for s in self.per_session_classes:
            out = out | s
        return out


def validate_label_spaces(ls: LabelSpace) -> bool:
    """True iff all per-session class sets are pairwise disjoint."""
    seen: set[int] = set()
    for s in ls.per_session_classes:
        if seen & set(s):
            return False
        seen |= set(s)
    return True


@dataclass(frozen=True)
class SessionSchedule:
    """Ordered base + incremental class/sample plan for one dataset setting."""

    num_sessions: int
    base_classes: int
    classes_per_increment: int
    samples_per_base_class: int
    samples_per_increment_class: int
    memory_size: int
    resolution: int

    def __post_init__(self):
        if self.num_sessions < 1:
            raise ConfigError("num_sessions must be >= 1")
        if self.base_classes < 1:
            raise ConfigError("base_classes must be >= 1")
        if self.classes_per_increment < 0:
            raise ConfigError("classes_per_increment must be >= 0")
        if self.memory_size <= 0:
            raise ConfigError("memory_size must be > 0")
        if self.resolution < 4:
            raise ConfigError("resolution must be >= 4")

    @property
    def total_classes(self) -> int:
        return self.base_classes + (self.num_sessions - 1) * self.classes_per_increment

    def classes_for_session(self, t: int) -> list[int]:
        """Class indices introduced at session t (ascending assignment)."""
        if not 0 <= t < self.num_sessions:
            raise ValueError(f"session index {t} outside 0..{self.num_sessions - 1}")
        if t == 0:
            return list(range(self.base_classes))
        start = self.base_classes + (t - 1) * self.classes_per_increment
        return list(range(start, start + self.classes_per_increment))

    def seen_classes(self, t: int) -> list[int]:
        """All class indices introduced in sessions 0..t."""
        out: list[int] = []
        for j in range(t + 1):
            out.extend(self.classes_for_session(j))
        return out

    def label_space(self) -> LabelSpace:
        return LabelSpace.from_sets(
            [self.classes_for_session(t) for t in range(self.num_sessions)]
        )

    def samples_for_session(self, t: int) -> int:
        return self.samples_per_base_class if t == 0 else self.samples_per_increment_class


# (num_sessions, base_classes, classes_per_increment, samples_per_base_class)
# with per-composition (samples_per_increment_class, memory_size).
_SCHEDULE_PRESETS = {
    "pathmnist": dict(
        num_sessions=7, base_classes=3, classes_per_increment=1,
        samples_per_base_class=1000, resolution=28,
        imbalanced=(50, 200), long_tailed=(20, 70),
    ),
    "bloodmnist": dict(
        num_sessions=7, base_classes=2, classes_per_increment=1,
        samples_per_base_class=800, resolution=224,
        imbalanced=(50, 150), long_tailed=(20, 60),
    ),
    "synthetic": dict(
        num_sessions=3, base_classes=2, classes_per_increment=1,
        samples_per_base_class=200, resolution=16,
        imbalanced=(20, 30), long_tailed=(20, 30),
    ),
}

_SCHEDULE_KEYS = (
    "num_sessions", "base_classes", "classes_per_increment",
    "samples_per_base_class", "samples_per_increment_class",
    "memory_size", "resolution",
)


def build_schedule(dataset_name: str, composition: str = "imbalanced",
                   overrides: dict | None = None) -> SessionSchedule:
    """Schedule preset for a dataset/composition pair.

    The pathmnist/bloodmnist presets are fixed; the synthetic preset is a
    configurable miniature (any field may be overridden).
    """
    if dataset_name not in _SCHEDULE_PRESETS:
        raise ConfigError(f"unknown dataset {dataset_name!r}; expected one of {DATASETS}")
    if composition not in COMPOSITIONS:
        raise ConfigError(f"unknown composition {composition!r}; expected one of {COMPOSITIONS}")
    preset = _SCHEDULE_PRESETS[dataset_name]
    inc, mem = preset[composition]
    values = dict(
        num_sessions=preset["num_sessions"],
        base_classes=preset["base_classes"],
        classes_per_increment=preset["classes_per_increment"],
        samples_per_base_class=preset["samples_per_base_class"],
        samples_per_increment_class=inc,
        memory_size=mem,
        resolution=preset["resolution"],
    )
    for key, val in (overrides or {}).items():
        if key not in _SCHEDULE_KEYS:
            raise ConfigError(f"unknown schedule field {key!r}")
        if val is not None:
            values[key] = int(val)
    return SessionSchedule(**values)


_EXPANSION_DEFAULTS = {
    ("pathmnist", "imbalanced"): "color_perm",
    ("pathmnist", "long_tailed"): "color_perm",
    ("bloodmnist", "imbalanced"): "rotation2",
    ("bloodmnist", "long_tailed"): "color_perm",
    ("synthetic", "imbalanced"): "color_perm3",
    ("synthetic", "long_tailed"): "color_perm3",
}

# lr / epochs / batch / queue presets per dataset.
_TRAIN_PRESETS = {
    "pathmnist": dict(base_lr=0.1, incremental_lr=0.001, base_epochs=600,
                      incremental_epochs=600, batch_size=128, queue_length=4096,
                      backbone="resnet20", embed_dim=64),
    "bloodmnist": dict(base_lr=0.002, incremental_lr=0.000005, base_epochs=120,
                       incremental_epochs=120, batch_size=32, queue_length=4096,
                       backbone="resnet18", embed_dim=512),
    "synthetic": dict(base_lr=0.05, incremental_lr=0.01, base_epochs=10,
                      incremental_epochs=8, batch_size=32, queue_length=256,
                      backbone="mlp", embed_dim=32),
}


@dataclass(frozen=True)
class RunConfig:
    """Every knob of one experiment run, with documented defaults.

    Fields left as None resolve to per-dataset presets in resolve(). Loadable
    from a plain-text ``key = value`` file (one pair per line, '#' comments).
    """

    # experiment identity
    dataset: str = "synthetic"            # pathmnist | bloodmnist | synthetic
    composition: str = "imbalanced"       # imbalanced | long_tailed
    seed: int = 0

    # method switches (ablation axes)
    selector: str = "uta"                 # uta | random | nme | pool | committee
    similarity: str = "cos"               # cos | dot | euc | mah
    expansion_variant: str = "auto"       # auto resolves per dataset/composition

    # loss weights and temperatures
    alpha: float = 0.5                    # SCL weight in the joint loss
    beta: float = 1.0                     # JS weight in the prediction loss
    tau: float = 0.07                     # contrastive temperature
    mu: float = 0.999                     # key-network momentum coefficient
    eta: float = 16.0                     # cosine softmax sharpness

    # optimisation (None -> dataset preset)
    base_lr: float | None = None
    incremental_lr: float | None = None
    base_epochs: int | None = None
    incremental_epochs: int | None = None
    batch_size: int | None = None
    queue_length: int | None = None

    # model (None / auto -> dataset preset)
    backbone: str = "auto"                # mlp | convnet | resnet20 | resnet18
    embed_dim: int | None = None
    proj_dim: int = 128

    # exemplar selection
    ce_mode: str = "sum"                  # sum | trapezoid cumulative-entropy score
    reevaluate_factor: float = 2.0        # re-evaluated candidates per quota slot

    # metrics
    metrics_variant: str = "auto"         # transform bank for intra/inter metrics

    # schedule overrides (None -> Table-style preset)
    num_sessions: int | None = None
    base_classes: int | None = None
    classes_per_increment: int | None = None
    samples_per_base_class: int | None = None
    samples_per_increment_class: int | None = None
    memory_size: int | None = None
    resolution: int | None = None

    # data and output locations
    data_dir: str | None = None           # default: $ESSENTIAL_DATA_DIR or '.'
    output_dir: str = "runs"

    # synthetic generator knobs
    synthetic_noise: float = 0.1
    synthetic_test_per_class: int = 40

    def __post_init__(self):
        self.validate()

    def validate(self):
        def _check(name, value, allowed):
            if value not in allowed:
                raise ConfigError(f"{name}={value!r} not in {allowed}")

        _check("dataset", self.dataset, DATASETS)
        _check("composition", self.composition, COMPOSITIONS)
        _check("selector", self.selector, SELECTORS)
        _check("similarity", self.similarity, SIMILARITIES)
        _check("expansion_variant", self.expansion_variant, ("auto",) + EXPANSION_VARIANTS)
        _check("metrics_variant", self.metrics_variant, ("auto",) + EXPANSION_VARIANTS)
        _check("ce_mode", self.ce_mode, CE_MODES)
        _check("backbone", self.backbone, BACKBONES)
        if not 0.0 < self.mu < 1.0:
            raise ConfigError(f"mu={self.mu} must satisfy 0 < mu < 1")
        if self.tau <= 0:
            raise ConfigError(f"tau={self.tau} must be > 0")
        if self.eta <= 0:
            raise ConfigError(f"eta={self.eta} must be > 0")
        if self.alpha < 0:
            raise ConfigError(f"alpha={self.alpha} must be >= 0")
        if self.beta < 0:
            raise ConfigError(f"beta={self.beta} must be >= 0")
        if self.reevaluate_factor < 1.0:
            raise ConfigError(f"reevaluate_factor={self.reevaluate_factor} must be >= 1")

    # -- resolution of presets -------------------------------------------

    def schedule(self) -> SessionSchedule:
        overrides = {k: getattr(self, k) for k in _SCHEDULE_KEYS}
        return build_schedule(self.dataset, self.composition, overrides)

    def resolve(self) -> "RunConfig":
        """Concrete config with every preset-dependent field filled in."""
        preset = dict(_TRAIN_PRESETS[self.dataset])
        sched = self.schedule()
        updates: dict = {}
        for key in ("base_lr", "incremental_lr", "base_epochs", "incremental_epochs",
                    "batch_size", "queue_length", "embed_dim"):
            if getattr(self, key) is None:
                updates[key] = preset[key]
        if self.backbone == "auto":
            updates["backbone"] = preset["backbone"]
        if self.expansion_variant == "auto":
            updates["expansion_variant"] = _EXPANSION_DEFAULTS[(self.dataset, self.composition)]
        variant = updates.get("expansion_variant", self.expansion_variant)
        if self.metrics_variant == "auto":
            updates["metrics_variant"] = variant if variant != "none" else "rotation2"
        if self.data_dir is None:
            updates["data_dir"] = os.environ.get("ESSENTIAL_DATA_DIR", ".")
        for key in _SCHEDULE_KEYS:
            if getattr(self, key) is None:
                updates[key] = getattr(sched, key)
        return replace(self, **updates) if updates else self

    # -- plain-text round trip -------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        """Hash of the resolved config; changes iff the effective run changes."""
        return hashlib.sha256(self.resolve().to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, known[key].type)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            return cls.from_mapping(parse_config_text(fh.read()))

    def with_overrides(self, overrides: dict) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        kwargs = {}
        for key, raw in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, known[key].type)
        return replace(self, **kwargs)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, raw, annotation: str):
    if raw is None or not isinstance(raw, str):
        return raw
    ann = str(annotation)
    try:
        if "int" in ann and "str" not in ann:
            return int(raw)
        if "float" in ann:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} ({exc})") from None
    return raw
