"""Experiment configuration: flat ``section.key=value`` text.

One file describes a full experiment — data source, preprocessing, model,
hierarchy search, training, and pruning.  Every key has a documented default
(the dataclass field), so an empty file is a valid experiment; unknown or
duplicate keys are rejected with ``source:line`` diagnostics to catch typos
early.  ``format_config`` writes every key back out, and
``parse_config(format_config(cfg))`` reproduces ``cfg`` exactly, which is
what lets a checkpoint carry its experiment as a text snapshot.

Example::

    # demo experiment
    data.clips_per_class=12
    model.base_channels=8
    train.lr=0.002
    prune.variant=per_layer
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .model import StackConfig
from .preprocess import ProjectionParams
from .synthetic import SyntheticSpec
from .training import TrainConfig

PRUNE_VARIANTS = ("global", "per_layer")


@dataclass
class DataConfig:
    """Where clips come from: a dataset directory, or the built-in generator."""

    path: str = ""  # empty -> generate synthetic clips in memory
    n_classes: int = 8
    n_families: int = 4
    clips_per_class: int = 40
    frame_h: int = 96
    frame_w: int = 128
    clip_len: int = 32
    n_joints: int = 5
    clutter: float = 0.5
    offset_range: float = 0.25
    test_fraction: float = 0.5
    seed: int = 0

    def spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_classes=self.n_classes,
            n_families=self.n_families,
            clips_per_class=self.clips_per_class,
            frame_h=self.frame_h,
            frame_w=self.frame_w,
            clip_len=self.clip_len,
            n_joints=self.n_joints,
            clutter=self.clutter,
            offset_range=self.offset_range,
            test_fraction=self.test_fraction,
            seed=self.seed,
        )

    def validate(self) -> None:
        if not self.path:
            self.spec().validate()


@dataclass
class PreprocessConfig:
    """Cropping and split knobs, plus default projection intrinsics."""

    crop: bool = True
    out_size: int = 40
    margin: float = 0.10
    val_fraction: float = 0.25
    val_seed: int = 1
    c_x: float = 558.1
    c_y: float = 579.5
    b_x: float = 320.0
    b_y: float = 240.0

    def params(self) -> ProjectionParams:
        return ProjectionParams(c_x=self.c_x, c_y=self.c_y, b_x=self.b_x, b_y=self.b_y)

    def validate(self) -> None:
        if self.out_size < 8:
            raise ConfigError(f"preprocess.out_size must be >= 8, got {self.out_size}")
        if not 0.0 <= self.margin <= 1.0:
            raise ConfigError(f"preprocess.margin must lie in [0,1], got {self.margin}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(
                f"preprocess.val_fraction must lie in (0,1), got {self.val_fraction}"
            )
        if self.c_x <= 0.0 or self.c_y <= 0.0:
            raise ConfigError("preprocess focal lengths must be positive")


@dataclass
class ModelConfig:
    """Architecture knobs; empty heads are derived as (*k_list, n_classes)."""

    base_channels: int = 8
    bottleneck: bool = True
    temporal_kernel: int = 3
    blocks: tuple = (1, 1, 1, 1)
    heads: tuple = ()
    in_channels: int = 1
    seed: int = 7

    def stack_config(self, n_classes: int, k_list) -> StackConfig:
        heads = tuple(self.heads) if self.heads else (*k_list, n_classes)
        cfg = StackConfig(
            blocks_per_stack=tuple(self.blocks),
            base_channels=self.base_channels,
            bottleneck=self.bottleneck,
            temporal_kernel=self.temporal_kernel,
            num_classes_per_head=heads,
            in_channels=self.in_channels,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.heads and len(self.heads) != 4:
            raise ConfigError(f"model.heads needs 4 widths, got {self.heads!r}")
        if len(self.blocks) != 4:
            raise ConfigError(f"model.blocks needs 4 counts, got {self.blocks!r}")


@dataclass
class HierarchyConfig:
    """Superclass counts for the three intermediate heads, and search effort."""

    k_list: tuple = (2, 4, 8)
    restarts: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if len(self.k_list) != 3:
            raise ConfigError(
                f"hierarchy.k_list needs one K per intermediate head (3), got {self.k_list!r}"
            )
        if any(k < 1 for k in self.k_list):
            raise ConfigError(f"hierarchy.k_list entries must be positive: {self.k_list}")
        if self.restarts < 1:
            raise ConfigError(f"hierarchy.restarts must be >= 1, got {self.restarts}")


@dataclass
class PruneConfig:
    """Iterative filter-pruning knobs."""

    fraction: float = 0.10
    variant: str = "global"
    max_passes: int = 10
    retrain_epochs: int = 10

    def validate(self) -> None:
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError(f"prune.fraction must lie in (0,1), got {self.fraction}")
        if self.variant not in PRUNE_VARIANTS:
            raise ConfigError(
                f"prune.variant must be one of {PRUNE_VARIANTS}, got {self.variant!r}"
            )
        if self.max_passes < 1:
            raise ConfigError(f"prune.max_passes must be >= 1, got {self.max_passes}")
        if self.retrain_epochs < 1:
            raise ConfigError(f"prune.retrain_epochs must be >= 1, got {self.retrain_epochs}")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)

    def validate(self) -> None:
        self.data.validate()
        self.preprocess.validate()
        self.model.validate()
        self.hierarchy.validate()
        self.train.validate()
        self.prune.validate()

    def stack_config(self, n_classes: int | None = None) -> StackConfig:
        n = self.data.n_classes if n_classes is None else n_classes
        return self.model.stack_config(n, self.hierarchy.k_list)


# ---------------------------------------------------------------------------
# Text round trip
# ---------------------------------------------------------------------------

# Per-field value codecs.  Every configurable field appears here, so the
# parser and formatter share one source of truth for names and types.


def _parse_bool(value: str) -> bool:
    if value == "true":
        return True
    if value == "false":
        return False
    raise ValueError(f"expected true or false, got {value!r}")


def _parse_ints(value: str) -> tuple:
    if not value:
        return ()
    return tuple(int(v) for v in value.split(","))


def _parse_floats(value: str) -> tuple:
    if not value:
        return ()
    return tuple(float(v) for v in value.split(","))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_TUPLE_FIELDS = {
    ("model", "blocks"): _parse_ints,
    ("model", "heads"): _parse_ints,
    ("hierarchy", "k_list"): _parse_ints,
    ("train", "loss_weights"): _parse_floats,
}

_SECTIONS = (
    ("data", DataConfig),
    ("preprocess", PreprocessConfig),
    ("model", ModelConfig),
    ("hierarchy", HierarchyConfig),
    ("train", TrainConfig),
    ("prune", PruneConfig),
)


def _field_parser(section: str, f) -> object:
    if (section, f.name) in _TUPLE_FIELDS:
        return _TUPLE_FIELDS[(section, f.name)]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    return {"int": int, "float": float, "bool": _parse_bool, "str": str}[kind]


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse ``section.key=value`` lines; blanks and ``#`` comments are skipped."""
    schema: dict[str, dict[str, object]] = {
        name: {f.name: _field_parser(name, f) for f in fields(cls)}
        for name, cls in _SECTIONS
    }
    overrides: dict[str, dict[str, object]] = {name: {} for name, _ in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if "." not in key:
            raise ConfigError(
                f"{source}:{lineno}: keys are section.name, got {key!r} "
                f"(sections: {', '.join(s for s, _ in _SECTIONS)})"
            )
        section, name = key.split(".", 1)
        if section not in schema:
            raise ConfigError(
                f"{source}:{lineno}: unknown section {section!r} "
                f"(sections: {', '.join(s for s, _ in _SECTIONS)})"
            )
        if name not in schema[section]:
            raise ConfigError(
                f"{source}:{lineno}: unknown key {key!r} "
                f"(known: {', '.join(sorted(schema[section]))})"
            )
        if name in overrides[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            overrides[section][name] = schema[section][name](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    cfg = ExperimentConfig(
        **{name: cls(**overrides[name]) for name, cls in _SECTIONS}
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))


def format_config(cfg: ExperimentConfig) -> str:
    """Write every key of every section; parsing the result reproduces ``cfg``."""
    lines = []
    for name, _cls in _SECTIONS:
        sub = getattr(cfg, name)
        for f in fields(sub):
            lines.append(f"{name}.{f.name}={_fmt(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """A copy of ``cfg`` with every rng-bearing knob derived from ``seed``.

    The CLI's ``--seed`` flag maps one integer onto the three independent
    streams (data, model init, training shuffle) plus the split and search
    seeds, keeping distinct stages decorrelated but fully determined.
    """
    return replace(
        cfg,
        data=replace(cfg.data, seed=seed),
        preprocess=replace(cfg.preprocess, val_seed=seed + 1),
        model=replace(cfg.model, seed=seed + 2),
        hierarchy=replace(cfg.hierarchy, seed=seed + 3),
        train=replace(cfg.train, seed=seed + 4),
    )
