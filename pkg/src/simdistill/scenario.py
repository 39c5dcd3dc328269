"""Experiment scenarios: configuration types, the line-oriented config
format, deterministic seed derivation, and the results-table structure."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from .data import DomainShift, DomainSpec
from .errors import ConfigError
from .evaluate import ComplexityReport, Metrics

ROW_NAMES = ("lower_bound", "per_target", "blending", "kd_reid", "kd_mixed", "upper_bound")

CONFIG_TAG = "simdistill-config v1"


def stable_seed(*parts) -> int:
    """Platform-stable 63-bit seed derived from the given parts."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def derived_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    lr_decay_every: int = 5
    lr_decay_factor: float = 10.0
    batch_p: int = 8
    batch_k: int = 4
    kd_batch_p: int = 16
    margin: float = 0.3
    stop_delta: float = 0.005  # 0.5 percentage points of average mAP
    stop_window: int = 5
    max_epochs: int = 20
    pretrain_epochs: int = 15
    stda_max_epochs: int = 15
    stda_stagnation_tol: float = 1e-4
    stda_supervised_weight: float = 1.0
    momentum: float = 0.0
    kd_source_supervision: bool = False
    seed: int = 0

    def validate(self) -> None:
        positive = (
            "lr0",
            "lr_decay_every",
            "lr_decay_factor",
            "batch_p",
            "batch_k",
            "kd_batch_p",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.stop_window < 1:
            raise ConfigError("train.stop_window must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("train.max_epochs must be >= 1")


@dataclass(frozen=True)
class DomainConfig:
    """Generation knobs for one domain; translation is a magnitude whose
    direction is drawn from the scenario seed."""

    identities: int = 16
    cameras: int = 2
    samples_per_identity_per_camera: int = 8
    rotation: float = 0.0
    scale: float = 1.0
    translation: float = 0.0
    noise_std: float = 0.05
    camera_offset_std: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    scenario_id: str = "scenario"
    seed: int = 0
    rows: tuple[str, ...] = ("kd_reid",)
    stda_method: str = "mmd"
    mixed_methods: tuple[str, ...] = ()
    student_widths: tuple[float, ...] = (1.0,)
    input_dim: int = 16
    latent_dim: int = 4
    test_identities: int = 12
    query_fraction: float = 0.5
    student_hidden: tuple[int, ...] = (32, 32)
    student_embed: int = 16
    teacher_hidden: tuple[int, ...] = (128, 128)
    teacher_embed: int = 64
    output_dir: str = "results"
    train: TrainConfig = field(default_factory=TrainConfig)
    source: DomainConfig = field(default_factory=DomainConfig)
    targets: tuple[DomainConfig, ...] = ()

    def validate(self) -> None:
        if not self.targets:
            raise ConfigError("at least one target domain is required")
        for row in self.rows:
            if row not in ROW_NAMES:
                raise ConfigError(f"unknown row {row!r}; valid rows: {', '.join(ROW_NAMES)}")
        if len(set(self.rows)) != len(self.rows):
            raise ConfigError("duplicate row name")
        if self.mixed_methods and len(self.mixed_methods) != len(self.targets):
            raise ConfigError(
                f"mixed_methods names {len(self.mixed_methods)} methods for "
                f"{len(self.targets)} targets"
            )
        if any(w <= 0 for w in self.student_widths):
            raise ConfigError("student widths must be positive")
        if not 0.0 < self.query_fraction < 1.0:
            raise ConfigError("query_fraction must be in (0, 1)")
        self.train.validate()

    def methods_for_targets(self, mixed: bool) -> tuple[str, ...]:
        if mixed:
            return self.mixed_methods or (self.stda_method,) * len(self.targets)
        return (self.stda_method,) * len(self.targets)


def _translation_vector(cfg: ExperimentConfig, tag: str, magnitude: float) -> tuple[float, ...]:
    if magnitude == 0.0:
        return tuple(0.0 for _ in range(cfg.input_dim))
    rng = derived_rng(cfg.seed, "translation", tag)
    vec = rng.normal(size=cfg.input_dim)
    vec *= magnitude / np.linalg.norm(vec)
    return tuple(float(v) for v in vec)


def _domain_spec(cfg: ExperimentConfig, dc: DomainConfig, tag: str, split: str, identities: int):
    shift = DomainShift(
        rotation_angle=dc.rotation,
        scale=dc.scale,
        translation=_translation_vector(cfg, tag, dc.translation),
        noise_std=dc.noise_std,
        camera_offset_std=dc.camera_offset_std,
    )
    return DomainSpec(
        domain_id=f"{tag}.{split}" if split != "train" else tag,
        num_identities=identities,
        cameras=dc.cameras,
        samples_per_identity_per_camera=dc.samples_per_identity_per_camera,
        input_dim=cfg.input_dim,
        shift=shift,
        seed=stable_seed(cfg.seed, "domain", tag),
        identity_seed=stable_seed(cfg.seed, "identities", tag, split),
        latent_dim=cfg.latent_dim,
        # all domains of a scenario share one identity subspace; shifts move it
        basis_seed=stable_seed(cfg.seed, "latent-basis"),
    )


def source_spec(cfg: ExperimentConfig) -> DomainSpec:
    return _domain_spec(cfg, cfg.source, "source", "train", cfg.source.identities)


def target_train_spec(cfg: ExperimentConfig, idx: int) -> DomainSpec:
    dc = cfg.targets[idx]
    return _domain_spec(cfg, dc, f"target{idx + 1}", "train", dc.identities)


def target_test_spec(cfg: ExperimentConfig, idx: int) -> DomainSpec:
    dc = cfg.targets[idx]
    return _domain_spec(cfg, dc, f"target{idx + 1}", "test", cfg.test_identities)


# -- results ---------------------------------------------------------------------


@dataclass
class RowResult:
    name: str
    per_target: list[Metrics]
    complexity: ComplexityReport
    models_counted: int = 1  # per_target rows deploy one model per target

    @property
    def avg_map(self) -> float:
        return sum(m.mAP for m in self.per_target) / len(self.per_target)

    @property
    def avg_rank1(self) -> float:
        return sum(m.rank1 for m in self.per_target) / len(self.per_target)


@dataclass
class ResultsTable:
    scenario_id: str
    seed: int
    student_width: float
    target_names: list[str]
    rows: list[RowResult]
    trained_models: dict = field(default_factory=dict)

    def row(self, name: str) -> RowResult:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)


# -- config text format -----------------------------------------------------------

_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}
_DOMAIN_FIELDS = {f.name: f.type for f in fields(DomainConfig)}

_TOP_KEYS = {
    "scenario": str,
    "seed": int,
    "rows": "strlist",
    "stda_method": str,
    "mixed_methods": "strlist",
    "student_widths": "floatlist",
    "input_dim": int,
    "latent_dim": int,
    "test_identities": int,
    "query_fraction": float,
    "student_hidden": "intlist",
    "student_embed": int,
    "teacher_hidden": "intlist",
    "teacher_embed": int,
    "output_dir": str,
}


def _parse_value(kind, raw: str, line_no: int):
    try:
        if kind is str:
            return raw
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        if kind is bool or kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "strlist":
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        if kind == "floatlist":
            return tuple(float(part) for part in raw.split(","))
        if kind == "intlist":
            return tuple(int(part) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r}", line=line_no) from None
    raise ConfigError(f"unhandled kind {kind!r}", line=line_no)


def _field_kind(annotation):
    mapping = {"int": int, "float": float, "bool": bool, "str": str}
    return mapping.get(str(annotation), str(annotation))


def parse_config(text: str) -> ExperimentConfig:
    """Parse the documented line-oriented key=value format.

    Unknown keys, duplicate keys, bad values, and missing targets raise
    :class:`ConfigError` with the offending line number.
    """
    top: dict = {}
    train_kw: dict = {}
    domain_kw: dict[str, dict] = {}
    seen: set = set()
    lines = text.split("\n")
    start = 0
    if lines and lines[0].strip() == CONFIG_TAG:
        start = 1
    for line_no, raw_line in enumerate(lines[start:], start=start + 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw_line!r}", line=line_no)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", line=line_no)
        seen.add(key)
        if key.startswith("train."):
            name = key[len("train."):]
            if name not in _TRAIN_FIELDS:
                raise ConfigError(f"unknown key {key!r}", line=line_no)
            train_kw[name] = _parse_value(_field_kind(_TRAIN_FIELDS[name]), raw, line_no)
        elif key.startswith("source.") or key.startswith("target"):
            prefix, _, name = key.partition(".")
            if not name:
                raise ConfigError(f"expected '{prefix}.<field>'", line=line_no)
            if prefix != "source" and not prefix[len("target"):].isdigit():
                raise ConfigError(f"unknown domain {prefix!r}", line=line_no)
            if name not in _DOMAIN_FIELDS:
                raise ConfigError(f"unknown key {key!r}", line=line_no)
            domain_kw.setdefault(prefix, {})[name] = _parse_value(
                _field_kind(_DOMAIN_FIELDS[name]), raw, line_no
            )
        elif key in _TOP_KEYS:
            top[key] = _parse_value(_TOP_KEYS[key], raw, line_no)
        else:
            raise ConfigError(f"unknown key {key!r}", line=line_no)

    target_ids = sorted(
        (int(p[len("target"):]) for p in domain_kw if p.startswith("target")),
    )
    if not target_ids:
        raise ConfigError("config names no target domains (target1.identities = ...)")
    if target_ids != list(range(1, len(target_ids) + 1)):
        raise ConfigError(f"target indices must be 1..T, got {target_ids}")

    kwargs = dict(
        scenario_id=top.pop("scenario", "scenario"),
        train=TrainConfig(**train_kw),
        source=DomainConfig(**domain_kw.get("source", {})),
        targets=tuple(DomainConfig(**domain_kw[f"target{i}"]) for i in target_ids),
    )
    for key, value in top.items():
        kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config`` inverts it exactly."""
    out = [CONFIG_TAG]
    out.append(f"scenario = {cfg.scenario_id}")
    out.append(f"seed = {cfg.seed}")
    out.append(f"rows = {', '.join(cfg.rows)}")
    out.append(f"stda_method = {cfg.stda_method}")
    if cfg.mixed_methods:
        out.append(f"mixed_methods = {', '.join(cfg.mixed_methods)}")
    out.append(f"student_widths = {', '.join(repr(w) for w in cfg.student_widths)}")
    out.append(f"input_dim = {cfg.input_dim}")
    out.append(f"latent_dim = {cfg.latent_dim}")
    out.append(f"test_identities = {cfg.test_identities}")
    out.append(f"query_fraction = {cfg.query_fraction!r}")
    out.append(f"student_hidden = {', '.join(str(h) for h in cfg.student_hidden)}")
    out.append(f"student_embed = {cfg.student_embed}")
    out.append(f"teacher_hidden = {', '.join(str(h) for h in cfg.teacher_hidden)}")
    out.append(f"teacher_embed = {cfg.teacher_embed}")
    out.append(f"output_dir = {cfg.output_dir}")
    out.append("")
    for name in _TRAIN_FIELDS:
        value = getattr(cfg.train, name)
        out.append(f"train.{name} = {value!r}" if isinstance(value, float) else f"train.{name} = {value}")
    out.append("")

    def emit_domain(prefix: str, dc: DomainConfig):
        for name in _DOMAIN_FIELDS:
            value = getattr(dc, name)
            rendered = repr(value) if isinstance(value, float) else str(value)
            out.append(f"{prefix}.{name} = {rendered}")
        out.append("")

    emit_domain("source", cfg.source)
    for i, dc in enumerate(cfg.targets, start=1):
        emit_domain(f"target{i}", dc)
    return "\n".join(out).rstrip("\n") + "\n"
