"""Pipeline configuration: a strict INI schema with typed defaults."""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import netspec as N
from .errors import ValidationError
from .seeding import derive_seed
from .trainer import TrainConfig

STAGES = ("pretrain", "stage1", "stage2", "baseline1", "baseline2")
CLASSIFIERS = ("baseline1", "baseline2", "stage1", "stage2")
# sections that never influence results, so they stay out of the digest
NON_SCIENTIFIC = ("paths",)
NON_SCIENTIFIC_KEYS = {("run", "threads")}

_TRAIN_KEYS = ("epochs", "batch_size", "lr", "momentum", "lr_decay_at", "lr_decay_factor",
               "patches_per_slide", "weighted_sampling", "freeze_retained")

DEFAULT_TRAIN = {
    "pretrain": TrainConfig(epochs=8, patches_per_slide=16, select="last"),
    "stage1": TrainConfig(epochs=8, patches_per_slide=16),
    "stage2": TrainConfig(epochs=5, patches_per_slide=16),
    "baseline1": TrainConfig(epochs=5, patches_per_slide=16),
    "baseline2": TrainConfig(epochs=5, patches_per_slide=16),
}


@dataclass(frozen=True)
class SynthConfig:
    patients_per_class: int = 10
    slides_per_patient: int = 2
    side: int = 1024
    tile: int = 128
    levels: tuple[int, ...] = (1, 2, 4)
    proxy_slides_per_class: int = 6
    proxy_side: int = 512


@dataclass(frozen=True)
class NetworkConfig:
    blocks: tuple[N.BlockSpec, ...] = N.parse_blocks("1x16, 1x32, 1x64")
    new_blocks: tuple[N.BlockSpec, ...] = N.parse_blocks("2x8, 2x16")
    hidden_dims: tuple[int, ...] = ()
    low_level: int = 4
    high_level: int = 2


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_features: int = 2


@dataclass(frozen=True)
class PipelineConfig:
    run_dir: Path = Path("run")
    data_dir: Path | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: dict = field(default_factory=lambda: dict(DEFAULT_TRAIN))
    forest: ForestConfig = field(default_factory=ForestConfig)
    seed: int = 0
    folds: int = 3
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "run_dir", Path(self.run_dir))
        if self.data_dir is not None:
            object.__setattr__(self, "data_dir", Path(self.data_dir))

    @property
    def data_root(self) -> Path:
        return self.data_dir if self.data_dir is not None else self.run_dir / "data"

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def backbone(self, num_classes: int = 5) -> N.NetworkSpec:
        return N.NetworkSpec(self.network.blocks, num_classes, self.network.hidden_dims,
                             self.synth.tile // self.network.low_level, 1)

    def train_config(self, stage: str) -> TrainConfig:
        level = self.network.low_level if stage in ("pretrain", "stage1") else self.network.high_level
        return replace(self.train[stage], seed=self.stage_seed(stage), level=level)

    def validate(self) -> "PipelineConfig":
        s, n = self.synth, self.network
        if s.side % s.tile or s.side < 8 * s.tile:
            raise ValidationError(f"slide side {s.side} must be a multiple of tile {s.tile} and >= 8 tiles")
        if s.proxy_side % s.tile or s.proxy_side < 2 * s.tile:
            raise ValidationError(f"proxy side {s.proxy_side} must be a multiple of tile {s.tile} and >= 2 tiles")
        for level in (n.low_level, n.high_level):
            if level not in s.levels:
                raise ValidationError(f"network level {level} is not among synth levels {s.levels}")
        if n.low_level != 2 * n.high_level:
            raise ValidationError(f"low_level {n.low_level} must be twice high_level {n.high_level}")
        if self.folds < 2 or self.threads < 1:
            raise ValidationError("folds must be >= 2 and threads >= 1")
        if not 1 <= self.forest.max_features <= 5 or self.forest.n_trees < 1:
            raise ValidationError(f"bad forest settings {self.forest}")
        self.backbone()
        if len(n.new_blocks) != 2 or n.new_blocks[-1].out_channels != n.blocks[0].out_channels:
            raise ValidationError(
                f"new_blocks must be two blocks ending in {n.blocks[0].out_channels} channels, "
                f"got {N.format_blocks(n.new_blocks)}")
        return self

    # -- text form -----------------------------------------------------------

    def to_ini(self) -> str:
        s, n, f = self.synth, self.network, self.forest
        cp = configparser.ConfigParser(interpolation=None)
        cp["paths"] = {"run_dir": str(self.run_dir), "data_dir": "" if self.data_dir is None else str(self.data_dir)}
        cp["run"] = {"seed": str(self.seed), "folds": str(self.folds), "threads": str(self.threads)}
        cp["synth"] = {
            "patients_per_class": str(s.patients_per_class), "slides_per_patient": str(s.slides_per_patient),
            "side": str(s.side), "tile": str(s.tile), "levels": ", ".join(map(str, s.levels)),
            "proxy_slides_per_class": str(s.proxy_slides_per_class), "proxy_side": str(s.proxy_side)}
        cp["network"] = {"blocks": N.format_blocks(n.blocks), "new_blocks": N.format_blocks(n.new_blocks),
                         "hidden_dims": ", ".join(map(str, n.hidden_dims)),
                         "low_level": str(n.low_level), "high_level": str(n.high_level)}
        for stage in STAGES:
            t = self.train[stage]
            cp[f"train.{stage}"] = {k: _fmt(getattr(t, k)) for k in _TRAIN_KEYS}
        cp["forest"] = {"n_trees": str(f.n_trees), "max_features": str(f.max_features)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self, sections=("",)) -> str:
        """Hash of the settings that can change a result.

        ``sections`` restricts the hash to dotted prefixes such as ``"synth"``
        or ``"run.seed"``; the empty prefix selects everything.
        """
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(self.to_ini())
        lines = []
        for sec in sorted(cp.sections()):
            if sec in NON_SCIENTIFIC:
                continue
            for key in sorted(cp[sec]):
                name = f"{sec}.{key}"
                if (sec, key) not in NON_SCIENTIFIC_KEYS and any(
                        p == "" or name == p or name.startswith(p + ".") for p in sections):
                    lines.append(f"{sec}.{key}={cp[sec][key]}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _schema(section: str) -> dict:
    if section == "paths":
        return {"run_dir": str, "data_dir": str}
    if section == "run":
        return {"seed": int, "folds": int, "threads": int}
    if section == "synth":
        return {f.name: (lambda t: N.parse_int_list(t)) if f.name == "levels" else int
                for f in fields(SynthConfig)}
    if section == "network":
        return {"blocks": N.parse_blocks, "new_blocks": N.parse_blocks, "hidden_dims": N.parse_int_list,
                "low_level": int, "high_level": int}
    if section == "forest":
        return {"n_trees": int, "max_features": int}
    if section.startswith("train.") and section[6:] in STAGES:
        types = {f.name: f.type for f in fields(TrainConfig)}
        return {k: {"int": int, "float": float, "bool": _bool}[types[k]] for k in _TRAIN_KEYS}
    raise ValidationError(f"unknown config section [{section}]")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Overlay ``text`` on ``base`` (defaults if omitted). Unknown sections/keys are errors."""
    cfg = base or PipelineConfig()
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"config is not valid INI: {exc}") from None
    values: dict[str, dict] = {}
    for sec in cp.sections():
        schema = _schema(sec)
        for key, raw in cp[sec].items():
            if key not in schema:
                raise ValidationError(f"unknown key {key!r} in [{sec}]; expected one of {sorted(schema)}")
            try:
                values.setdefault(sec, {})[key] = schema[key](raw)
            except (ValueError, ValidationError) as exc:
                raise ValidationError(f"[{sec}] {key} = {raw!r}: {exc}") from None
    paths = values.get("paths", {})
    run = values.get("run", {})
    train = dict(cfg.train)
    for stage in STAGES:
        if f"train.{stage}" in values:
            try:
                train[stage] = replace(train[stage], **values[f"train.{stage}"])
            except ValidationError as exc:
                raise ValidationError(f"[train.{stage}]: {exc}") from None
    data_dir = paths.get("data_dir", None if cfg.data_dir is None else str(cfg.data_dir))
    return replace(
        cfg,
        run_dir=Path(paths.get("run_dir", cfg.run_dir)),
        data_dir=Path(data_dir) if data_dir else None,
        synth=replace(cfg.synth, **values.get("synth", {})),
        network=replace(cfg.network, **values.get("network", {})),
        train=train,
        forest=replace(cfg.forest, **values.get("forest", {})),
        seed=run.get("seed", cfg.seed),
        folds=run.get("folds", cfg.folds),
        threads=run.get("threads", cfg.threads),
    ).validate()


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def default_config_text() -> str:
    return PipelineConfig().validate().to_ini()
