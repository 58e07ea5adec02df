"""One structured run-config file (YAML) with --set and environment overrides."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .model import ModelConfig, RegressionHeadConfig
from .occlusion import OcclusionConfig
from .synthsky import SynthConfig
from .trainer import DEFAULT_FRACTIONS, DEFAULT_TRIALS, FinetuneConfig, PretrainConfig

ENV_PREFIX = "BANDSSL_"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: str = "data/synth"
    n_clusters: int = 500
    rgb_images: int = 1000
    rgb_side: int = 32


@dataclass
class HeadSection:
    conv_channels: list = field(default_factory=lambda: [16, 64])
    fc_units: list = field(default_factory=lambda: [1024, 512])


@dataclass
class TrainSection:
    fold: int = 0
    pretrained: str | None = None


@dataclass
class SweepSection:
    fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    trials: int = DEFAULT_TRIALS
    folds: list | None = None
    workers: int = 1
    pretrained: str | None = None


@dataclass
class OcclusionSection:
    checkpoint: str | None = None
    patch_size: int = 16
    stride: int = 8
    fill: str = "dataset_mean"
    clusters: list | None = None
    n_clusters: int = 4
    bands: list = field(default_factory=lambda: ["u", "g", "r", "i", "z"])


@dataclass
class ReportSection:
    metrics: list | None = None


def _section_defaults(cls) -> dict:
    return asdict(cls())


SECTIONS = {
    "data": DataSection,
    "synth": SynthConfig,
    "head": HeadSection,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "train": TrainSection,
    "sweep": SweepSection,
    "occlusion": OcclusionSection,
    "report": ReportSection,
}
TOP_LEVEL = {"seed": 0, "deterministic": False, "output_dir": "runs/default"}


def default_config() -> dict:
    cfg = dict(TOP_LEVEL)
    for name, cls in SECTIONS.items():
        cfg[name] = _section_defaults(cls)
    return cfg


def _key_lines(node, prefix=()) -> dict:
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = prefix + (str(k.value),)
            out[key] = k.start_mark.line + 1
            out.update(_key_lines(v, key))
    return out


def _merge(base: dict, update: dict, lines: dict, where: str, prefix=()) -> None:
    for key, value in update.items():
        path = prefix + (str(key),)
        dotted = ".".join(path)
        loc = f"{where}:{lines[path]}" if path in lines else where
        if key not in base:
            raise ConfigError(f"unknown key '{dotted}' ({loc})")
        if isinstance(base[key], dict) and key in SECTIONS and not prefix:
            if not isinstance(value, dict):
                raise ConfigError(f"section '{dotted}' must be a mapping ({loc})")
            _merge(base[key], value, lines, where, path)
        elif isinstance(base[key], dict) and isinstance(value, dict):
            # free-form tables such as per-band maps
            base[key] = {**base[key], **value}
        else:
            base[key] = value


def _set(cfg: dict, dotted: str, raw: str, where: str) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown key '{dotted}' ({where})")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown key '{dotted}' ({where})")
    try:
        node[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad value for '{dotted}' ({where}): {exc}") from None


def load_config(path=None, overrides=(), environ=None) -> dict:
    """Defaults <- file <- environment (``BANDSSL_SECTION__KEY``) <- ``--set key=value``."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = f":{mark.line + 1}" if mark else ""
            raise ConfigError(f"cannot parse {path}{line}: {getattr(exc, 'problem', exc)}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, data, _key_lines(node) if node else {}, str(path))
    environ = os.environ if environ is None else environ
    for name, raw in sorted(environ.items()):
        if name.startswith(ENV_PREFIX):
            dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
            _set(cfg, dotted, raw, f"environment {name}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set(cfg, key.strip(), raw, "--set")
    build(cfg)  # validate eagerly
    return cfg


def _construct(cls, values: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key '{section}.{sorted(unknown)[0]}'")
    kwargs = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        if isinstance(v, list) and f.type.startswith("tuple"):
            v = tuple(v)
        kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from None


@dataclass
class RunConfig:
    raw: dict
    seed: int
    deterministic: bool
    output_dir: Path
    data: DataSection
    synth: SynthConfig
    model: ModelConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    train: TrainSection
    sweep: SweepSection
    occlusion: OcclusionConfig
    occlusion_section: OcclusionSection
    report: ReportSection


def build(cfg: dict) -> RunConfig:
    if not isinstance(cfg["seed"], int):
        raise ConfigError("'seed' must be an integer")
    s = {name: _construct(cls, cfg[name], name) for name, cls in SECTIONS.items()}
    head = s["head"]
    model = ModelConfig(head=RegressionHeadConfig(tuple(head.conv_channels), tuple(head.fc_units)))
    occ = s["occlusion"]
    occ_cfg = OcclusionConfig(occ.patch_size, occ.stride, occ.fill)
    if occ_cfg.fill not in ("zero", "dataset_mean"):
        raise ConfigError(f"invalid [occlusion] fill {occ_cfg.fill!r}")
    return RunConfig(
        raw=cfg,
        seed=int(cfg["seed"]),
        deterministic=bool(cfg["deterministic"]),
        output_dir=Path(cfg["output_dir"]),
        data=s["data"],
        synth=s["synth"],
        model=model,
        pretrain=s["pretrain"],
        finetune=s["finetune"],
        train=s["train"],
        sweep=s["sweep"],
        occlusion=occ_cfg,
        occlusion_section=occ,
        report=s["report"],
    )


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)

