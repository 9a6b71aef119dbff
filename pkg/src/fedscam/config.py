"""Experiment configuration: a flat ``key = value`` text format with dotted sections.

Example::

    algorithm = fedscam
    rounds = 30
    dirichlet.alpha = 0.1
    scam.gamma = 1.0
    model.hidden = 64, 32

Lines starting with ``#`` are comments. Unknown keys are rejected; missing
keys take the defaults below.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ContractError
from .scam import PILOTS, VARIANTS, FedScamConfig

ALGORITHMS = (
    "fedavg",
    "uniform",
    "fedavgm",
    "qfedavg",
    "fedprox",
    "fedlw",
    "fednolowe",
    "fedlwsam",
    "fedsam",
    "fedlesam",
    "fedwmsam",
    "fedscam",
    "fedscam_wa",
    "fedscam_sam",
)


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    classes: int = 10
    dim: int = 16
    per_class: int = 200
    test_per_class: int = 100
    spread: float = 0.35
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class DirichletConfig:
    alpha: float = 0.5
    num_clients: int = 10
    min_size: int = 10


@dataclass(frozen=True)
class OptConfig:
    rho: float = 0.05
    mu: float = 0.01
    perturb_momentum: float = 0.9


@dataclass(frozen=True)
class AggConfig:
    server_momentum: float = 0.9
    q: float = 1.0
    lw_temperature: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "fedavg"
    seed: int = 0
    rounds: int = 30
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.01
    eval_every: int = 1
    workers: int = 1
    hidden: tuple[int, ...] = (64, 32)
    data: DataConfig = field(default_factory=DataConfig)
    dirichlet: DirichletConfig = field(default_factory=DirichletConfig)
    scam: FedScamConfig = field(default_factory=FedScamConfig)
    opt: OptConfig = field(default_factory=OptConfig)
    agg: AggConfig = field(default_factory=AggConfig)

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        validate(cfg)
        return cfg

    def to_dict(self) -> dict:
        return {key: value for key, value in flatten(self)}


# key in text -> (section attribute or None, field name)
_SECTIONS = {"data": "data", "dirichlet": "dirichlet", "scam": "scam", "opt": "opt", "agg": "agg"}
_ALIASES = {
    ("scam", "lambda"): "lam",
    ("scam", "clustering"): "clustering_enabled",
    ("model", "hidden"): "hidden",
}


def _field_types(cls) -> dict[str, object]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _resolve(key: str):
    """Map a text key to (section or None, field name, declared type)."""
    parts = key.split(".")
    if len(parts) == 1:
        types = _field_types(ExperimentConfig)
        if key in types and key not in _SECTIONS and key != "hidden":
            return None, key, types[key]
        raise KeyError(key)
    if len(parts) != 2:
        raise KeyError(key)
    section, name = parts
    if (section, name) in _ALIASES:
        alias = _ALIASES[(section, name)]
        if section == "model":
            return None, alias, _field_types(ExperimentConfig)[alias]
        section_cls = type(getattr(ExperimentConfig(), _SECTIONS[section]))
        return section, alias, _field_types(section_cls)[alias]
    if section not in _SECTIONS:
        raise KeyError(key)
    section_cls = type(getattr(ExperimentConfig(), _SECTIONS[section]))
    types = _field_types(section_cls)
    # aliased fields are only reachable through their public spelling
    if name not in types or (section, name) in {(sec, tgt) for (sec, _), tgt in _ALIASES.items()}:
        raise KeyError(key)
    return section, name, types[name]


def _convert(raw: str, declared: str, key: str):
    text = raw.strip()
    try:
        if declared == "int":
            return int(text)
        if declared == "float":
            return float(text)
        if declared == "bool":
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if declared == "float | None":
            return None if text.lower() in ("none", "") else float(text)
        if declared == "tuple[int, ...]":
            return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
        if declared == "str":
            if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
                return text[1:-1]
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw.strip()!r} as {declared}") from None
    raise ConfigError(f"{key}: unsupported type {declared}")


def parse_config(source) -> ExperimentConfig:
    """Parse from a path or from inline text (anything containing a newline or '=')."""
    if isinstance(source, Path) or ("=" not in str(source) and "\n" not in str(source)):
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        return parse_config_text(text, origin=str(path))
    return parse_config_text(str(source))


def parse_config_text(text: str, origin: str = "<config>") -> ExperimentConfig:
    top: dict[str, object] = {}
    sections: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (p.strip() for p in stripped.split("=", 1))
        if key in seen:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            section, name, declared = _resolve(key)
        except KeyError:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}") from None
        converted = _convert(value, declared, f"{origin}:{lineno}: {key}")
        if section is None:
            top[name] = converted
        else:
            sections[section][name] = converted

    try:
        built = {name: type(getattr(ExperimentConfig(), name))(**vals)
                 for name, vals in sections.items()}
        cfg = ExperimentConfig(**top, **built)
    except ContractError as exc:
        raise ConfigError(_explain(str(exc))) from None
    validate(cfg)
    return cfg


def _explain(message: str) -> str:
    if "lambda" in message:
        return "scam.lambda must lie in (0,1]"
    return f"scam: {message}"


def validate(cfg: ExperimentConfig) -> None:
    def need(ok: bool, message: str):
        if not ok:
            raise ConfigError(message)

    need(cfg.algorithm in ALGORITHMS, f"algorithm must be one of {', '.join(ALGORITHMS)}")
    need(cfg.rounds >= 1, "rounds >= 1 is required")
    need(cfg.local_epochs >= 1, "local_epochs >= 1 is required")
    need(cfg.batch_size >= 1, "batch_size >= 1 is required")
    need(cfg.lr > 0, "lr > 0 is required")
    need(cfg.eval_every >= 1, "eval_every >= 1 is required")
    need(cfg.workers >= 1, "workers >= 1 is required")
    need(all(h >= 1 for h in cfg.hidden),
         "model.hidden widths must be >= 1")
    need(0 <= cfg.seed < 2**63, "seed must lie in [0, 2^63)")

    d = cfg.data
    need(d.source in ("synthetic", "idx"), "data.source must be 'synthetic' or 'idx'")
    if d.source == "synthetic":
        need(d.classes >= 2, "data.classes >= 2 is required")
        need(d.dim >= 2, "data.dim >= 2 is required")
        need(d.per_class >= 1, "data.per_class >= 1 is required")
        need(d.test_per_class >= 1, "data.test_per_class >= 1 is required")
        need(d.spread >= 0, "data.spread >= 0 is required")
    else:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            path = getattr(d, key)
            need(bool(path), f"data.{key} is required when data.source = idx")
            need(Path(path).is_file(), f"data.{key}: file not found: {path}")

    p = cfg.dirichlet
    need(p.alpha > 0, "dirichlet.alpha > 0 is required")
    need(p.num_clients >= 1, "dirichlet.num_clients >= 1 is required")
    need(p.min_size >= 0, "dirichlet.min_size >= 0 is required")
    if d.source == "synthetic":
        n = d.classes * d.per_class
        need(n >= p.num_clients * p.min_size,
             f"dirichlet.min_size infeasible: {n} samples < "
             f"{p.num_clients} clients x {p.min_size}")

    s = cfg.scam
    need(0 < s.lam <= 1, "scam.lambda must lie in (0,1]")
    need(s.rho_max > 0, "scam.rho_max > 0 is required")

    o = cfg.opt
    need(o.rho >= 0, "opt.rho >= 0 is required")
    need(o.mu >= 0, "opt.mu >= 0 is required")
    need(0 <= o.perturb_momentum < 1, "opt.perturb_momentum must lie in [0,1)")

    a = cfg.agg
    need(0 <= a.server_momentum < 1, "agg.server_momentum must lie in [0,1)")
    need(a.q >= 0, "agg.q >= 0 is required")
    need(a.lw_temperature > 0, "agg.lw_temperature > 0 is required")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _text_key(section: str | None, name: str) -> str:
    for (sec, alias_name), target in _ALIASES.items():
        if target == name and (section == sec or (section is None and sec == "model")):
            return f"{sec}.{alias_name}"
    return name if section is None else f"{section}.{name}"


def flatten(cfg: ExperimentConfig):
    """Yield (text key, value) for every setting, in a stable order."""
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(value):
                yield _text_key(f.name, sub.name), getattr(value, sub.name)
        else:
            yield _text_key(None, f.name), value


def to_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{key} = {_format(value)}\n" for key, value in flatten(cfg))


__all__ = [
    "ALGORITHMS",
    "PILOTS",
    "VARIANTS",
    "ExperimentConfig",
    "parse_config",
    "parse_config_text",
    "to_text",
    "validate",
]
