"""Layered run configuration: defaults, a TOML file, environment overrides, then flags.

Sections map onto the module config dataclasses. Unknown sections or keys
are errors. Environment overrides use CRYSTALSCREEN_<SECTION>__<KEY>=<toml value>;
flags use --set section.key=<toml value>.
"""

from __future__ import annotations

import dataclasses
import os

import tomli

from .diffusion import DiffusionConfig
from .errors import ConfigError
from .jepa import JepaConfig
from .pipeline import PipelineConfig
from .runio import stage_seed

ENV_PREFIX = "CRYSTALSCREEN_"

# published architecture scale, kept for reference; desk defaults are the dataclass defaults
FULL_PRESETS = {
    "jepa": {"layers": 8, "hidden_dim": 512, "heads": 16, "dropout": 0.0},
    "diffusion": {"layers": 12, "hidden_dim": 1024, "heads": 8, "dropout": 0.01, "T": 256, "schedule": "cosine"},
}


@dataclasses.dataclass
class MetricsConfig:
    epsilon: float = 0.1
    en_threshold: float = 0.0
    oracle_seed: int = 0


SECTIONS = {
    "jepa": JepaConfig,
    "diffusion": DiffusionConfig,
    "pipeline": PipelineConfig,
    "metrics": MetricsConfig,
}
TOP_LEVEL = {"seed", "preset"}


def _parse_value(text):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _check_keys(section, values):
    cls = SECTIONS[section]
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {unknown}")


def _merge(doc, overrides, origin):
    for key, value in overrides.items():
        if key in TOP_LEVEL:
            doc[key] = value
            continue
        if key not in SECTIONS:
            raise ConfigError(f"unknown config section {key!r} ({origin})")
        if not isinstance(value, dict):
            raise ConfigError(f"section {key!r} must be a table ({origin})")
        _check_keys(key, value)
        doc.setdefault(key, {}).update(value)


def _dotted(pairs, origin):
    out = {}
    for key, value in pairs:
        parts = key.split(".")
        if len(parts) == 1:
            out[parts[0]] = value
        elif len(parts) == 2:
            out.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"bad override key {key!r} ({origin})")
    return out


def load_config(path=None, env=None, sets=()):
    """Resolve the layered document into {"seed", "preset", section: dict of final values}."""
    doc = {}
    if path:
        try:
            with open(path, "rb") as fh:
                file_doc = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        _merge(doc, file_doc, str(path))
    env = os.environ if env is None else env
    pairs = []
    for k, v in sorted(env.items()):
        if k.startswith(ENV_PREFIX):
            pairs.append((k[len(ENV_PREFIX):].lower().replace("__", "."), _parse_value(v)))
    _merge(doc, _dotted(pairs, "environment"), "environment")
    flag_pairs = []
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        flag_pairs.append((k.strip(), _parse_value(v.strip())))
    _merge(doc, _dotted(flag_pairs, "flags"), "flags")
    return resolve(doc)


def resolve(doc):
    """Fill defaults. Section seeds not given explicitly derive from the root seed by stage name."""
    root = int(doc.get("seed", 0))
    preset = doc.get("preset", "desk")
    if preset not in ("desk", "full"):
        raise ConfigError(f"unknown preset {preset!r}")
    out = {"seed": root, "preset": preset}
    for name, cls in SECTIONS.items():
        values = {}
        if preset == "full":
            values.update(FULL_PRESETS.get(name, {}))
        values.update(doc.get(name, {}))
        fields = {f.name for f in dataclasses.fields(cls)}
        if "seed" in fields and "seed" not in values:
            values["seed"] = root if name == "pipeline" else stage_seed(root, name)
        try:
            obj = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
        out[name] = dataclasses.asdict(obj)
    return out


def section(cfg, name):
    """Instantiate the dataclass for one resolved section."""
    return SECTIONS[name](**cfg[name])
