"""key=value config files with sections, mirrored one-to-one by CLI flags.

    [common]
    seed = 0
    out_dir = runs/demo
    format = csv

    [train]
    lr_grid = 1e-3, 1e-2, 1e-1
    epochs = 50

    [adapt]
    strategies = linear_probe; kadaptation:n=4,r=1

Precedence is built-in defaults, then the file, then explicit flags.
"""

from __future__ import annotations

import argparse
import configparser
from typing import Optional

from .service.schemas import SECTIONS

COMMON = {"seed": int, "out_dir": str, "format": str, "server": str}
COMMON_DEFAULTS = {"seed": 0, "out_dir": ".", "format": "csv", "server": None}


class ConfigError(ValueError):
    pass


def flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def all_keys() -> dict:
    """key -> section for every settings field; keys are unique across sections."""
    out = {k: "common" for k in COMMON}
    for section, model in SECTIONS.items():
        for key in model.model_fields:
            if key in out:
                raise AssertionError(f"config key {key!r} appears in two sections")
            out[key] = section
    return out


def add_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per config key. Values stay strings; pydantic coerces them."""
    parser.add_argument("--config", help="key=value config file with [sections]")
    for key, section in all_keys().items():
        kwargs = {"default": None, "dest": key, "help": f"[{section}] {key}"}
        if key == "format":
            kwargs["choices"] = ("csv", "json")
        parser.add_argument(flag(key), **kwargs)


def read_file(path: str) -> dict:
    """Parse a config file into {section: {key: str}} after validating names."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    keys = all_keys()
    out: dict = {}
    for section in cp.sections():
        if section != "common" and section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in cp.items(section):
            if keys.get(key) != section:
                where = f" (belongs in [{keys[key]}])" if key in keys else ""
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]{where}")
            out.setdefault(section, {})[key] = value
    return out


def resolve(args: argparse.Namespace, config_path: Optional[str] = None) -> dict:
    """Merge defaults, file and flags into {section: {key: value}}."""
    merged: dict = {"common": dict(COMMON_DEFAULTS)}
    path = config_path if config_path is not None else getattr(args, "config", None)
    if path:
        for section, values in read_file(path).items():
            merged.setdefault(section, {}).update(values)
    for key, section in all_keys().items():
        value = getattr(args, key, None)
        if value is not None:
            merged.setdefault(section, {})[key] = value
    common = merged["common"]
    common["seed"] = int(common["seed"])
    if common["format"] not in ("csv", "json"):
        raise ConfigError(f"format must be csv or json, got {common['format']!r}")
    return merged
