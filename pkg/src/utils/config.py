"""Configuration loader for liplab.

Defaults live in config/settings.yaml, one section per concern. Run configs
(JSON or YAML) override individual keys; keys the defaults do not know are
rejected so a manifest always describes the run completely.
"""

import copy
import hashlib
import json
import os
from typing import Optional

import yaml

# Project root: two levels up from this file (src/utils/config.py → project root)
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
CONFIG_DIR = os.path.join(PROJECT_ROOT, "config")

# LIPLAB_RUNS_DIR relocates every run directory (e.g. onto scratch storage)
RUNS_DIR = os.environ.get("LIPLAB_RUNS_DIR", "").strip() or os.path.join(PROJECT_ROOT, "runs")

GLOBAL_KEYS = ("seed", "threads")
# mappings replaced as a whole rather than merged key by key
LEAF_KEYS = ("fault_probability",)


class ConfigError(ValueError):
    pass


def load_settings(path: Optional[str] = None) -> dict:
    """Load settings.yaml and return as dict."""
    path = path or os.path.join(CONFIG_DIR, "settings.yaml")
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def load_document(path: str) -> dict:
    """A JSON or YAML mapping, chosen by file extension."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            if path.endswith((".yaml", ".yml")):
                doc = yaml.safe_load(f)
            else:
                doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}")
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def merge_config(defaults: dict, overrides: dict, where: str = "") -> dict:
    """Deep-merge overrides into a copy of defaults; unknown keys raise ConfigError.

    A default of ``None`` accepts any value.
    """
    out = copy.deepcopy(defaults)
    for key, value in (overrides or {}).items():
        path = f"{where}.{key}" if where else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(defaults[key], dict) and defaults[key] and key not in LEAF_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}' must be a mapping")
            out[key] = merge_config(defaults[key], value, path)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(sections: tuple, overrides: Optional[dict] = None,
                   settings: Optional[dict] = None) -> dict:
    """Defaults for ``sections`` (plus seed/threads) with overrides applied."""
    settings = settings if settings is not None else load_settings()
    defaults = {k: settings.get(k) for k in GLOBAL_KEYS}
    for name in sections:
        if name not in settings:
            raise ConfigError(f"settings.yaml has no '{name}' section")
        defaults[name] = settings[name]
    return merge_config(defaults, overrides or {})


def load_run_config(path: Optional[str], sections: tuple,
                    settings: Optional[dict] = None) -> dict:
    return resolve_config(sections, load_document(path) if path else {}, settings)


def blob_hash(path: str) -> str:
    """Content hash with git's blob framing, so it matches `git hash-object`."""
    with open(path, "rb") as f:
        data = f.read()
    h = hashlib.sha1()
    h.update(f"blob {len(data)}\0".encode("utf-8"))
    h.update(data)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    data = json.dumps(config, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
