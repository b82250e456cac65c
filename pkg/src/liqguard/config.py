"""Run configuration: one JSON document, dotted-key overrides, provenance hash."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from . import __version__

ENV_VAR = "LIQGUARD_CONFIG"

DEFAULTS: dict = {
    "paths": {"transactions": None, "reserves": None, "output_dir": "liqguard-out",
              "external_scores": {}},
    "horizon_days": 7.0,
    "ridge": 1e-4,
    "epsilon": 1e-12,
    "features": {"days_since_cap": 365.0, "market_window_days": 30.0},
    "trend": {"accel_weight": 0.8, "vol_penalty": 0.6, "momentum": 0.3},
    "agent": {"multiplier": 2.0, "alpha_min": "0.000001", "history_depth": 10},
    "detection": {"base": 1.0, "per_day_increment": 0.02, "cap": 1.10, "time_tolerance": 2.0,
                  "adaptive_base": 3600, "hybrid_period": 3600, "dense_step": 60,
                  "milestone_step": 0.001, "dust_ratio": 0.99},
    "replay": {"block_time": 2, "min_lead": None, "dust_threshold": 1.0, "safety_factor": 1.5,
               "utilization": 0.8, "tail_seconds": 0},
    "sampling": {"per_pair": 300, "window": [0.4, 0.8], "train_end_quantile": 0.8},
    "sensitivity": {"perturbation": 0.1, "trials": 100},
    "seed": 0,
    "workers": None,
}

#: keys that change how a run is executed but not what it produces
NON_SEMANTIC = ("workers",)


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {prefix}{k}")
        if isinstance(out[k], dict) and k != "external_scores":
            if not isinstance(v, dict):
                raise ConfigError(f"{prefix}{k} must be an object")
            out[k] = _merge(out[k], v, f"{prefix}{k}.")
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_override(cfg: dict, path: list[str], value) -> None:
    node = cfg
    for k in path[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config key {'.'.join(path)}")
        node = node[k]
    if path[-1] not in node and node is not cfg.get("paths", {}).get("external_scores"):
        raise ConfigError(f"unknown config key {'.'.join(path)}")
    node[path[-1]] = value


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> dict:
    """Defaults <- JSON file (or $LIQGUARD_CONFIG) <- ``--set`` overrides.

    Relative paths in ``paths`` resolve against the config file's directory.
    """
    path = path or os.environ.get(ENV_VAR)
    data: dict = {}
    base_dir = Path.cwd()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {p}: {exc}") from None
        base_dir = p.resolve().parent
    cfg = _merge(DEFAULTS, data)
    for item in overrides:
        apply_override(cfg, *parse_override(item))
    paths = cfg["paths"]
    for key in ("transactions", "reserves", "output_dir"):
        if paths[key] is not None:
            paths[key] = str((base_dir / paths[key]).resolve())
    paths["external_scores"] = {e: str((base_dir / f).resolve())
                                for e, f in sorted(paths["external_scores"].items())}
    return cfg


def config_hash(cfg: dict) -> str:
    semantic = {k: v for k, v in cfg.items() if k not in NON_SEMANTIC}
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "version": __version__}


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
