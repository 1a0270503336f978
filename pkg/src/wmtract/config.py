"""Run configuration: JSON file plus ``section.key=value`` overrides.

Every field has a default; unknown sections or keys are rejected with the
dotted path of the offending field. The resolved document is what gets
echoed into each output directory.
"""
from __future__ import annotations

import copy
import json
import os
from typing import Any, Sequence

from .errors import ConfigError

# (default, type, nullable); "vec3"/"pair" are fixed-length numeric lists
SCHEMA: dict[str, dict[str, tuple[Any, str, bool]]] = {
    "io": {
        "data_dir": ("data", "str", False),
        "run_dir": ("run", "str", False),
        "checkpoint": (None, "str", True),
        "input": ("tensor", "str", False),
        "workers": (1, "int", False),
    },
    "network": {
        "architecture": ("unet", "str", False),
        "in_channels": (6, "int", False),
        "levels": (2, "int", False),
        "base_channels": (8, "int", False),
    },
    "loss": {
        "kind": ("wip", "str", False),
        "weight": (3.0, "float", False),
    },
    "optim": {
        "name": ("adam", "str", False),
        "lr": (0.1, "float", False),
        "beta1": (0.9, "float", False),
        "beta2": (0.999, "float", False),
        "eps": (1e-8, "float", False),
        "patience": (10, "int", False),
        "factor": (0.5, "float", False),
        "min_delta": (1e-4, "float", False),
    },
    "train": {
        "batch_size": (4, "int", False),
        "epochs": (30, "int", False),
        "buffer": (2, "int", False),
        "diffusivity_scale": (1000.0, "float", False),
    },
    "roi": {
        "offset": ([0, 0, 0], "ivec3", False),
        "size": (None, "ivec3", True),
    },
    "phantom": {
        "n_train": (24, "int", False),
        "n_validate": (4, "int", False),
        "n_test": (8, "int", False),
        "dims": ([32, 32, 32], "ivec3", False),
        "start": ([5.0, 8.0, 16.0], "vec3", False),
        "end": ([26.0, 8.0, 16.0], "vec3", False),
        "bulge": ([0.0, 14.0, 0.0], "vec3", False),
        "radius": (3.0, "float", False),
        "lambda_par": (1.7e-3, "float", False),
        "lambda_perp": (0.3e-3, "float", False),
        "background": (0.8e-3, "float", False),
        "s0": (1000.0, "float", False),
        "snr": (20.0, "float", True),
        "n_directions": (25, "int", False),
        "bvalue": (1000.0, "float", False),
        "jitter_endpoint": (2.0, "float", False),
        "jitter_bulge": (3.0, "float", False),
        "jitter_radius": ([2.5, 3.5], "pair", False),
        "jitter_diffusivity": (0.1, "float", False),
    },
    "metrics": {
        "split": ("test", "str", False),
        "gradcheck_seeds": (20, "int", False),
        "gradcheck_h": (1e-5, "float", False),
    },
}
TOP_LEVEL = {"seed": (0, "int", False)}

CHOICES = {
    "network.architecture": ("unet", "vnet"),
    "loss.kind": ("wip", "wce"),
    "optim.name": ("adam", "nadam"),
    "metrics.split": ("train", "validate", "test"),
}


def defaults() -> dict:
    out = {k: v[0] for k, v in TOP_LEVEL.items()}
    for sec, fields in SCHEMA.items():
        out[sec] = {k: copy.deepcopy(v[0]) for k, v in fields.items()}
    return out


def _coerce(path: str, value: Any, kind: str, nullable: bool) -> Any:
    if value is None:
        if nullable:
            return None
        raise ConfigError(path, "may not be null")
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    n = 2 if kind == "pair" else 3
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise ConfigError(path, f"expected a list of {n} numbers, got {value!r}")
    item = "int" if kind == "ivec3" else "float"
    return [_coerce(f"{path}[{i}]", v, item, False) for i, v in enumerate(value)]


def _field(path: str) -> tuple[Any, str, bool]:
    if path in TOP_LEVEL:
        return TOP_LEVEL[path]
    sec, _, key = path.partition(".")
    if sec not in SCHEMA:
        raise ConfigError(path, f"unknown section {sec!r}")
    if key not in SCHEMA[sec]:
        raise ConfigError(path, "unknown key")
    return SCHEMA[sec][key]


def merge(base: dict, doc: dict) -> dict:
    out = copy.deepcopy(base)
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key, val in doc.items():
        if key in TOP_LEVEL:
            out[key] = _coerce(key, val, *TOP_LEVEL[key][1:])
            continue
        if key not in SCHEMA:
            raise ConfigError(key, "unknown section")
        if not isinstance(val, dict):
            raise ConfigError(key, "section must be a JSON object")
        for k, v in val.items():
            path = f"{key}.{k}"
            _, kind, nullable = _field(path)
            out[key][k] = _coerce(path, v, kind, nullable)
    return out


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value``; the value is parsed as JSON, else kept as a string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    path, _, raw = text.partition("=")
    path = path.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    out = copy.deepcopy(cfg)
    for text in overrides:
        path, value = parse_override(text)
        _, kind, nullable = _field(path)
        if kind == "str" and not isinstance(value, str) and value is not None:
            value = json.dumps(value)
        value = _coerce(path, value, kind, nullable)
        if path in TOP_LEVEL:
            out[path] = value
        else:
            sec, _, key = path.partition(".")
            out[sec][key] = value
    return out


def validate(cfg: dict) -> dict:
    for path, allowed in CHOICES.items():
        sec, _, key = path.partition(".")
        if cfg[sec][key] not in allowed:
            raise ConfigError(path, f"must be one of {list(allowed)}, got {cfg[sec][key]!r}")
    positive = [
        "network.in_channels", "network.levels", "network.base_channels", "optim.lr", "optim.patience",
        "train.batch_size", "phantom.radius", "phantom.s0", "phantom.n_directions", "phantom.bvalue",
        "io.workers", "metrics.gradcheck_seeds", "metrics.gradcheck_h", "train.diffusivity_scale",
    ]
    for path in positive:
        sec, _, key = path.partition(".")
        if cfg[sec][key] <= 0:
            raise ConfigError(path, f"must be positive, got {cfg[sec][key]}")
    for path in ("train.epochs", "phantom.n_train", "phantom.n_validate", "phantom.n_test"):
        sec, _, key = path.partition(".")
        if cfg[sec][key] < 0:
            raise ConfigError(path, "must be non-negative")
    if cfg["train"]["buffer"] < 2:
        raise ConfigError("train.buffer", "must hold at least 2 batches")
    if not 0 < cfg["optim"]["factor"] < 1:
        raise ConfigError("optim.factor", "must lie in (0, 1)")
    if not 1 <= cfg["loss"]["weight"] <= 1000:
        raise ConfigError("loss.weight", "must lie in [1, 1000]")
    if cfg["phantom"]["snr"] is not None and cfg["phantom"]["snr"] <= 0:
        raise ConfigError("phantom.snr", "must be positive (null for noise-free)")
    if min(cfg["phantom"]["dims"]) < 1:
        raise ConfigError("phantom.dims", "must be positive")
    if any(o < 0 for o in cfg["roi"]["offset"]):
        raise ConfigError("roi.offset", "must be non-negative")
    if cfg["roi"]["size"] is not None and min(cfg["roi"]["size"]) < 1:
        raise ConfigError("roi.size", "must be positive")
    from .pipeline import input_channels  # local: avoids an import cycle

    try:
        need = input_channels(cfg["io"]["input"])
    except ValueError as exc:
        raise ConfigError("io.input", str(exc)) from exc
    if need != cfg["network"]["in_channels"]:
        raise ConfigError("network.in_channels", f"input {cfg['io']['input']!r} has {need} channels")
    return cfg


def load_config(path: str | os.PathLike | None = None, overrides: Sequence[str] = ()) -> dict:
    cfg = defaults()
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path} is not valid JSON: {exc}") from exc
        cfg = merge(cfg, doc)
    return validate(apply_overrides(cfg, overrides))


def dump_config(cfg: dict, folder: str | os.PathLike) -> None:
    os.makedirs(folder, exist_ok=True)
    with open(os.path.join(folder, "config.json"), "w") as fh:
        fh.write(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
