"""Experiment configuration: presets, schema validation, and object builders."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path

import jsonschema

from .convnet import PAPER_TRAIN, LayerSpec, TrainConfig, desk_architecture, paper_architecture
from .mid import DEFAULT_MAX_HOP, ChannelParams
from .mtt_sim import SimParams


class ConfigError(ValueError):
    pass


def _props(cls, types: dict | None = None) -> dict:
    kinds = {int: "integer", float: "number", str: "string", bool: "boolean",
             "int": "integer", "float": "number", "str": "string", "bool": "boolean"}
    out = {}
    for f in fields(cls):
        t = (types or {}).get(f.name) or kinds.get(f.type, "number")
        out[f.name] = {"type": t}
    return out


def _section(properties: dict, required=()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required),
            "additionalProperties": False}


_LAYER = _section({
    "kind": {"enum": ["encoder", "hidden", "decoder"]},
    "in_features": {"type": "integer", "minimum": 1},
    "out_features": {"type": "integer", "minimum": 1},
    "kernel_width": {"type": "integer", "minimum": 1},
    "resample": {"type": "integer", "minimum": 1},
    "nonlinearity": {"enum": ["leaky_relu", "relu", "tanh", "identity"]},
    "slope": {"type": "number", "minimum": 0, "maximum": 1},
    "padding": {"enum": ["zero_same", "none"]},
    "upsample": {"enum": ["transposed", "nearest"]},
    "bias": {"type": "boolean"},
}, required=("kind", "in_features", "out_features", "kernel_width"))

_T_LIST = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1}
_COUNT = {"type": "integer", "minimum": 1}

SCHEMA = _section({
    "sim": _section(_props(SimParams)),
    "dataset": _section({
        "n_sims": _COUNT, "n_steps": _COUNT, "stack_depth": _COUNT, "pair_stride": _COUNT,
    }),
    "arch": _section({
        "preset": {"enum": ["desk", "paper", "custom"]},
        "padding": {"enum": ["zero_same", "none"]},
        "upsample": {"enum": ["transposed", "nearest"]},
        "bias": {"type": "boolean"},
        "layers": {"type": "array", "items": _LAYER},
    }),
    "train": _section(_props(TrainConfig)),
    "eval": _section({
        "T_list": _T_LIST, "n_samples": _COUNT, "n_steps": _COUNT,
        "n_pgm": {"type": "integer", "minimum": 0},
        "ospa_cutoff": {"type": "number", "exclusiveMinimum": 0},
        "extraction": {"enum": ["kmeans", "gmm_em"]},
        "ospa_form": {"enum": ["paper", "standard"]},
    }),
    "bound": _section({
        "large_T": {"type": "number", "exclusiveMinimum": 0},
        "n_window": {"type": "integer", "minimum": 2}, "n_large": {"type": "integer", "minimum": 30},
        "n_steps": _COUNT, "margin": {"type": ["integer", "null"], "minimum": 0},
    }),
    "mid": _section({
        "T_list": _T_LIST, "n_samples": _COUNT,
        "max_hop": {"type": "number", "exclusiveMinimum": 0},
        "placer": {"enum": ["heuristic", "network"]},
        "model": {"type": ["string", "null"]},
        "channel": _section(_props(ChannelParams)),
    }),
    "seeds": _section({k: {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}
                       for k in ("simulate", "train", "eval", "bound", "mid")}),
})


def _desk() -> dict:
    return {
        "sim": asdict(SimParams.table1(1000.0)),
        "dataset": {"n_sims": 500, "n_steps": 50, "stack_depth": 20, "pair_stride": 10},
        "arch": {"preset": "desk", "padding": "zero_same", "upsample": "transposed", "bias": False},
        "train": asdict(TrainConfig()),
        "eval": {"T_list": [1000.0, 2000.0], "n_samples": 100, "n_steps": 30, "n_pgm": 2,
                 "ospa_cutoff": 500.0, "extraction": "kmeans", "ospa_form": "paper"},
        "bound": {"large_T": 2000.0, "n_window": 100, "n_large": 100, "n_steps": 30,
                  "margin": None},
        "mid": {"T_list": [320.0, 640.0, 960.0], "n_samples": 50, "max_hop": DEFAULT_MAX_HOP,
                "placer": "heuristic", "model": None, "channel": asdict(ChannelParams())},
        "seeds": {"simulate": 0, "train": 0, "eval": 1, "bound": 2, "mid": 0},
    }


def _paper() -> dict:
    cfg = _desk()
    cfg["dataset"].update(n_sims=10000, n_steps=100, pair_stride=1)
    cfg["arch"].update(preset="paper", bias=True)
    cfg["train"].update(PAPER_TRAIN)
    cfg["eval"].update(T_list=[1000.0, 2000.0, 3000.0, 4000.0, 5000.0])
    cfg["mid"].update(T_list=[320.0, 640.0, 960.0, 1280.0, 1600.0], n_samples=100)
    return cfg


PRESETS = {"desk": _desk, "paper": _paper}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "layers":
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None
    return cfg


def load_config(path=None, preset: str = "desk", seed: int | None = None) -> dict:
    """Preset defaults, overlaid with the JSON file at ``path``, then ``seed``."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        validate(merge({k: {} for k in SCHEMA["properties"]}, user))
        cfg = merge(cfg, user)
    if seed is not None:
        cfg["seeds"] = {k: int(seed) for k in cfg["seeds"]}
    return validate(cfg)


def sim_params(cfg: dict) -> SimParams:
    try:
        return SimParams(**cfg["sim"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"sim: {e}") from None


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    t = dict(cfg["train"])
    if seed is not None:
        t["seed"] = seed
    try:
        return TrainConfig(**t)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from None


def architecture(cfg: dict) -> list[LayerSpec]:
    a = cfg["arch"]
    depth = cfg["dataset"]["stack_depth"]
    try:
        if a.get("preset", "desk") == "custom":
            layers = [LayerSpec(**spec) for spec in a.get("layers", [])]
            if not layers:
                raise ValueError("custom architecture needs layers")
        elif a.get("preset", "desk") == "paper":
            layers = paper_architecture(depth)
            layers = [LayerSpec(**{**s.to_dict(), "padding": a.get("padding", s.padding),
                                   "bias": a.get("bias", s.bias),
                                   "upsample": a.get("upsample", s.upsample)}) for s in layers]
        else:
            layers = desk_architecture(depth, padding=a.get("padding", "zero_same"),
                                       bias=a.get("bias", True),
                                       upsample=a.get("upsample", "transposed"))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"arch: {e}") from None
    if layers[0].in_features != depth:
        raise ConfigError(f"arch: first layer takes {layers[0].in_features} features, "
                          f"stack depth is {depth}")
    return layers


def channel(cfg: dict) -> ChannelParams:
    try:
        return ChannelParams(**cfg["mid"]["channel"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"mid.channel: {e}") from None
