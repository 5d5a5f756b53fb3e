"""Flat key=value run configuration.

One namespace covers data generation, model, training and inference knobs.
Unknown keys are errors so typos cannot silently fall back to defaults;
every key has a documented default surfaced in the CLI help.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

from .losses import LossConfig
from .pipeline import PipelineConfig
from .synthdata import SceneSpec, preset_plain, preset_similar_objects


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s: str):
    return tuple(int(p) for p in s.split(","))


def _parse_policy(s: str) -> Optional[int]:
    low = s.strip().lower()
    table = {"": None, "none": None, "skip": 0, "reuse": 1, "compute": 2}
    if low not in table:
        raise ConfigError(f"force_policy must be skip/reuse/compute/none, got {s!r}")
    return table[low]


POLICY_NAMES = {None: "", 0: "skip", 1: "reuse", 2: "compute"}


@dataclass
class Key:
    default: object
    parse: Callable[[str], object]
    help: str


SCHEMA: Dict[str, Key] = {
    # shared
    "seed": Key(0, int, "RNG seed for data generation and training"),
    # synthetic data
    "resolution": Key(64, int, "square frame size, multiple of 16"),
    "frames": Key(24, int, "frames per generated sequence"),
    "sequences": Key(8, int, "number of generated sequences"),
    "preset": Key("plain", str, "scene preset: plain | similar-objects"),
    "noise_sigma": Key(0.02, float, "per-pixel gaussian noise sigma"),
    # model
    "stage_channels": Key((8, 16, 32), _parse_int_tuple, "encoder stage widths"),
    "key_channels": Key(8, int, "matching key channels"),
    "value_channels": Key(32, int, "matching value channels"),
    "variant": Key("triple", str, "gate family: triple | static | residual | dense"),
    "strategy": Key("mixed", str, "processing strategy: fully | semi-mixed | mixed"),
    "sparsify_memory_encoder": Key(False, _parse_bool,
                                   "run the memory encoder sparse (fully/semi-mixed only)"),
    "memory_interval": Key(5, int, "memorize every N-th frame during inference"),
    "tau": Key(1.0, float, "gate sampling temperature"),
    # training
    "iterations": Key(2000, int, "training iterations"),
    "lr_peak": Key(2e-3, float, "peak learning rate"),
    "lr_floor": Key(1e-6, float, "initial/final learning rate"),
    "warmup_frac": Key(0.05, float, "fraction of training spent warming up"),
    "cosine_start_frac": Key(0.2, float, "fraction of training before cosine decay"),
    "weight_decay": Key(0.05, float, "decoupled weight decay on kernels"),
    "dtype": Key("float64", str, "training dtype: float64 | float32"),
    "clip_max_gap": Key(5, int, "max frame gap when sampling training clips"),
    "checkpoint_every": Key(200, int, "iterations between good-weights snapshots"),
    "gamma": Key(1.0, float, "weight of the sparsity objective"),
    "beta": Key(1.0, float, "weight of the global term inside it"),
    "sparse_target": Key(0.1, float, "target compute fraction"),
    "bootstrap_start_frac": Key(0.2, float, "when the CE bootstrap starts shrinking"),
    "bootstrap_end_frac": Key(0.7, float, "when the CE bootstrap stops shrinking"),
    "bootstrap_final": Key(0.15, float, "final kept-pixel fraction of the CE"),
    "relax_frac": Key(0.75, float, "fraction of training over which bounds relax"),
    # inference
    "force_policy": Key(None, _parse_policy, "force every gate: skip | reuse | compute"),
    "corrupt_memory_at": Key(0, int, "1-based frame whose memorized mask is corrupted"),
}


def defaults() -> dict:
    return {k: v.default for k, v in SCHEMA.items()}


def parse_config_file(path) -> dict:
    cfg = defaults()
    if path is None:
        return cfg
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            cfg[key] = SCHEMA[key].parse(value.strip())
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return cfg


def config_help() -> str:
    lines = ["configuration keys (key=value lines, '#' comments):"]
    for name, key in SCHEMA.items():
        default = key.default
        if isinstance(default, tuple):
            default = ",".join(str(d) for d in default)
        if name == "force_policy":
            default = POLICY_NAMES[key.default]
        lines.append(f"  {name:<24} default={default!s:<12} {key.help}")
    return "\n".join(lines)


def build_pipeline_config(cfg: dict) -> PipelineConfig:
    try:
        return PipelineConfig(
            stage_channels=tuple(cfg["stage_channels"]),
            key_channels=cfg["key_channels"],
            value_channels=cfg["value_channels"],
            variant=cfg["variant"],
            strategy=cfg["strategy"],
            sparsify_memory_encoder=cfg["sparsify_memory_encoder"],
            memory_interval=cfg["memory_interval"],
            tau=cfg["tau"],
            seed=cfg["seed"],
            iterations=cfg["iterations"],
            lr_peak=cfg["lr_peak"],
            lr_floor=cfg["lr_floor"],
            warmup_frac=cfg["warmup_frac"],
            cosine_start_frac=cfg["cosine_start_frac"],
            weight_decay=cfg["weight_decay"],
            dtype=cfg["dtype"],
            clip_max_gap=cfg["clip_max_gap"],
            force_policy=cfg["force_policy"],
            corrupt_memory_at=cfg["corrupt_memory_at"],
            checkpoint_every=cfg["checkpoint_every"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_loss_config(cfg: dict) -> LossConfig:
    try:
        return LossConfig(
            gamma=cfg["gamma"],
            beta=cfg["beta"],
            sparse_target=cfg["sparse_target"],
            bootstrap_start_frac=cfg["bootstrap_start_frac"],
            bootstrap_end_frac=cfg["bootstrap_end_frac"],
            bootstrap_final=cfg["bootstrap_final"],
            relax_frac=cfg["relax_frac"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_scene_specs(cfg: dict) -> List[SceneSpec]:
    preset = cfg["preset"]
    res, frames, count = cfg["resolution"], cfg["frames"], cfg["sequences"]
    if preset == "plain":
        scenes = [preset_plain(res, frames, variation=i) for i in range(count)]
    elif preset in ("similar-objects", "similar_objects"):
        scenes = [preset_similar_objects(res, frames) for _ in range(count)]
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    for s in scenes:
        s.noise_sigma = cfg["noise_sigma"]
    return scenes
