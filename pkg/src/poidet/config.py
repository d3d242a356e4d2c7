"""Run configuration: documented schema, strict validation, canonical hash.

A config file is JSON mirroring DEFAULT_CONFIG below. Omitted keys take
defaults; unknown keys are rejected before any work happens. The
canonical hash covers the fully resolved config and is embedded in every
report so runs are traceable.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .decoder import DecoderConfig
from .geometry import BevGrid
from .poi import PoiMode
from .scenes import SceneConfig


class ConfigError(Exception):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "workers": 1,
    "scene": {
        "n_boxes": 5,
        "class_sizes": [
            {"w": [1.8, 2.2], "l": [4.2, 5.0], "h": [1.5, 1.9]},
            {"w": [2.0, 2.6], "l": [5.5, 7.0], "h": [2.2, 2.8]},
            {"w": [0.6, 1.0], "l": [0.6, 1.0], "h": [1.6, 1.9]},
        ],
        "grid": {"x_min": -24.0, "y_min": -24.0, "x_max": 24.0, "y_max": 24.0,
                 "voxel_x": 0.125, "voxel_y": 0.125, "downsample": 8},
        "n_cameras": 2,
        "image_size": [160, 120],
        "focal": 70.0,
        "camera_height": 1.6,
        "non_overlap": True,
        "min_center_dist": 4.0,
    },
    "model": {
        "queries": 32,
        "channels": 256,
        "groups": 4,
        "heads": 8,
        "ffn_hidden": 512,
        "iterations": 6,
        "poi_mode": "box_transform_and_shift",
        "fusion": "dynamic",
        "scale_logits": "per_query",
        "view_selection": "random",
        "box_update": "compound",
        "supervision": "deep",
        "per_group_box_transform": False,
    },
    "optim": {
        "lr": 2e-4,
        "weight_decay": 0.01,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "epochs": 6,
        "batch": 1,
        "schedule": "constant",
    },
    "eval": {
        "thresholds": [0.5, 1.0, 2.0, 4.0],
        "top_k": 300,
    },
    "data": {
        "train_scenes": 200,
        "eval_scenes": 50,
    },
    "encoder": {
        "lift_seed": 7,
    },
}


def _check_number(path: str, value, lo=None, hi=None, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if integer and not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(f"{path}: {value} below minimum {lo}")
    if hi is not None and value > hi:
        raise ConfigError(f"{path}: {value} above maximum {hi}")


def _check_choice(path: str, value, options):
    if value not in options:
        raise ConfigError(f"{path}: {value!r} not one of {sorted(options)}")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def validate_config(cfg: dict) -> None:
    s = cfg["scene"]
    _check_number("scene.n_boxes", s["n_boxes"], lo=0, integer=True)
    if not isinstance(s["class_sizes"], list) or not s["class_sizes"]:
        raise ConfigError("scene.class_sizes: need at least one class")
    for i, cs in enumerate(s["class_sizes"]):
        if set(cs) != {"w", "l", "h"}:
            raise ConfigError(f"scene.class_sizes[{i}]: keys must be w, l, h")
        for dim in ("w", "l", "h"):
            rng = cs[dim]
            if (not isinstance(rng, list) or len(rng) != 2
                    or not 0 < rng[0] <= rng[1]):
                raise ConfigError(
                    f"scene.class_sizes[{i}].{dim}: need [lo, hi] with 0 < lo <= hi")
    g = s["grid"]
    for key in ("x_min", "y_min", "x_max", "y_max", "voxel_x", "voxel_y"):
        _check_number(f"scene.grid.{key}", g[key])
    _check_number("scene.grid.downsample", g["downsample"], lo=1, integer=True)
    _check_number("scene.n_cameras", s["n_cameras"], lo=0, integer=True)
    if (not isinstance(s["image_size"], list) or len(s["image_size"]) != 2
            or any(not isinstance(v, int) or v < 8 for v in s["image_size"])):
        raise ConfigError("scene.image_size: need [width, height] >= 8")
    _check_number("scene.focal", s["focal"], lo=1e-6)
    _check_number("scene.camera_height", s["camera_height"])
    _check_number("scene.min_center_dist", s["min_center_dist"], lo=0.0)

    m = cfg["model"]
    _check_number("model.queries", m["queries"], lo=1, integer=True)
    for key in ("channels", "groups", "heads", "ffn_hidden", "iterations"):
        _check_number(f"model.{key}", m[key], lo=1, integer=True)
    if m["channels"] % m["groups"]:
        raise ConfigError("model.channels must divide evenly into model.groups")
    if m["channels"] % m["heads"]:
        raise ConfigError("model.channels must divide evenly into model.heads")
    _check_choice("model.poi_mode", m["poi_mode"],
                  {mode.value for mode in PoiMode})
    _check_choice("model.fusion", m["fusion"], {"dynamic", "static"})
    _check_choice("model.scale_logits", m["scale_logits"],
                  {"per_query", "per_poi"})
    _check_choice("model.view_selection", m["view_selection"],
                  {"random", "deterministic"})
    _check_choice("model.box_update", m["box_update"], {"compound", "reset"})
    _check_choice("model.supervision", m["supervision"], {"deep", "final"})
    if not isinstance(m["per_group_box_transform"], bool):
        raise ConfigError("model.per_group_box_transform: expected a boolean")

    o = cfg["optim"]
    _check_number("optim.lr", o["lr"], lo=1e-12)
    _check_number("optim.weight_decay", o["weight_decay"], lo=0.0)
    _check_number("optim.beta1", o["beta1"], lo=0.0, hi=1.0)
    _check_number("optim.beta2", o["beta2"], lo=0.0, hi=1.0)
    _check_number("optim.eps", o["eps"], lo=0.0)
    _check_number("optim.epochs", o["epochs"], lo=0, integer=True)
    _check_number("optim.batch", o["batch"], lo=1, integer=True)
    _check_choice("optim.schedule", o["schedule"], {"constant", "one_cycle"})

    e = cfg["eval"]
    if (not isinstance(e["thresholds"], list) or not e["thresholds"]
            or any(t <= 0 for t in e["thresholds"])):
        raise ConfigError("eval.thresholds: need a list of positive distances")
    _check_number("eval.top_k", e["top_k"], lo=1, integer=True)

    d = cfg["data"]
    _check_number("data.train_scenes", d["train_scenes"], lo=0, integer=True)
    _check_number("data.eval_scenes", d["eval_scenes"], lo=0, integer=True)

    _check_number("encoder.lift_seed", cfg["encoder"]["lift_seed"], integer=True)
    _check_number("workers", cfg["workers"], lo=1, integer=True)
    _check_number("seed", cfg["seed"], lo=0, integer=True)

    # constructors run their own invariants (integral grid extents etc.)
    try:
        scene_config(cfg)
        decoder_config(cfg)
    except ConfigError:
        raise
    except Exception as err:
        raise ConfigError(str(err)) from err


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Resolve (defaults <- file <- overrides) and validate."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}")
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def scene_config(cfg: dict) -> SceneConfig:
    s = cfg["scene"]
    g = s["grid"]
    grid = BevGrid(g["x_min"], g["y_min"], g["x_max"], g["y_max"],
                   g["voxel_x"], g["voxel_y"], g["downsample"])
    class_sizes = tuple({"w": tuple(c["w"]), "l": tuple(c["l"]),
                         "h": tuple(c["h"])} for c in s["class_sizes"])
    return SceneConfig(n_boxes=s["n_boxes"], class_sizes=class_sizes, grid=grid,
                       n_cameras=s["n_cameras"],
                       image_size=tuple(s["image_size"]), focal=s["focal"],
                       camera_height=s["camera_height"],
                       non_overlap=s["non_overlap"],
                       min_center_dist=s["min_center_dist"])


def decoder_config(cfg: dict) -> DecoderConfig:
    m = cfg["model"]
    return DecoderConfig(
        channels=m["channels"], groups=m["groups"], heads=m["heads"],
        ffn_hidden=m["ffn_hidden"], iterations=m["iterations"],
        num_classes=len(cfg["scene"]["class_sizes"]),
        poi_mode=PoiMode(m["poi_mode"]), fusion=m["fusion"],
        scale_logits=m["scale_logits"], view_selection=m["view_selection"],
        box_update=m["box_update"], supervision=m["supervision"],
        per_group_box_transform=m["per_group_box_transform"])


def source_revision() -> str:
    """Deterministic hash over the package sources (a code revision stamp)."""
    pkg_dir = Path(__file__).resolve().parent
    digest = hashlib.sha256()
    for path in sorted(pkg_dir.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:12]
