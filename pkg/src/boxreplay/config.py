"""Flat key-value run configuration with a typed registry.

Config files are plain text, one `key = value` per line, `#` comments. Every
key lives in a registry entry carrying its type, default, and a one-line
description; unknown keys and badly typed values are rejected by name.
Precedence: built-in defaults, then the config file, then `--set` overrides.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or unreadable config files."""


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass(frozen=True)
class KeySpec:
    name: str
    kind: str                 # int | float | bool | str
    default: object
    help: str
    choices: tuple = ()

    def parse(self, raw: str):
        raw = raw.strip()
        try:
            if self.kind == "int":
                value = int(raw)
            elif self.kind == "float":
                value = float(raw)
            elif self.kind == "bool":
                low = raw.lower()
                if low in _TRUE:
                    value = True
                elif low in _FALSE:
                    value = False
                else:
                    raise ValueError(raw)
            else:
                value = raw
        except ValueError:
            raise ConfigError(
                f"key '{self.name}' expects {self.kind}, got {raw!r}") from None
        if self.choices and value not in self.choices:
            raise ConfigError(f"key '{self.name}' must be one of "
                              f"{list(self.choices)}, got {value!r}")
        return value


_KEYS = (
    KeySpec("data.train_manifest", "str", "", "training manifest path"),
    KeySpec("data.test_manifest", "str", "", "held-out manifest path"),
    KeySpec("protocol.plan", "str", "4-4",
            "task plan: 'A-B' counts or a plan file path"),
    KeySpec("train.iterations", "int", 300, "optimizer steps per task"),
    KeySpec("train.lr_initial", "float", 5e-3, "learning rate for task 1"),
    KeySpec("train.lr_subsequent", "float", 2e-3,
            "learning rate for tasks 2..T"),
    KeySpec("train.momentum", "float", 0.9, "SGD momentum"),
    KeySpec("train.weight_decay", "float", 1e-4, "SGD weight decay"),
    KeySpec("train.batch_size", "int", 4, "composed samples per step"),
    KeySpec("train.seed", "int", 0, "root seed fanned out to all streams"),
    KeySpec("model.feature_channels", "int", 64, "backbone output width"),
    KeySpec("model.anchor_size", "float", 16.0, "anchor side in pixels"),
    KeySpec("model.roi_size", "int", 7, "pooled feature grid side"),
    KeySpec("model.proposals_per_image", "int", 64,
            "proposals kept after suppression"),
    KeySpec("buffer.capacity", "int", 120, "max stored boxes across classes"),
    KeySpec("buffer.selection", "str", "prototype",
            "exemplar picking rule", ("prototype", "herding", "random")),
    KeySpec("replay.ratio", "str", "1:1:2",
            "mixup:mosaic:new frequency weights"),
    KeySpec("replay.overlap_threshold", "float", 0.2,
            "max IoU a blended crop may have with current labels"),
    KeySpec("replay.max_boxes", "int", 2, "blended crops per mixup sample"),
    KeySpec("replay.mixup_a", "float", 1.0, "Beta shape a for blend weights"),
    KeySpec("replay.mixup_b", "float", 1.0, "Beta shape b for blend weights"),
    KeySpec("replay.mosaic_mu_min", "float", 0.4, "min tile scale fraction"),
    KeySpec("replay.mosaic_mu_max", "float", 0.6, "max tile scale fraction"),
    KeySpec("replay.mosaic_fill", "float", 0.5, "mosaic canvas gray level"),
    KeySpec("loss.alpha", "float", 1.0, "weight of the distillation"
                                        " classification term"),
    KeySpec("loss.beta", "float", 1.0, "weight of the pooled-feature"
                                       " distillation term"),
    KeySpec("loss.gamma", "float", 1.0, "attention-gap share inside the"
                                        " feature distillation term"),
    KeySpec("loss.attention_power", "float", 2.0,
            "exponent of the channel-pooled saliency map"),
    KeySpec("loss.classification", "str", "inclusive",
            "background handling for the classification loss",
            ("inclusive", "standard")),
    KeySpec("eval.iou_thresholds", "str", "0.5",
            "comma-separated IoU grid values"),
    KeySpec("eval.eleven_point", "bool", False,
            "use the 11-point AP interpolation"),
    KeySpec("eval.score_threshold", "float", 0.05,
            "min confidence kept at inference"),
)

REGISTRY = {spec.name: spec for spec in _KEYS}


def default_config() -> dict:
    return {name: spec.default for name, spec in REGISTRY.items()}


def parse_value(key: str, raw: str):
    spec = REGISTRY.get(key)
    if spec is None:
        raise ConfigError(f"unknown config key '{key}'")
    return spec.parse(raw)


def load_config_file(path) -> dict:
    """Parse one flat config file into a {key: typed value} dict."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                              f"got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        try:
            out[key] = parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return out


def apply_overrides(config: dict, pairs) -> dict:
    """Layer `key=value` strings (the --set grammar) over a config dict."""
    out = dict(config)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key=value")
        key, raw = pair.split("=", 1)
        out[key.strip()] = parse_value(key.strip(), raw)
    return out


def resolve_config(config_file=None, overrides=()) -> dict:
    config = default_config()
    if config_file is not None:
        config.update(load_config_file(config_file))
    return apply_overrides(config, overrides)


def save_snapshot(config: dict, path) -> None:
    """Write the fully resolved config as a loadable flat file."""
    lines = [f"{key} = {_format(config[key])}" for key in sorted(config)]
    Path(path).write_text("\n".join(lines) + "\n")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def find_profile(name: str):
    """Resolve a config reference: a real path wins, else a shipped profile."""
    path = Path(name)
    if path.exists():
        return path
    base = name if name.endswith(".cfg") else name + ".cfg"
    candidate = resources.files("boxreplay").joinpath("profiles", base)
    if candidate.is_file():
        return candidate
    raise ConfigError(f"config '{name}' is neither a file nor a shipped profile")


def list_profiles() -> list[str]:
    root = resources.files("boxreplay").joinpath("profiles")
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".cfg"))


def parse_ratio(raw: str) -> tuple:
    parts = raw.replace(":", ",").split(",")
    try:
        weights = tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"replay.ratio must be three numbers, got {raw!r}") \
            from None
    if len(weights) != 3:
        raise ConfigError(f"replay.ratio must be three numbers, got {raw!r}")
    return weights


def parse_thresholds(raw: str) -> tuple:
    try:
        return tuple(float(p) for p in raw.split(","))
    except ValueError:
        raise ConfigError(
            f"eval.iou_thresholds must be comma-separated numbers, got {raw!r}"
        ) from None
