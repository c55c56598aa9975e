"""``key = value`` run configuration files."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .blocks import ConfigError, parse_block


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.replace(" ", "").split(",") if p]


def _block(text: str) -> str:
    parse_block(text)
    return text.strip()


# key -> (parser, default); None default means no default
SCHEMA = {
    "task": (_choice("synthetic", "csv", "idx"), None),
    "seed": (int, None),
    "lr": (float, None),
    "epochs": (int, None),
    "batch_size": (int, 32),
    "momentum": (float, 0.0),
    "hidden": (_int_list, [32]),
    "conv": (_int_list, None),
    "input_shape": (_int_list, None),
    "classes": (int, 3),
    "features": (int, 16),
    "samples": (int, 600),
    "noise": (float, 1.0),
    "data_seed": (int, None),
    "data": (str, None),
    "labels": (str, None),
    "lambda": (float, None),
    "epsilon_scale": (float, 1e-3),
    "epsilon": (float, None),
    "directions": (_choice("row", "column", "both"), "both"),
    "mode": (_choice("reweighted", "static_lasso"), "reweighted"),
    "block": (_block, None),
    "T": (int, None),
    "epochs_per_iteration": (int, 10),
    "tau": (float, None),
    "threshold_mode": (_choice("relative", "absolute"), "relative"),
    "retrain_epochs": (int, None),
    "baseline": (_choice("none", "static_lasso", "magnitude"), "none"),
    "schedule": (_choice("simultaneous", "sequential"), "simultaneous"),
    "floor": (_bool, True),
    "target_rate": (float, 8.0),
    "workers": (int, None),
    "similarity": (int, 0),
    "bench_shapes": (str, "1024x1024x256"),
    "bench_cols": (int, 256),
    "repeats": (int, 3),
}

REQUIRED = {
    "train": ("task", "seed", "lr", "epochs"),
    "prune": ("task", "seed", "lr", "lambda", "block", "T", "tau", "retrain_epochs"),
    "infer": ("task",),
    "reorder": (),
    "bench": (),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: str = "<config>"
    text: str = ""

    def __getitem__(self, key):
        if key in self.values:
            return self.values[key]
        if key not in SCHEMA:
            raise KeyError(key)
        return SCHEMA[key][1]

    def get(self, key, default=None):
        v = self[key]
        return default if v is None else v

    def require(self, command: str) -> None:
        for key in REQUIRED.get(command, ()):
            if key not in self.values:
                raise ConfigError(f"{self.source}: missing required key '{key}' for {command}")

    def directions(self) -> tuple[str, ...]:
        d = self["directions"]
        return ("row", "column") if d == "both" else (d,)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        try:
            values[key] = SCHEMA[key][0](value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {exc}") from None
    return RunConfig(values, source, text)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
