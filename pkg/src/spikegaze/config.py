"""Flat ``section.key = value`` run configuration.

Every knob of the model, training, augmentation, scene and energy settings
lives in one namespace. Files hold one assignment per line; ``#`` starts a
comment. Unknown keys are rejected with the list of valid ones.
"""

from dataclasses import dataclass, fields, replace

from .augment import AugmentConfig
from .costmodel import EnergyModel
from .model import ModelConfig
from .synthgen import SceneConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    label_scale: int = 8        # sensor px per grid px for label files
    val_sessions: int = 1       # held-out sessions when no validation dir is given


@dataclass
class CostConfig:
    f_hz: float = 1000.0
    activity_ms: int = 1000     # streamed steps used to measure activity
    activity_seed: int = 0


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "scene": SceneConfig,
    "energy": EnergyModel,
    "cost": CostConfig,
    "data": DataConfig,
}


class ConfigError(ValueError):
    pass


def _coerce(text, default, key):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {type(default).__name__}") from None
    return text


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


class RunConfig:
    def __init__(self):
        self.sections = {name: cls() for name, cls in SECTIONS.items()}

    def __getattr__(self, name):
        try:
            return self.__dict__["sections"][name]
        except KeyError:
            raise AttributeError(name) from None

    @staticmethod
    def valid_keys():
        return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in fields(cls)]

    def set(self, key, value):
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(self.valid_keys())}")
        obj = self.sections[section]
        default = getattr(obj, name)
        val = _coerce(value, default, key) if isinstance(value, str) else value
        try:
            self.sections[section] = replace(obj, **{name: val})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None

    def update_text(self, text, source="<config>"):
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, value = line.partition("=")
            self.set(key.strip(), value.strip())

    def load(self, path):
        with open(path, encoding="utf-8") as fh:
            self.update_text(fh.read(), path)

    def to_text(self):
        lines = ["# resolved configuration"]
        for section, obj in self.sections.items():
            for f in fields(obj):
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
