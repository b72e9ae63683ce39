"""Plain-text ``key = value`` configuration with ``[section]`` headers.

Sections are ``[network]``, ``[train]``, ``[preprocess]`` and ``[synthgen]``.
``#`` starts a comment. Tuples are comma-separated. Unknown sections or keys
are rejected with their line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .network import DEFAULT_THRESHOLDS, FULL_WIDTHS, widths_for
from .preprocess import PreprocessConfig
from .synthgen import SceneConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    base_size: int = 320
    levels: int = 3
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    width_multiplier: float = 1.0

    @property
    def widths(self) -> tuple[int, ...]:
        return FULL_WIDTHS if self.width_multiplier == 1.0 else widths_for(self.width_multiplier)


# keys a config file may set, per section
_PREPROCESS_KEYS = ("wiener_window", "low_percentile", "high_percentile", "mask_threshold")
_SYNTHGEN_KEYS = tuple(f.name for f in dataclasses.fields(SceneConfig) if f.name not in ("seed", "tag"))


@dataclass
class Config:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    synthgen: dict = field(default_factory=dict)   # explicit SceneConfig overrides

    def __post_init__(self):
        self.preprocess.size = self.network.base_size

    def scene(self, tag: str, seed: int) -> SceneConfig:
        return SceneConfig.preset(tag, seed=seed, **self.synthgen)

    def to_text(self) -> str:
        """Canonical rendering; parsing it back yields an equal config."""
        lines = ["[network]"]
        lines += [f"{k} = {_fmt(v)}" for k, v in dataclasses.asdict(self.network).items()]
        lines.append("[train]")
        lines += [f"{k} = {_fmt(v)}" for k, v in dataclasses.asdict(self.train).items()]
        lines.append("[preprocess]")
        lines += [f"{k} = {_fmt(getattr(self.preprocess, k))}" for k in _PREPROCESS_KEYS]
        lines.append("[synthgen]")
        lines += [f"{k} = {_fmt(self.synthgen[k])}" for k in _SYNTHGEN_KEYS if k in self.synthgen]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _convert(raw: str, default, lineno: int, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None


def parse_config(text: str) -> Config:
    defaults = {
        "network": dataclasses.asdict(NetworkConfig()),
        "train": dataclasses.asdict(TrainConfig()),
        "preprocess": {k: getattr(PreprocessConfig(), k) for k in _PREPROCESS_KEYS},
        "synthgen": {k: getattr(SceneConfig(), k) for k in _SYNTHGEN_KEYS},
    }
    values: dict[str, dict] = {s: {} for s in defaults}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in defaults:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any section")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in defaults[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        values[section][key] = _convert(raw, defaults[section][key], lineno, key)

    try:
        net = NetworkConfig(**values["network"])
        if len(net.thresholds) != net.levels:
            raise ValueError(f"{net.levels} levels need {net.levels} thresholds, got {net.thresholds}")
        cfg = Config(net, TrainConfig(**values["train"]),
                     PreprocessConfig(**values["preprocess"]), dict(values["synthgen"]))
        cfg.scene("healthy", 0)  # validate synthgen overrides
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())
