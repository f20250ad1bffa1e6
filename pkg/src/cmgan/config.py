"""Run configuration: one JSON document drives every subcommand."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SynthSpec
from .errors import ConfigError
from .model import ModelDims
from .training import TrainConfig


@dataclass(frozen=True)
class ModelWidths:
    enc_hidden: int = 1024
    common_dim: int = 1024
    dec_hidden: int = 1024
    inter_hidden: int = 512

    def dims(self, d_img: int, d_txt: int, n_classes: int) -> ModelDims:
        return ModelDims(d_img, d_txt, n_classes, **asdict(self))


# Narrow widths used for the desk-scale synthetic benchmark; the defaults
# above are the full-size architecture.
BENCHMARK_WIDTHS = ModelWidths(enc_hidden=128, common_dim=128, dec_hidden=128, inter_hidden=64)


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple[float, ...] = (0.8, 0.1, 0.1)
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    exclude_self: bool = True


@dataclass
class RunConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelWidths = field(default_factory=ModelWidths)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("synth", "split", "model", "train", "eval")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        for name in cls.SECTIONS:
            if name in d:
                cfg = cfg.with_section(name, d[name])
        return cfg

    def with_section(self, name: str, values: dict) -> RunConfig:
        current = getattr(self, name)
        if not isinstance(values, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        known = {f.name for f in fields(current)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
        if name == "split" and "fractions" in values:
            values = {**values, "fractions": tuple(values["fractions"])}
        try:
            return replace(self, **{name: replace(current, **values)})
        except TypeError as exc:
            raise ConfigError(f"bad values in section {name!r}: {exc}") from exc

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in self.SECTIONS}
        out["split"]["fractions"] = list(out["split"]["fractions"])
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path):
        Path(path).write_text(self.dumps())


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)
