"""Line-oriented ``section.key = value`` run configuration.

Sections map onto the library's config dataclasses::

    model.d_model = 64
    train.scheme = two_pass_c
    train.losses = mlm, moc, ism, msg
    finetune.steps = 200

Blank lines and ``#`` comments are ignored.  Unknown sections or keys are
errors, so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .ablation import AblationConfig
from .data import DataConfig
from .downstream import FinetuneConfig
from .nn import ModelConfig
from .train import TrainConfig

_NESTED = {"model", "data", "finetune"}  # AblationConfig fields served by other sections


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def sections(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        sections = self.sections()
        if section not in sections or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = sections[section]
        names = {f.name for f in dataclasses.fields(obj)} - (_NESTED if section == "ablation" else set())
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updated = dataclasses.replace(obj, **{name: _parse(raw, getattr(obj, name))})
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        setattr(self, section, updated)

    def finalize(self) -> "RunConfig":
        """Check model/data agreement and propagate shared sections into the ablation config."""
        for name in ("n_object_classes", "d_region_feat", "max_regions", "vocab_size", "max_seq_len"):
            m, d = getattr(self.model, name), getattr(self.data, name)
            if m != d:
                raise ConfigError(f"model.{name} = {m} disagrees with data.{name} = {d}")
        self.ablation = dataclasses.replace(
            self.ablation, model=self.model, data=self.data, finetune=self.finetune
        )
        return self

    def lines(self) -> list[str]:
        out = []
        for section, obj in self.sections().items():
            for f in dataclasses.fields(obj):
                if section == "ablation" and f.name in _NESTED:
                    continue
                out.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def _parse(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(s) for s in items)
        return tuple(items)
    return raw


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def parse_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value'")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    cfg = RunConfig()
    pairs = parse_lines(Path(path).read_text()) if path else []
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        pairs.append((key.strip(), value.strip()))
    for key, value in pairs:
        cfg.set(key, value)
    return cfg
