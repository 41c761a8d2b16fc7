"""Experiment configuration: ``key = value`` text files plus ``FEDSCOPE_*`` overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional

from ._errors import FedscopeError
from .strategies import STRATEGY_KINDS

ENV_PREFIX = "FEDSCOPE_"


@dataclass
class ExperimentConfig:
    """All knobs of a ``run-all`` experiment."""

    seeds: tuple = (0, 1, 2, 3, 4)
    strategies: tuple = STRATEGY_KINDS
    n_real: int = 300
    n_synthetic: int = 300
    n_val: int = 100
    n_test: int = 100
    n_unseen: int = 100
    n_background: int = 16
    epochs: int = 50
    transfer_epochs: int = 40
    finetune_epochs: int = 50
    rounds: int = 10
    local_epochs: int = 15
    fedensemble_clients: int = 3
    patience: int = 20
    lr: float = 0.001
    lrf: float = 1.0
    momentum: float = 0.937
    weight_decay: float = 0.0005
    batch_size: int = 8
    conf_threshold: float = 0.001
    nms_iou: float = 0.45
    background_conf: float = 0.25
    size_scale: float = 0.3
    output_dir: str = "runs/default"
    jobs: int = 1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.strategies = tuple(self.strategies)
        if not self.seeds:
            raise FedscopeError("bad-config", "at least one seed is required")
        if not self.strategies:
            raise FedscopeError("bad-config", "at least one strategy is required")
        unknown = [s for s in self.strategies if s not in STRATEGY_KINDS]
        if unknown:
            raise FedscopeError("unknown-strategy", ", ".join(unknown))
        if len(set(self.strategies)) != len(self.strategies):
            raise FedscopeError("bad-config", "duplicate strategy")

    @classmethod
    def from_text(cls, text: str, env: Optional[Mapping[str, str]] = None) -> "ExperimentConfig":
        raw = parse_key_values(text)
        env = os.environ if env is None else env
        known = {f.name for f in fields(cls)}
        for key, value in env.items():
            if key.startswith(ENV_PREFIX):
                name = key[len(ENV_PREFIX) :].lower()
                if name in known:
                    raw[name] = value
        return cls.from_mapping(raw)

    @classmethod
    def from_file(cls, path, env: Optional[Mapping[str, str]] = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), env)

    @classmethod
    def from_mapping(cls, raw: Mapping[str, str]) -> "ExperimentConfig":
        kwargs = {}
        types = {f.name: f for f in fields(cls)}
        for key, value in raw.items():
            if key not in types:
                raise FedscopeError("unknown-config-key", key)
            default = types[key].default
            try:
                if isinstance(default, tuple):
                    items = [v.strip() for v in str(value).split(",") if v.strip()]
                    if key == "strategies" and items == ["all"]:
                        items = list(STRATEGY_KINDS)
                    kwargs[key] = tuple(int(v) for v in items) if key == "seeds" else tuple(items)
                elif isinstance(default, bool):
                    kwargs[key] = str(value).lower() in ("1", "true", "yes", "on")
                elif isinstance(default, int):
                    kwargs[key] = int(value)
                elif isinstance(default, float):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = str(value)
            except ValueError as exc:
                raise FedscopeError("bad-config-value", f"{key} = {value!r}") from exc
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FedscopeError("bad-config-line", f"line {lineno}: {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out
