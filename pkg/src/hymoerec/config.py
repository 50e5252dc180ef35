"""Run configuration: a flat ``key = value`` text format with typed parsing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    dataset: str = ""
    # model
    d_model: int = 64
    max_len: int = 200
    n_layers: int = 2
    n_heads: int = 2
    n_experts: int = 4
    top_k: int = 2
    d_ff: int = 0
    router_hidden: int = 0
    warmup_steps: int = 500
    lb_weight: float = 0.02
    dropout: float = 0.2
    uniform_pffn: bool = False
    fusion: str = "adaptive"
    all_positions: bool = False
    model_seed: int = 0
    # optimisation
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0
    patience: int = 10
    eval_every: int = 1
    max_steps: int = 0
    exclude_train: bool = False
    # output
    output_dir: str = ""

    def model_config(self, n_items: int) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        kwargs = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kwargs["n_items"] = n_items
        return ModelConfig(**kwargs)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def validate(self) -> None:
        try:
            self.model_config(n_items=1)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1, epochs >= 0")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive (got {self.lr})")

    def dumps(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_assignments(pairs: list[str], origin: str = "flag") -> dict:
    out = {}
    for n, pair in enumerate(pairs, start=1):
        line = pair.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin} line {n}: expected key = value, got {pair.strip()!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{origin} line {n}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """File values first, then ``overrides``; the merged result is validated."""
    values: dict = {}
    if path:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        values.update(parse_assignments(text.splitlines(), origin=str(path)))
        # dataset paths in a config file are relative to that file
        if values.get("dataset") and not Path(values["dataset"]).is_absolute():
            values["dataset"] = str((path.parent / values["dataset"]).resolve())
    values.update(overrides or {})
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
