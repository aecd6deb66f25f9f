"""``key = value`` experiment config files.

One entry per line, ``#`` starts a comment. The same file may carry network,
dataset-generation and training keys; each consumer picks the keys it knows.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    cfg = parse_config(text)
    cfg.setdefault("_dir", str(path.parent))
    return cfg


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


@dataclass
class TrainConfig:
    train_data: str = ""
    test_data: str = ""
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    l2: float = 0.0
    optimizer: str = "adam"
    patience: int = 10
    min_delta: float = 1e-3
    decay_factor: float = 10.0
    seed: int = 0
    dtype: str = "float32"
    augment: bool = False
    max_train: int = 0
    max_test: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 8:
            raise ConfigError("batch_size must be >= 8 so batch statistics stay stable")
        if self.lr < 0 or self.l2 < 0:
            raise ConfigError("lr and l2 must be nonnegative")
        if self.optimizer not in ("sgd", "rmsprop", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.decay_factor != 10.0:
            raise ConfigError("the plateau decay factor is fixed at 10")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.augment:
            raise ConfigError("data augmentation is not supported")

    @classmethod
    def from_mapping(cls, cfg: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        base = Path(cfg.get("_dir", "."))
        for f in fields(cls):
            if f.name not in cfg:
                continue
            raw = cfg[f.name]
            try:
                if f.type in ("int", int):
                    kwargs[f.name] = int(raw)
                elif f.type in ("float", float):
                    kwargs[f.name] = float(raw)
                elif f.type in ("bool", bool):
                    kwargs[f.name] = _bool(raw)
                else:
                    kwargs[f.name] = raw
            except ValueError as exc:
                raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc
        for key in ("train_data", "test_data"):
            if kwargs.get(key) and not Path(kwargs[key]).is_absolute():
                kwargs[key] = str(base / kwargs[key])
        tc = cls(**kwargs)
        tc.validate()
        return tc
