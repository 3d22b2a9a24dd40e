"""Run configuration: one flat dataclass covering model shape, preprocessing
and optimization, loadable from simple ``key = value`` files.

Files accept bare or quoted values, ``#`` comments, and dotted aliases such
as ``fusion.blocks`` or ``train.lr`` alongside the bare field names.  CLI
flags override file values, which override the defaults below.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

CHANNEL_NAMES = ("dep", "con", "sem", "kge")


class ConfigError(ValueError):
    """Bad key, bad value, or an inconsistent combination."""


@dataclass
class TrainConfig:
    # model shape
    dim: int = 32
    heads: int = 4
    kge_dim: int = 8
    dep_layers: int = 3
    con_layers: int = 3
    sem_layers: int = 3
    blocks: int = 6
    factor_dim: int = 0  # 0 means "same as dim"
    channels: tuple = CHANNEL_NAMES
    # preprocessing stage
    anchor_c: float = 1.0
    margin: float = 0.2
    # optimization
    lr: float = 2e-5
    batch_size: int = 16
    dropout: float = 0.3
    beta: float = 0.12
    epochs: int = 20
    seed: int = 0
    embed_seed: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        for name in self.channels:
            if name not in CHANNEL_NAMES:
                raise ConfigError(f"unknown channel {name!r}")
        if not self.channels:
            raise ConfigError("channels must be a nonempty subset of dep|con|sem|kge")
        if len(set(self.channels)) != len(self.channels):
            raise ConfigError("channels contains duplicates")
        positive = (
            "dim", "heads", "kge_dim", "dep_layers", "con_layers", "sem_layers",
            "blocks", "batch_size", "epochs", "lr", "anchor_c", "margin",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not (0 <= self.dropout < 1):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if self.factor_dim < 0:
            raise ConfigError("factor_dim must be >= 0")

    @property
    def effective_factor_dim(self) -> int:
        return self.factor_dim if self.factor_dim > 0 else self.dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


_FIELD_NAMES = {f.name for f in fields(TrainConfig)}

# dotted aliases; any "train."/"model."/"fusion." prefix on a known field also works
_ALIASES = {
    "fusion.blocks": "blocks",
    "fusion.factor_dim": "factor_dim",
    "fusion.channels": "channels",
}


def _canonical_key(key: str) -> str:
    if key in _ALIASES:
        return _ALIASES[key]
    if "." in key:
        prefix, rest = key.split(".", 1)
        if prefix in ("train", "model", "fusion", "preprocess") and rest in _FIELD_NAMES:
            return rest
    return key


def _parse_value(field_name: str, raw):
    if isinstance(raw, str):
        raw = raw.strip().strip('"').strip("'")
    if field_name == "channels":
        if isinstance(raw, (list, tuple)):
            return tuple(str(x) for x in raw)
        return tuple(part.strip() for part in str(raw).split(",") if part.strip())
    kind = TrainConfig.__dataclass_fields__[field_name].type
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into canonical field values."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = _canonical_key(key)
        if key not in _FIELD_NAMES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except (TypeError, ValueError):
            raise ConfigError(f"config line {lineno}: bad value for {key!r}: {raw!r}")
    return values


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then file values, then explicit overrides."""
    values = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        key = _canonical_key(key)
        if key not in _FIELD_NAMES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(d: dict) -> TrainConfig:
    values = {}
    for key, raw in d.items():
        key = _canonical_key(key)
        if key not in _FIELD_NAMES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return TrainConfig(**values)
