"""Flat ``key=value`` run configuration.

Every key maps onto one field of a section dataclass.  Booleans are
``true``/``false``, lists are comma separated, the latent variance schedule
is ``step:sigma`` pairs (``0:2,20000:1``) and ``none`` clears an optional.
Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional

from .data import DatasetSpec, make_mixture
from .latent import LatentSpec
from .network import DiscriminatorConfig, GeneratorConfig
from .training import TrainConfig


class ConfigKeyError(ValueError):
    """Invalid configuration; ``key`` names the first offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class TelemetryConfig:
    every: int = 1
    flush_every: int = 100
    monitor_k: int = 3
    collapse_window: int = 200
    collapse_factor: float = 3.0
    stop_on_collapse: bool = False
    checkpoint_every: int = 1000
    standing_passes: int = 100


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    latent: LatentSpec = field(default_factory=LatentSpec)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)
    out_dir: str = "runs/run"

    # -- serialization ----------------------------------------------------
    def to_mapping(self) -> Dict[str, str]:
        return {key: fmt(_get(self, sec, attr)) for key, (sec, attr, _, fmt) in sorted(KEYS.items())}

    def snapshot_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_mapping().items())

    def config_hash(self) -> str:
        return hashlib.sha256(self.snapshot_text().encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: Mapping[str, str]) -> "RunConfig":
        merged = self.to_mapping()
        for k, v in overrides.items():
            if k not in KEYS:
                raise ConfigKeyError(k, "unknown config key")
            merged[k] = v
        return from_mapping(merged)


def _get(cfg: RunConfig, sec: Optional[str], attr: str):
    return getattr(cfg, attr) if sec is None else getattr(getattr(cfg, sec), attr)


def _bool(s: str) -> bool:
    s = s.strip().lower()
    if s not in ("true", "false"):
        raise ValueError(f"expected true/false, got {s!r}")
    return s == "true"


def _opt(parse: Callable) -> Callable:
    return lambda s: None if s.strip().lower() == "none" else parse(s)


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _schedule(s: str) -> tuple:
    knots = []
    for part in s.split(","):
        step, sigma = part.split(":")
        knots.append((int(step), float(sigma)))
    return tuple(knots)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{a}:{b!r}" for a, b in v)
        return ",".join(str(x) for x in v)
    return str(v)


def _key_table() -> dict:
    table = {}
    parsers = {int: int, float: float, str: str, bool: _bool}

    def add(key, sec, attr, parse):
        table[key] = (sec, attr, parse, _fmt)

    for f in dataclasses.fields(TrainConfig):
        add(f.name, "train", f.name, parsers[type(f.default)])
    add("z_dim", "generator", "z_dim", int)
    add("g_chunk_size", "generator", "chunk_size", int)
    add("g_hidden_widths", "generator", "hidden_widths", _ints)
    add("g_embed_dim", "generator", "embed_dim", int)
    add("g_use_skip_z", "generator", "use_skip_z", _bool)
    add("g_use_shared_embedding", "generator", "use_shared_embedding", _bool)
    add("g_bn_momentum", "generator", "bn_momentum", float)
    add("g_bn_eps", "generator", "bn_eps", float)
    add("g_spectral_norm", "generator", "use_spectral_norm", _bool)
    add("d_hidden_widths", "discriminator", "hidden_widths", _ints)
    add("d_dropout_keep_prob", "discriminator", "dropout_keep_prob", float)
    add("d_spectral_norm", "discriminator", "use_spectral_norm", _bool)
    add("d_sn_iters", "discriminator", "sn_iters", int)
    add("latent_kind", "latent", "kind", str)
    add("latent_schedule", "latent", "schedule", _schedule)
    add("latent_sigma_l", "latent", "sigma_l", float)
    add("latent_sigma_h", "latent", "sigma_h", float)
    add("latent_truncation", "latent", "truncation", _opt(float))
    add("latent_truncation_mode", "latent", "truncation_mode", str)
    add("data_kind", "data", "kind", str)
    add("n_modes", "data", "n_modes", int)
    add("data_radius", "data", "radius", float)
    add("mode_std", "data", "mode_std", float)
    add("data_classes", "data", "classes", str)
    add("data_n_classes", "data", "n_classes", _opt(int))
    for f in dataclasses.fields(TelemetryConfig):
        add("telemetry_" + f.name if not f.name.startswith(("checkpoint", "standing", "collapse", "stop"))
            else f.name, "telemetry", f.name, parsers[type(f.default)])
    add("out_dir", None, "out_dir", str)
    return table


KEYS = _key_table()


def from_mapping(values: Mapping[str, str]) -> RunConfig:
    """Build a validated :class:`RunConfig`; missing keys keep their defaults."""
    sections: Dict[Optional[str], dict] = {}
    for key, raw in values.items():
        if key not in KEYS:
            raise ConfigKeyError(key, "unknown config key")
        sec, attr, parse, _ = KEYS[key]
        try:
            sections.setdefault(sec, {})[attr] = parse(str(raw))
        except (ValueError, TypeError) as exc:
            raise ConfigKeyError(key, f"cannot parse {raw!r}: {exc}") from None

    def build(cls, sec, extra=None):
        kwargs = dict(sections.get(sec, {}))
        kwargs.update(extra or {})
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigKeyError(_offender(cls, sec, values, extra), str(exc)) from None

    data = build(DatasetSpec, "data")
    try:
        mixture = make_mixture(data)
    except ValueError as exc:
        raise ConfigKeyError("n_modes", str(exc)) from None
    ncls = mixture.n_classes
    gen = build(GeneratorConfig, "generator", {"num_classes": ncls})
    disc = build(DiscriminatorConfig, "discriminator", {"num_classes": ncls})
    latent = build(LatentSpec, "latent", {"dim": gen.z_dim})
    train = build(TrainConfig, "train")
    tele = build(TelemetryConfig, "telemetry")
    if tele.monitor_k not in (1, 2, 3):
        raise ConfigKeyError("telemetry_monitor_k", "must be 1, 2 or 3")
    if tele.collapse_window < 10:
        raise ConfigKeyError("collapse_window", "must be >= 10")
    out = sections.get(None, {}).get("out_dir", RunConfig.out_dir)
    return RunConfig(train, gen, disc, latent, data, tele, out)


def _offender(cls, sec, values, extra) -> str:
    """First key of ``sec`` that fails validation on its own."""
    present = [k for k in values if KEYS[k][0] == sec]
    for k in present:
        _, attr, parse, _ = KEYS[k]
        try:
            cls(**{attr: parse(str(values[k])), **(extra or {})})
        except (ValueError, TypeError):
            return k
    return present[0] if present else str(sec)


def parse_text(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigKeyError(line, f"line {lineno} is not key=value")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def load(path) -> RunConfig:
    return from_mapping(parse_text(Path(path).read_text(encoding="utf-8")))


def loads(text: str) -> RunConfig:
    return from_mapping(parse_text(text))
