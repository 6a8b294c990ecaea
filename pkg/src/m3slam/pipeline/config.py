"""Pipeline configuration: nested dataclasses, INI files and ``--section.key=value`` overrides."""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field

from ..errors import ConfigError
from ..window import WindowConfig


@dataclass
class ProviderConfig:
    kind: str = "oracle"  # oracle | dump
    preset: str = "loop"
    frames: int = 200
    noise: str = "default"  # clean | default
    orthogonal_dynamic: bool = False
    dump_dir: str = ""
    align_intrinsics: bool = True
    float32_outputs: bool = True  # oracle frames rounded to float32, like dumped network outputs


@dataclass
class MatchingConfig:
    r: int = 4
    r_loop: int = 16
    s_min: float = 0.5


@dataclass
class TrackingConfig:
    huber_delta: float = 2.0
    max_iters: int = 50
    tol: float = 1e-10
    depth_weight: float = 10.0
    suppress_dynamic: bool = True
    motion_margin: int = 1  # px; tracking weights use the motion map's local minimum over this radius
    fuse: bool = True


@dataclass
class BackendConfig:
    ratio_min: float = 0.3
    loop_gap: int = 50
    loop_closure: bool = True
    retrieval_edges: bool = True
    max_iters: int = 20  # final optimization
    loop_iters: int = 5  # optimizations triggered by new loop edges (warm-started)


@dataclass
class GsmapConfig:
    enabled: bool = True
    tau_a: float = 0.2
    m_min: float = 0.5
    K: int = 20
    sigma: float = 1.0
    s_prime_max: float = 1.0
    coverage_alpha: float = 0.8
    n_levels: int = 3
    final_iters: int = 300
    holdout_every: int = 8
    exclusion_margin: int = 2  # px around detected dynamic pixels that never spawn or train


SECTIONS = {
    "provider": ProviderConfig,
    "window": WindowConfig,
    "matching": MatchingConfig,
    "tracking": TrackingConfig,
    "backend": BackendConfig,
    "gsmap": GsmapConfig,
}
TOP_LEVEL = {"seed": int, "output_dir": str}
ALIASES = {
    "out": "output_dir",
    "run.seed": "seed",
    "run.output_dir": "output_dir",
    "run.out": "output_dir",
    "window.loop_gap": "backend.loop_gap",
}


@dataclass
class PipelineConfig:
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    gsmap: GsmapConfig = field(default_factory=GsmapConfig)
    seed: int = 0
    output_dir: str = "m3_out"

    def validate(self):
        p = self.provider
        if p.kind not in ("oracle", "dump"):
            raise ConfigError(f"provider.kind must be oracle or dump, got {p.kind!r}")
        if p.kind == "dump" and not p.dump_dir:
            raise ConfigError("provider.dump_dir is required for dump providers")
        if p.kind == "oracle" and p.frames < 1:
            raise ConfigError("provider.frames must be positive")
        positive = {
            "matching.s_min": self.matching.s_min,
            "tracking.huber_delta": self.tracking.huber_delta,
            "tracking.max_iters": self.tracking.max_iters,
            "tracking.tol": self.tracking.tol,
            "backend.ratio_min": self.backend.ratio_min,
            "backend.loop_gap": self.backend.loop_gap,
            "gsmap.tau_a": self.gsmap.tau_a,
            "gsmap.m_min": self.gsmap.m_min,
            "gsmap.sigma": self.gsmap.sigma,
            "gsmap.s_prime_max": self.gsmap.s_prime_max,
            "gsmap.n_levels": self.gsmap.n_levels,
            "gsmap.holdout_every": self.gsmap.holdout_every,
        }
        for name, v in positive.items():
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        for name, v in {"matching.r": self.matching.r, "matching.r_loop": self.matching.r_loop,
                        "tracking.depth_weight": self.tracking.depth_weight, "gsmap.K": self.gsmap.K,
                        "gsmap.final_iters": self.gsmap.final_iters, "backend.max_iters": self.backend.max_iters,
                        "backend.loop_iters": self.backend.loop_iters,
                        "tracking.motion_margin": self.tracking.motion_margin,
                        "gsmap.exclusion_margin": self.gsmap.exclusion_margin}.items():
            if v < 0:
                raise ConfigError(f"{name} must be non-negative, got {v}")
        return self

    def as_flat(self):
        """``section.key -> value`` for every field (used for logging the run)."""
        out = {"seed": self.seed, "output_dir": self.output_dir}
        for sec in SECTIONS:
            for f in dataclasses.fields(getattr(self, sec)):
                out[f"{sec}.{f.name}"] = getattr(getattr(self, sec), f.name)
        return out


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(text, hint):
    """Convert a string to the annotated type (handles ``X | None``)."""
    args = typing.get_args(hint)
    if args:
        if text.strip().lower() in ("none", ""):
            if type(None) in args:
                return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        return _parse_bool(text)
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return str(text)


def _set(values: dict, key: str, text: str):
    key = ALIASES.get(key, key)
    if key in TOP_LEVEL:
        values[key] = text
        return
    if "." not in key:
        raise ConfigError(f"unknown config key {key!r}")
    sec, name = key.split(".", 1)
    if sec not in SECTIONS:
        raise ConfigError(f"unknown config section {sec!r}")
    hints = typing.get_type_hints(SECTIONS[sec])
    if name not in hints:
        raise ConfigError(f"unknown key {name!r} in section [{sec}]")
    values.setdefault(sec, {})[name] = text


def read_ini(path) -> dict:
    """Raw ``{section: {key: text}}`` plus top-level keys from an INI file."""
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys such as window.L and gsmap.K are case-sensitive
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    values: dict = {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            _set(values, k if sec == "run" else f"{sec}.{k}", v)
    return values


def parse_overrides(items) -> dict:
    """``["section.key=value", ...]`` (leading dashes allowed) to raw values."""
    values: dict = {}
    for item in items:
        s = item.lstrip("-")
        if "=" not in s:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        k, v = s.split("=", 1)
        _set(values, k.strip(), v.strip())
    return values


def build_config(*layers) -> PipelineConfig:
    """Merge raw value layers (later wins) over the defaults and validate."""
    merged: dict = {}
    for layer in layers:
        for k, v in layer.items():
            if isinstance(v, dict):
                merged.setdefault(k, {}).update(v)
            else:
                merged[k] = v
    kw = {}
    try:
        for sec, cls in SECTIONS.items():
            hints = typing.get_type_hints(cls)
            raw = merged.get(sec, {})
            kw[sec] = cls(**{k: _coerce(v, hints[k]) for k, v in raw.items()})
        # the loop gap lives in [backend]; the window copy follows it
        kw["window"] = dataclasses.replace(kw["window"], loop_gap=kw["backend"].loop_gap)
        for k, typ in TOP_LEVEL.items():
            if k in merged:
                kw[k] = typ(merged[k])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return PipelineConfig(**kw).validate()


def load_config(path=None, overrides=()) -> PipelineConfig:
    layers = [read_ini(path)] if path else []
    layers.append(parse_overrides(overrides))
    return build_config(*layers)


def write_ini(cfg: PipelineConfig, path):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["run"] = {"seed": str(cfg.seed), "output_dir": cfg.output_dir}
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        skip = {"loop_gap"} if sec == "window" else set()
        cp[sec] = {f.name: str(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name not in skip}
    with open(path, "w") as fh:
        cp.write(fh)
