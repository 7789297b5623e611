"""``key = value`` configuration files.

Keys are ``<section>.<field>``, e.g. ``tdf.voxel_size = 0.005`` or
``ransac.iterations = 20000``; ``#`` starts a comment.  Each section maps
onto one config dataclass and values are coerced to the type of the
field's default.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .evaluation import EvalConfig
from .net import TrainConfig
from .registration import RansacConfig
from .sampling import MIN_BASELINE, MIN_SEPARATION, OCCLUSION_TOL
from .tdf import TdfConfig


@dataclass(frozen=True)
class SamplingConfig:
    occ_tol: float = OCCLUSION_TOL
    min_baseline: float = MIN_BASELINE
    min_separation: float = MIN_SEPARATION


@dataclass(frozen=True)
class RegisterConfig:
    n_keypoints: int = 1000


@dataclass(frozen=True)
class BenchConfig:
    n_scenes: int = 10
    n_matches: int = 300
    n_non_matches: int = 300
    noise: float = 0.002


@dataclass(frozen=True)
class Config:
    tdf: TdfConfig = TdfConfig()
    train: TrainConfig = TrainConfig()
    ransac: RansacConfig = RansacConfig()
    eval: EvalConfig = EvalConfig()
    sampling: SamplingConfig = SamplingConfig()
    register: RegisterConfig = RegisterConfig()
    bench: BenchConfig = BenchConfig()
    # keys explicitly set in the file, as "section.field"
    explicit: frozenset = field(default=frozenset(), compare=False)


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>", base: Config = Config()) -> Config:
    sections = {f.name: {} for f in fields(Config) if f.name != "explicit"}
    explicit = set()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{n}"
        if "=" not in line:
            raise ValueError(f"{where}: expected 'section.key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in sections:
            raise ValueError(f"{where}: unknown section {section!r}")
        current = getattr(base, section)
        valid = {f.name for f in fields(current)}
        if name not in valid:
            raise ValueError(f"{where}: unknown key {key!r}")
        sections[section][name] = _coerce(raw, getattr(current, name), where)
        explicit.add(key)
    try:
        built = {s: replace(getattr(base, s), **kv) for s, kv in sections.items()}
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from None
    return Config(**built, explicit=frozenset(explicit))


def load_config(path) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text(), str(path))
