"""Experiment configuration: a sectioned ``key = value`` text format.

Parsing goes through :mod:`configparser`; serialisation writes every known key
in a fixed canonical order, and the config hash is the sha256 of that text.
Unknown sections or keys are errors, missing keys take their defaults.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from importlib import resources

from .data import CORRUPTION_MODES, DATASET_NAMES, GeneratorParams
from .errors import ConfigError
from .flow import TrainingConfig


@dataclass
class RunSection:
    label: str = "run"
    out_dir: str = "out"


@dataclass
class DatasetSection:
    name: str = "two_circles"
    n: int = 10000
    corruption_rate: float = 0.4
    corruption_mode: str = "swap"
    seed: int = 1
    corruption_seed: int = 1
    r_inner: float = 1.0
    r_outer: float = 2.0
    r_min: float = 0.5
    r_max: float = 2.5
    turns: float = 2.0
    jitter: float = 0.03

    @property
    def generator_params(self) -> GeneratorParams:
        return GeneratorParams(self.r_inner, self.r_outer, self.r_min, self.r_max, self.turns, self.jitter)


@dataclass
class SamplerSection:
    omegas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    n_steps: int = 100
    seed: int = 0
    n_eval: int = 2000
    eval_seed: int = 1000


@dataclass
class AnalysisSection:
    tprimes: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    threshold: float = 0.0
    n_samples: int = 2000
    subset_seed: int = 2000
    noise_seed: int = 0
    noise_draws: int = 1
    bins: int = 40


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def validate(self) -> None:
        if not self.run.label.strip():
            raise ConfigError("must be non-empty", "run.label")
        d = self.dataset
        if d.name not in DATASET_NAMES:
            raise ConfigError(f"must be one of {DATASET_NAMES}", "dataset.name")
        if d.n < 1:
            raise ConfigError("must be >= 1", "dataset.n")
        if not 0.0 <= d.corruption_rate <= 1.0:
            raise ConfigError("must lie in [0, 1]", "dataset.corruption_rate")
        if d.corruption_mode not in CORRUPTION_MODES:
            raise ConfigError(f"must be one of {CORRUPTION_MODES}", "dataset.corruption_mode")
        if d.jitter < 0:
            raise ConfigError("must be >= 0", "dataset.jitter")
        if min(d.r_inner, d.r_outer, d.r_min, d.r_max) < 0:
            raise ConfigError("radii must be >= 0", "dataset")
        for s, name in ((d.seed, "dataset.seed"), (d.corruption_seed, "dataset.corruption_seed"),
                        (self.sampler.seed, "sampler.seed"), (self.sampler.eval_seed, "sampler.eval_seed"),
                        (self.analysis.noise_seed, "analysis.noise_seed"),
                        (self.analysis.subset_seed, "analysis.subset_seed")):
            if s < 0:
                raise ConfigError("must be >= 0", name)
        try:
            self.training.validate()
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"training.{exc.field}") from None
        s = self.sampler
        if not s.omegas or any(o < 0 for o in s.omegas):
            raise ConfigError("need at least one guidance scale, all >= 0", "sampler.omegas")
        if s.n_steps < 1:
            raise ConfigError("must be >= 1", "sampler.n_steps")
        if s.n_eval < 1:
            raise ConfigError("must be >= 1", "sampler.n_eval")
        a = self.analysis
        if not a.tprimes or any(not 0.0 < t < 1.0 for t in a.tprimes):
            raise ConfigError("values must lie strictly inside (0, 1)", "analysis.tprimes")
        if a.n_samples < 2:
            raise ConfigError("must be >= 2", "analysis.n_samples")
        if a.noise_draws < 1:
            raise ConfigError("must be >= 1", "analysis.noise_draws")
        if a.bins < 1:
            raise ConfigError("must be >= 1", "analysis.bins")

    def canonical(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(training={"seed": 3})`` returns a validated copy."""
        new = replace(self, **{k: replace(getattr(self, k), **v) for k, v in sections.items()})
        new.validate()
        return new


SECTIONS = ("run", "dataset", "training", "sampler", "analysis")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}", where) from None


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError("unknown section", section)
        obj = getattr(cfg, section)
        known = {f.name: getattr(obj, f.name) for f in fields(obj)}
        updates = {}
        for key, raw in cp.items(section):
            where = f"{section}.{key}"
            if key not in known:
                raise ConfigError("unknown key", where)
            updates[key] = _convert(raw, known[key], where)
        try:
            setattr(cfg, section, replace(obj, **updates))
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"{section}.{exc.field}") from None
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from None


def builtin_config(name: str) -> ExperimentConfig:
    """Pinned configurations shipped with the package (``fig2``, ``fig3``)."""
    try:
        text = resources.files("spfm.configs").joinpath(f"{name}.ini").read_text()
    except FileNotFoundError:
        raise ConfigError(f"no built-in config named {name!r}") from None
    return parse_config(text)
