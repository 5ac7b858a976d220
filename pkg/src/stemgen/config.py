"""Run configuration shared by all CLI subcommands, stored as TOML."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np
import tomli
import tomli_w

from .model import ModelConfig, TrainConfig
from .sampler import SamplerConfig
from .toyworld import ConfigError, GenConfig

# fixed ids for the named random sub-streams derived from the global seed
STREAMS = {"synth": 1, "codec": 2, "pairs": 3, "train": 4, "sample": 5, "eval": 6}


def stream_seed(seed: int, name: str, *extra: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(STREAMS[name], *extra))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class SynthConfig:
    n_train_songs: int = 2000
    n_test_songs: int = 200
    pairs_per_song: int = 4
    crop_frames: int = 32
    max_retries: int = 8
    gen: GenConfig = field(default_factory=GenConfig)


@dataclass
class CodecConfig:
    Q: int = 4
    K: int = 64
    n_iter: int = 25
    corpus_songs: int = 500
    max_frames: int = 20000


@dataclass
class EvalConfig:
    n_examples: int = 400
    batch_size: int = 256


@dataclass
class AblateConfig:
    lambdas: list[float] = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0])
    w_s: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.5])
    n_examples: int = 200
    n_seeds: int = 1


@dataclass
class RunConfig:
    seed: int | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)")
        self.synth.gen.validate()
        self.model.validate()
        self.sampler.validate(self.model.Q, self.model.T)
        s, c, m = self.synth, self.codec, self.model
        if s.crop_frames > s.gen.n_frames:
            raise ConfigError("crop_frames exceeds the song length in frames")
        if (m.Q, m.K, m.T, m.C) != (c.Q, c.K, s.crop_frames, s.gen.n_categories):
            raise ConfigError(
                f"model (Q={m.Q}, K={m.K}, T={m.T}, C={m.C}) disagrees with codec/synth "
                f"(Q={c.Q}, K={c.K}, T={s.crop_frames}, C={s.gen.n_categories})")
        if max(self.ablate.lambdas + [0.0]) > 4.0:
            raise ConfigError("ablation guidance scales are capped at 4.0")
        if s.n_train_songs < 1 or s.n_test_songs < 1 or s.pairs_per_song < 1:
            raise ConfigError("song and pair counts must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["seed"] is None:
            del d["seed"]
        return d

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(tomli.loads(text))
        except tomli.TOMLDecodeError as err:
            raise ConfigError(f"invalid TOML: {err}") from err

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_toml(fh.read())


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {where or '<root>'} must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where or '<root>'}: {sorted(unknown)}")
    kw = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kw[name] = _build(type(current), value, f"{where}.{name}".lstrip("."))
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except TypeError as err:
        raise ConfigError(str(err)) from err
