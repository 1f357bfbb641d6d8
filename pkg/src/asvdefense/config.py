"""Flat ``section.key = value`` experiment configuration with a stable hash.

Example::

    # corpus
    corpus.session_sigma = 0.6
    attack.epsilon = 0.3
    defense.k_list = 0,1,2,3
    defense.filters = gaussian:3:1.0, median:3, mean:3
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .filters import FilterSpec


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n_speakers: int = 20
    train_speakers: int = 100
    train_per_speaker: int = 10
    eval_per_speaker: int = 10
    frames: int = 96
    channels: int = 24
    noise_sigma: float = 0.5
    session_sigma: float = 0.6
    n_target: int = 500
    n_nontarget: int = 500


@dataclass
class ASVSection:
    hidden: int = 64
    emb_dim: int = 32
    epochs: int = 20
    lr: float = 3e-3
    batch: int = 32
    margin: float = 0.2
    scale: float = 30.0


@dataclass
class ReconSection:
    time_width: int = 7
    channel_width: int = 5
    magnitude_prob: float = 0.0
    time_start_prob: float = 0.15 / 7
    channel_block_prob: float = 0.2
    steps: int = 3000
    batch: int = 32
    lr: float = 2e-3
    warmup_frac: float = 0.07
    d_model: int = 32
    heads: int = 4
    layers: int = 3
    ff_dim: int = 64


@dataclass
class AttackSection:
    epsilon: float = 0.3
    n_iters: int = 5
    alpha: float = 0.0  # 0 means epsilon / n_iters


@dataclass
class DefenseSection:
    k_list: list = field(default_factory=lambda: list(range(8)))
    aware_k_list: list = field(default_factory=lambda: [0, 1, 2, 3])
    filters: list = field(default_factory=lambda: [
        FilterSpec("gaussian", 3, 1.0), FilterSpec("median", 3), FilterSpec("mean", 3)])
    purify_enroll: bool = False


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    asv: ASVSection = field(default_factory=ASVSection)
    recon: ReconSection = field(default_factory=ReconSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    seed: int = 0
    workers: int = 1

    _SECTIONS = ("corpus", "asv", "recon", "attack", "defense")

    def validate(self) -> "ExperimentConfig":
        if not self.defense.k_list:
            raise ConfigError("defense.k_list must not be empty")
        if any(k < 0 for k in self.defense.k_list + self.defense.aware_k_list):
            raise ConfigError("cascade depths must be >= 0")
        if self.recon.d_model % self.recon.heads:
            raise ConfigError("recon.d_model must be divisible by recon.heads")
        if self.corpus.n_speakers < 2:
            raise ConfigError("corpus.n_speakers must be >= 2")
        if self.corpus.frames < max(16, self.recon.time_width):
            raise ConfigError("corpus.frames too small")
        if self.corpus.channels < self.recon.channel_width:
            raise ConfigError("corpus.channels smaller than recon.channel_width")
        return self

    # ------------------------------------------------------------ text form

    def items(self) -> dict[str, str]:
        out = {"seed": str(self.seed)}
        for sec in self._SECTIONS:
            for f in dataclasses.fields(getattr(self, sec)):
                out[f"{sec}.{f.name}"] = _format(getattr(getattr(self, sec), f.name))
        return out

    def canonical(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.items().items()))

    def digest(self) -> str:
        """Hash of every setting that shapes an artifact.

        ``defense.*`` only selects what ``evaluate`` reports and ``workers``
        never changes results, so neither enters the hash.
        """
        keep = {k: v for k, v in self.items().items() if not k.startswith("defense.")}
        text = "".join(f"{k} = {v}\n" for k, v in sorted(keep.items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.canonical(), encoding="utf-8")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        if v and isinstance(v[0], FilterSpec):
            return ", ".join(f"{s.kind}:{s.window}:{s.sigma!r}" for s in v)
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_filters(text: str) -> list[FilterSpec]:
    specs = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        bits = part.split(":")
        kind = bits[0]
        window = int(bits[1]) if len(bits) > 1 else 3
        sigma = float(bits[2]) if len(bits) > 2 else 1.0
        specs.append(FilterSpec(kind, window, sigma))
    return specs


def _convert(current, text: str, key: str):
    try:
        if isinstance(current, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, list):
            if key.endswith("filters"):
                return _parse_filters(text)
            return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
    return text


def apply(cfg: ExperimentConfig, key: str, value: str) -> None:
    if key in ("seed", "workers"):
        setattr(cfg, key, _convert(getattr(cfg, key), value, key))
        return
    sec, _, name = key.partition(".")
    if sec not in ExperimentConfig._SECTIONS or not name:
        raise ConfigError(f"unknown config key {key!r}")
    obj = getattr(cfg, sec)
    if name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, name, _convert(getattr(obj, name), value, key))


def parse(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        apply(cfg, key, value)
    return cfg.validate()


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text(encoding="utf-8"))
