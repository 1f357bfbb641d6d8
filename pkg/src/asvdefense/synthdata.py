"""Seeded synthetic speakers, utterances and trial lists.

An utterance of speaker ``s`` is a T x C matrix

    x[t, c] = template_s[c] + modulation_s[c] * sin(2*pi*t / rate_s + phase) + noise

Every random draw comes from a generator seeded by ``(master seed, role, index)``
so a corpus is a pure function of its parameters, whatever order it is built in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import DatasetFile, decode_dataset, encode_dataset

DEFAULT_CHANNELS = 24
DEFAULT_FRAMES = 96


@dataclass(frozen=True)
class SpeakerSpec:
    id: int
    template: np.ndarray
    modulation: np.ndarray
    rate: float


@dataclass
class Utterance:
    speaker_id: int
    features: np.ndarray
    seed: int

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.speaker_id == other.speaker_id
            and self.seed == other.seed
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


@dataclass
class TrialSet:
    """Parallel arrays of enrollment index, test index and target flag."""

    enroll: np.ndarray
    test: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.target)

    def labels(self) -> list[str]:
        return ["target" if t else "nontarget" for t in self.target]


@dataclass
class Corpus:
    speakers: list[SpeakerSpec]
    train: list[Utterance]
    eval: list[Utterance]
    mean: float = 0.0
    std: float = 1.0


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, dtype=np.uint32)[0])


def make_speakers(n_speakers: int, seed: int, channels: int = DEFAULT_CHANNELS) -> list[SpeakerSpec]:
    if n_speakers < 2:
        raise ValueError(f"need at least 2 speakers for nontarget trials, got {n_speakers}")
    rng = _rng(seed, 0)
    templates = rng.normal(0.0, 1.0, size=(n_speakers, channels))
    modulation = np.abs(rng.normal(0.0, 1.0, size=(n_speakers, channels))) * 0.3
    rates = rng.uniform(8.0, 32.0, size=n_speakers)
    return [SpeakerSpec(i, templates[i], modulation[i], float(rates[i])) for i in range(n_speakers)]


def synth_utterance(spk: SpeakerSpec, T: int, noise_sigma: float, seed: int,
                    session_sigma: float = 0.0) -> Utterance:
    """One utterance; ``session_sigma`` adds a per-utterance channel offset held over all frames."""
    if T < 16:
        raise ValueError(f"utterances need at least 16 frames, got {T}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    noise = rng.normal(0.0, 1.0, size=(T, spk.template.shape[0])) * noise_sigma
    t = np.arange(T, dtype=np.float64)[:, None]
    feats = spk.template[None, :] + spk.modulation[None, :] * np.sin(2.0 * np.pi * t / spk.rate + phase) + noise
    if session_sigma > 0:
        feats = feats + rng.normal(0.0, session_sigma, size=(1, feats.shape[1]))
    return Utterance(spk.id, feats, seed)


def make_utterances(speakers: list[SpeakerSpec], per_speaker: int, T: int, noise_sigma: float,
                    seed: int, split: int = 0, session_sigma: float = 0.0) -> list[Utterance]:
    """``per_speaker`` utterances for each speaker, ordered speaker-major."""
    return [
        synth_utterance(spk, T, noise_sigma, _derive_seed(seed, 1, split, spk.id, j), session_sigma)
        for spk in speakers
        for j in range(per_speaker)
    ]


def standardize(utts: list[Utterance], mean: float, std: float) -> list[Utterance]:
    return [Utterance(u.speaker_id, (u.features - mean) / std, u.seed) for u in utts]


def make_corpus(n_speakers: int = 20, train_per_speaker: int = 20, eval_per_speaker: int = 10,
                T: int = DEFAULT_FRAMES, channels: int = DEFAULT_CHANNELS, noise_sigma: float = 0.5,
                seed: int = 0, train_speakers: int = 0, session_sigma: float = 0.0) -> Corpus:
    """Train and eval utterances, standardized with train statistics.

    With ``train_speakers == 0`` both splits come from the same ``n_speakers``
    (closed set).  Otherwise training uses ``train_speakers`` further speakers
    and the ``n_speakers`` evaluation speakers are never seen in training; eval
    speaker ids are always ``0 .. n_speakers - 1``.
    """
    if train_speakers < 0:
        raise ValueError("train_speakers must be >= 0")
    bank = make_speakers(n_speakers + train_speakers, seed, channels)
    eval_spk = bank[:n_speakers]
    train_spk = bank[n_speakers:] if train_speakers else eval_spk
    train = make_utterances(train_spk, train_per_speaker, T, noise_sigma, seed, 0, session_sigma)
    if train_speakers:
        # training labels must be 0..n_train-1 for the classification head
        train = [Utterance(u.speaker_id - n_speakers, u.features, u.seed) for u in train]
    ev = make_utterances(eval_spk, eval_per_speaker, T, noise_sigma, seed, 1, session_sigma)
    stacked = np.stack([u.features for u in train])
    mu, sd = float(stacked.mean()), float(stacked.std())
    return Corpus(bank, standardize(train, mu, sd), standardize(ev, mu, sd), mu, sd)


def make_trials(utterances: list[Utterance], n_target: int, n_nontarget: int, seed: int) -> TrialSet:
    spk = np.array([u.speaker_id for u in utterances])
    i, j = np.triu_indices(len(utterances), k=1)
    same = spk[i] == spk[j]
    tgt_pairs = np.flatnonzero(same)
    non_pairs = np.flatnonzero(~same)
    if n_target > len(tgt_pairs) or n_nontarget > len(non_pairs):
        raise ValueError(
            f"insufficient pairs: requested {n_target} target / {n_nontarget} nontarget, "
            f"available {len(tgt_pairs)} / {len(non_pairs)}"
        )
    rng = _rng(seed, 2)
    chosen = np.concatenate([
        rng.choice(tgt_pairs, size=n_target, replace=False),
        rng.choice(non_pairs, size=n_nontarget, replace=False),
    ]).astype(np.int64)
    chosen = chosen[rng.permutation(len(chosen))]
    flip = rng.random(len(chosen)) < 0.5
    a, b = i[chosen], j[chosen]
    enroll = np.where(flip, b, a)
    test = np.where(flip, a, b)
    return TrialSet(enroll.astype(np.int64), test.astype(np.int64), same[chosen])


# ---------------------------------------------------------------- persistence


def _to_file(utts: list[Utterance], adversarial: bool = False, meta: str = "") -> DatasetFile:
    seeds = "seeds=" + ",".join(str(u.seed) for u in utts)
    full = seeds if not meta else f"{meta};{seeds}"
    return DatasetFile([u.speaker_id for u in utts], [u.features for u in utts], adversarial, full)


def dataset_bytes(utts: list[Utterance], adversarial: bool = False, meta: str = "") -> bytes:
    return encode_dataset(_to_file(utts, adversarial, meta))


def save_dataset(path, utts: list[Utterance], adversarial: bool = False, meta: str = "") -> None:
    Path(path).write_bytes(dataset_bytes(utts, adversarial, meta))


def parse_meta(meta: str) -> dict[str, str]:
    out = {}
    for part in meta.split(";"):
        if "=" in part:
            k, v = part.split("=", 1)
            out[k] = v
    return out


def load_dataset_with_meta(path) -> tuple[list[Utterance], bool, dict[str, str]]:
    df = decode_dataset(Path(path).read_bytes())
    meta = parse_meta(df.meta)
    seeds = [int(s) for s in meta.pop("seeds", "").split(",") if s]
    if len(seeds) != len(df.features):
        seeds = [-1] * len(df.features)
    utts = [Utterance(s, f, sd) for s, f, sd in zip(df.speaker_ids, df.features, seeds)]
    return utts, df.adversarial, meta


def load_dataset(path) -> list[Utterance]:
    return load_dataset_with_meta(path)[0]


def save_trials(path, trials: TrialSet, comment: str = "") -> None:
    """CSV ``enroll,test,label``; an optional leading ``# comment`` line carries provenance."""
    lines = [f"# {comment}"] if comment else []
    lines.append("enroll,test,label")
    lines += [f"{e},{t},{'target' if y else 'nontarget'}" for e, t, y in zip(trials.enroll, trials.test, trials.target)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def trials_comment(path) -> str:
    first = Path(path).read_text(encoding="utf-8").split("\n", 1)[0]
    return first[2:] if first.startswith("# ") else ""


def load_trials(path) -> TrialSet:
    rows = Path(path).read_text(encoding="utf-8").strip().splitlines()
    skip = 1 if rows and rows[0].startswith("#") else 0
    if len(rows) <= skip or rows[skip] != "enroll,test,label":
        raise ValueError(f"{path}: missing trial header")
    e, t, y = [], [], []
    for n, row in enumerate(rows[skip + 1:], start=skip + 2):
        parts = row.split(",")
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise ValueError(f"{path}:{n}: malformed trial row {row!r}")
        e.append(int(parts[0]))
        t.append(int(parts[1]))
        y.append(parts[2] == "target")
    return TrialSet(np.array(e, dtype=np.int64), np.array(t, dtype=np.int64), np.array(y, dtype=bool))
