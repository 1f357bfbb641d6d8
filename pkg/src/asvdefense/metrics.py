"""EER, normalized minDCF and DET points.

A trial is accepted iff ``score >= threshold``.  Thresholds are every distinct
score plus the -inf / +inf sentinels, so the sweep is exhaustive.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CSV_HEADER = ["condition", "n_trials", "eer_percent", "min_dcf", "config_hash", "seed"]


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must be in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


@dataclass
class ScoredTrials:
    scores: np.ndarray
    target: np.ndarray  # bool

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        lab = np.asarray(self.target)
        if lab.dtype.kind in "US":
            lab = lab == "target"
        self.target = lab.astype(bool).reshape(-1)
        if self.scores.shape != self.target.shape:
            raise ValueError(f"{len(self.scores)} scores but {len(self.target)} labels")

    def __len__(self):
        return len(self.scores)


def _require_both(st: ScoredTrials) -> None:
    if not st.target.any() or st.target.all():
        raise ValueError("need at least one target and one nontarget trial")


def det_points(st: ScoredTrials) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, p_miss, p_fa), thresholds increasing from -inf to +inf."""
    if len(st) == 0:
        raise ValueError("no trials")
    tar = np.sort(st.scores[st.target])
    non = np.sort(st.scores[~st.target])
    thr = np.concatenate([[-np.inf], np.unique(st.scores), [np.inf]])
    n_tar, n_non = max(len(tar), 1), max(len(non), 1)
    # misses: targets strictly below threshold; false alarms: nontargets at or above
    p_miss = np.searchsorted(tar, thr, side="left") / n_tar
    p_fa = (len(non) - np.searchsorted(non, thr, side="left")) / n_non
    return thr, p_miss, p_fa


def _eer_from_points(p_miss: np.ndarray, p_fa: np.ndarray) -> float:
    d = p_miss - p_fa  # nondecreasing; -1 at -inf, +1 at +inf
    j = int(np.argmax(d >= 0))
    if d[j] == 0:
        return float(p_miss[j]) * 100.0
    frac = d[j - 1] / (d[j - 1] - d[j])
    return float(p_miss[j - 1] + frac * (p_miss[j] - p_miss[j - 1])) * 100.0


def eer(st: ScoredTrials) -> float:
    """Equal error rate in percent, linearly interpolated at the crossing."""
    _require_both(st)
    _, pm, pf = det_points(st)
    return _eer_from_points(pm, pf)


def _dcf_from_points(p_miss, p_fa, p: DcfParams) -> float:
    cost = p.c_miss * p.p_target * p_miss + p.c_fa * (1.0 - p.p_target) * p_fa
    norm = min(p.c_miss * p.p_target, p.c_fa * (1.0 - p.p_target))
    return float(np.min(cost) / norm)


def min_dcf(st: ScoredTrials, p: DcfParams = DcfParams()) -> float:
    _require_both(st)
    _, pm, pf = det_points(st)
    return _dcf_from_points(pm, pf, p)


# ---------------------------------------------------------------- reports


@dataclass
class ReportRow:
    condition: str
    n_trials: int
    eer_percent: float
    min_dcf: float
    config_hash: str
    seed: int


@dataclass
class EvalReport:
    rows: list[ReportRow]
    metadata: dict[str, str] = field(default_factory=dict)

    def by_condition(self) -> dict[str, ReportRow]:
        return {r.condition: r for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.condition, r.n_trials, f"{r.eer_percent:.17g}", f"{r.min_dcf:.17g}", r.config_hash, r.seed])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def report(conditions: list[tuple[str, ScoredTrials]], config_hash: str = "", seed: int = 0,
           dcf: DcfParams = DcfParams()) -> EvalReport:
    rows = [ReportRow(name, len(st), eer(st), min_dcf(st, dcf), config_hash, seed) for name, st in conditions]
    return EvalReport(rows)


def parse_report(text: str) -> EvalReport:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_HEADER:
        raise ValueError(f"unexpected report header {header}")
    rows = [ReportRow(c, int(n), float(e), float(d), h, int(s)) for c, n, e, d, h, s in reader]
    return EvalReport(rows)


def load_report(path) -> EvalReport:
    return parse_report(Path(path).read_text(encoding="utf-8"))
