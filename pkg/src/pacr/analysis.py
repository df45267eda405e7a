"""Confidence-trajectory statistics over JSONL trajectory logs.

Log schema (one JSON object per line, version 1)::

    {"v": 1, "question_id": str, "correct": bool,
     "coherence": "coherent" | "spurious" | null,
     "steps": [{"text": str, "logp_gt": float}, ...],
     "logp_gt_empty": float}            # optional

``logp_gt`` is the log-probability of the ground-truth answer after the step;
``logp_gt_empty`` is the same quantity for the empty prefix. Without it the
first step has no gain. Gains are always recomputed from these values.

Judgment schema: ``{"question_id": str, "i": int, "j": int, "winner": "i" | "j"}``
with 1-based step indices and the gain of step ``i`` strictly above step ``j``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import SchemaError
from .trace import consistency

log = logging.getLogger(__name__)

LOG_VERSION = 1
COHERENCE_LABELS = ("coherent", "spurious")
N_BOOTSTRAP = 10_000


@dataclass(frozen=True)
class LogStep:
    raw_text: str
    logp_gt: float


@dataclass(frozen=True)
class TrajectoryLogRecord:
    question_id: str
    correct: bool
    steps: tuple[LogStep, ...]
    coherence_label: str = "unlabeled"
    logp_gt_empty: Optional[float] = None

    def __post_init__(self):
        if self.coherence_label not in COHERENCE_LABELS + ("unlabeled",):
            raise SchemaError(f"unknown coherence label {self.coherence_label!r}")
        if not self.steps:
            raise SchemaError("a record needs at least one step")

    @property
    def logp(self) -> np.ndarray:
        vals = [s.logp_gt for s in self.steps]
        if self.logp_gt_empty is not None:
            vals.insert(0, self.logp_gt_empty)
        return np.array(vals, dtype=np.float64)

    @property
    def first_gain_step(self) -> int:
        """1-based index of the step that ``gains[0]`` belongs to."""
        return 1 if self.logp_gt_empty is not None else 2

    @property
    def gains(self) -> np.ndarray:
        return np.diff(self.logp)

    def consistency(self) -> Optional[float]:
        g = self.gains
        return consistency(g) if g.size else None

    def to_json(self) -> dict:
        d = {
            "v": LOG_VERSION,
            "question_id": self.question_id,
            "correct": self.correct,
            "coherence": None if self.coherence_label == "unlabeled" else self.coherence_label,
            "steps": [{"text": s.raw_text, "logp_gt": s.logp_gt} for s in self.steps],
        }
        if self.logp_gt_empty is not None:
            d["logp_gt_empty"] = self.logp_gt_empty
        return d


def _logp_value(x, what):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise SchemaError(f"{what} must be a number")
    x = float(x)
    if not math.isfinite(x) or x > 0:
        raise SchemaError(f"{what} must be finite and <= 0, got {x!r}")
    return x


def parse_record(obj) -> TrajectoryLogRecord:
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object")
    if obj.get("v") != LOG_VERSION:
        raise SchemaError(f"unsupported version {obj.get('v')!r}")
    qid = obj.get("question_id")
    if not isinstance(qid, str):
        raise SchemaError("question_id must be a string")
    correct = obj.get("correct")
    if not isinstance(correct, bool):
        raise SchemaError("correct must be a boolean")
    coherence = obj.get("coherence")
    if coherence not in (None, *COHERENCE_LABELS):
        raise SchemaError(f"coherence must be one of {COHERENCE_LABELS} or null")
    steps = obj.get("steps")
    if not isinstance(steps, list) or not steps:
        raise SchemaError("steps must be a non-empty list")
    parsed = []
    for k, s in enumerate(steps, 1):
        if not isinstance(s, dict) or not isinstance(s.get("text"), str):
            raise SchemaError(f"step {k} needs a string 'text'")
        parsed.append(LogStep(s["text"], _logp_value(s.get("logp_gt"), f"step {k} logp_gt")))
    empty = obj.get("logp_gt_empty")
    if empty is not None:
        empty = _logp_value(empty, "logp_gt_empty")
    return TrajectoryLogRecord(qid, correct, tuple(parsed), coherence or "unlabeled", empty)


def read_log(path, lenient: bool = False) -> tuple[list[TrajectoryLogRecord], list[str]]:
    """Parse a JSONL log. Returns the records and, when lenient, the skipped-line messages."""
    records, problems = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"invalid JSON: {exc.msg}") from None
                records.append(parse_record(obj))
            except SchemaError as exc:
                err = SchemaError(str(exc), line=lineno)
                if not lenient:
                    raise err from None
                problems.append(str(err))
                log.warning("skipping %s", err)
    if not records and not problems:
        raise SchemaError(f"{path}: no records")
    return records, problems


def ingest(path, lenient: bool = False) -> list[TrajectoryLogRecord]:
    return read_log(path, lenient)[0]


def emit(records: Iterable[TrajectoryLogRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


# ---------------------------------------------------------------- group comparisons


def bootstrap_mean_difference(a, b, n_boot: int = N_BOOTSTRAP, seed: int = 0, chunk: int = 1000):
    """Percentile 95% CI for mean(a) - mean(b), resampling each group independently."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    rng = np.random.default_rng(seed)
    diffs = np.empty(n_boot)
    for lo in range(0, n_boot, chunk):
        hi = min(lo + chunk, n_boot)
        ia = rng.integers(0, a.size, (hi - lo, a.size))
        ib = rng.integers(0, b.size, (hi - lo, b.size))
        diffs[lo:hi] = a[ia].mean(axis=1) - b[ib].mean(axis=1)
    low, high = np.percentile(diffs, [2.5, 97.5])
    return float(low), float(high)


def compare_groups(a, b, labels=("a", "b"), n_boot: int = N_BOOTSTRAP, seed: int = 0, min_size: int = 1) -> dict:
    la, lb = labels
    out = {"defined": False, f"n_{la}": len(a), f"n_{lb}": len(b)}
    if len(a) < min_size or len(b) < min_size:
        out["reason"] = f"need at least {min_size} value(s) per group, got {len(a)} {la} and {len(b)} {lb}"
        return out
    ma, mb = float(np.mean(a)), float(np.mean(b))
    lo, hi = bootstrap_mean_difference(a, b, n_boot, seed)
    out.update({
        "defined": True,
        f"mean_{la}": ma,
        f"mean_{lb}": mb,
        "difference": ma - mb,
        "ci_low": lo,
        "ci_high": hi,
        "ci_excludes_zero": bool(lo > 0 or hi < 0),
    })
    return out


def _consistencies(records):
    vals = [r.consistency() for r in records]
    return [v for v in vals if v is not None]


def consistency_comparison(records: Sequence[TrajectoryLogRecord], n_boot: int = N_BOOTSTRAP, seed: int = 0) -> dict:
    """Mean consistency of correct vs incorrect trajectories with a bootstrap CI."""
    correct = _consistencies([r for r in records if r.correct])
    incorrect = _consistencies([r for r in records if not r.correct])
    return compare_groups(correct, incorrect, ("correct", "incorrect"), n_boot, seed)


def coherence_comparison(records: Sequence[TrajectoryLogRecord], n_boot: int = N_BOOTSTRAP, seed: int = 0) -> dict:
    """Coherent vs spurious among correct trajectories; undefined below two labels per class."""
    correct = [r for r in records if r.correct]
    coherent = _consistencies([r for r in correct if r.coherence_label == "coherent"])
    spurious = _consistencies([r for r in correct if r.coherence_label == "spurious"])
    out = compare_groups(coherent, spurious, ("coherent", "spurious"), n_boot, seed, min_size=2)
    if not out["defined"] and all(r.coherence_label == "unlabeled" for r in correct):
        out["reason"] = "no coherence labels on correct trajectories"
    return out


# ---------------------------------------------------------------- pivotal steps


def pivotal_steps(record: TrajectoryLogRecord, top_n: int) -> list[tuple[int, float]]:
    """Steps ranked by descending gain, earlier step first on ties (1-based indices)."""
    gains = record.gains
    first = record.first_gain_step
    order = sorted(range(gains.size), key=lambda k: (-gains[k], k))
    return [(first + k, float(gains[k])) for k in order[: max(top_n, 0)]]


def pivotal_table(records: Sequence[TrajectoryLogRecord], top_n: int = 3) -> list[dict]:
    rows = []
    for r in records:
        for rank, (step, gain) in enumerate(pivotal_steps(r, top_n), 1):
            rows.append({"question_id": r.question_id, "correct": r.correct, "rank": rank, "step": step, "gain": gain})
    return rows


@dataclass(frozen=True)
class PairJudgment:
    question_id: str
    i: int
    j: int
    winner: str


def load_judgments(path, records: Sequence[TrajectoryLogRecord]) -> list[PairJudgment]:
    by_id = {}
    for r in records:
        if r.question_id in by_id:
            raise SchemaError(f"question_id {r.question_id!r} is not unique in the log")
        by_id[r.question_id] = r
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from None
            qid, i, j, winner = (obj.get(k) for k in ("question_id", "i", "j", "winner"))
            if qid not in by_id:
                raise SchemaError(f"unknown question_id {qid!r}", line=lineno)
            if winner not in ("i", "j"):
                raise SchemaError("winner must be 'i' or 'j'", line=lineno)
            rec = by_id[qid]
            first = rec.first_gain_step
            gains = rec.gains
            for idx in (i, j):
                if not isinstance(idx, int) or isinstance(idx, bool) or not first <= idx < first + gains.size:
                    raise SchemaError(f"step index {idx!r} has no gain in {qid}", line=lineno)
            if not gains[i - first] > gains[j - first]:
                raise SchemaError(f"pair ({i}, {j}) in {qid} violates C_i > C_j", line=lineno)
            out.append(PairJudgment(qid, i, j, winner))
    return out


def pairwise_gain_winrate(judgments: Sequence[PairJudgment]) -> dict:
    """Share of pairs where the higher-gain step was judged more critical."""
    n = len(judgments)
    if n == 0:
        return {"defined": False, "n_pairs": 0, "reason": "no judgments"}
    wins = sum(1 for jd in judgments if jd.winner == "i")
    test = stats.binomtest(wins, n, 0.5, alternative="two-sided")
    ci = test.proportion_ci(confidence_level=0.95, method="exact")
    return {
        "defined": True,
        "n_pairs": n,
        "wins": wins,
        "win_rate": wins / n,
        "ci_low": float(ci.low),
        "ci_high": float(ci.high),
        "p_value_vs_chance": float(test.pvalue),
    }


def observation_report(records, judgments=None, n_boot: int = N_BOOTSTRAP, seed: int = 0, top_n: int = 3) -> dict:
    report = {
        "n_records": len(records),
        "consistency_by_correctness": consistency_comparison(records, n_boot, seed),
        "consistency_by_coherence": coherence_comparison(records, n_boot, seed),
        "pivotal_steps": {"top_n": top_n, "n_rows": len(pivotal_table(records, top_n))},
    }
    if judgments is not None:
        report["pairwise_win_rate"] = pairwise_gain_winrate(judgments)
    return report


def write_csv(rows: Sequence[dict], path, columns: Sequence[str]) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c) for c in columns})


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
