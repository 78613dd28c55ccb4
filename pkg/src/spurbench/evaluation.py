"""Episodic evaluation: accuracy per mode, the IID-OOD gap, and head swaps.

Episodes are sampled once and frozen before any head runs, so every head
and every embedding set is scored on identical tasks. Per-episode
accuracies are kept in episode order and reduced in that order, which makes
reports bit-reproducible whatever the worker count.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .embeddings import EmbeddingSet
from .episodes import Episode, Mode
from .errors import EvalError, SpurBenchError
from .heads import HeadConfig, Prediction, classify

Z_95 = 1.96
HeadLike = HeadConfig | str | Callable[[Episode, EmbeddingSet], Prediction | np.ndarray]


@dataclass(frozen=True)
class ModeResult:
    mode: str
    mean: float             # accuracy in percent
    spread: float           # CI half-width ("episodes") or sd over seeds ("seeds")
    n_episodes: int
    seeds: tuple[int, ...]
    trace: tuple[float, ...]  # per-episode accuracy in percent, episode order

    def to_dict(self, with_trace: bool = True) -> dict:
        d = {"mode": self.mode, "mean": self.mean, "spread": self.spread,
             "n_episodes": self.n_episodes, "seeds": list(self.seeds)}
        if with_trace:
            d["trace"] = list(self.trace)
        return d


@dataclass(frozen=True)
class EvalReport:
    head: Mapping              # resolved head config (or {"kind": <callable name>})
    embedding: str             # label of the embedding set
    aggregate: str
    modes: Mapping[str, ModeResult] = field(default_factory=dict)

    @property
    def gap(self) -> float | None:
        """IID minus OOD accuracy in points; None unless both modes are present."""
        if Mode.IID.value in self.modes and Mode.OOD.value in self.modes:
            return self.modes[Mode.IID.value].mean - self.modes[Mode.OOD.value].mean
        return None

    def config_key(self) -> str:
        return json.dumps({"head": dict(self.head), "embedding": self.embedding,
                           "aggregate": self.aggregate}, sort_keys=True)

    def to_dict(self, with_trace: bool = True) -> dict:
        return {"head": dict(self.head), "embedding": self.embedding, "aggregate": self.aggregate,
                "gap": self.gap,
                "modes": {k: v.to_dict(with_trace) for k, v in sorted(self.modes.items())}}


def _head_meta(head: HeadLike) -> dict:
    if isinstance(head, str):
        head = HeadConfig(head)
    if isinstance(head, HeadConfig):
        return head.as_dict()
    return {"kind": getattr(head, "__name__", type(head).__name__)}


def _labels(out) -> np.ndarray:
    return out.labels if isinstance(out, Prediction) else np.asarray(out)


def episode_accuracy(ep: Episode, emb: EmbeddingSet, head: HeadLike) -> float:
    """Fraction (in percent) of queries whose argmax label is correct."""
    if isinstance(head, (HeadConfig, str)):
        pred = classify(ep, emb, head)
    else:
        pred = head(ep, emb)
    labels = _labels(pred)
    truth = ep.query_labels
    if labels.shape != truth.shape:
        raise EvalError(f"head returned {labels.shape[0]} labels for {truth.shape[0]} queries")
    if truth.size == 0:
        raise EvalError("episode has no queries")
    return 100.0 * float(np.count_nonzero(labels == truth)) / truth.size


def _score_range(episodes, emb, head, start):
    out = []
    for i, ep in enumerate(episodes):
        try:
            out.append(episode_accuracy(ep, emb, head))
        except SpurBenchError as exc:
            raise EvalError(f"episode {start + i}: {exc}") from exc
    return out


_WORKER: dict = {}


def _init_worker(emb, head):
    _WORKER["emb"], _WORKER["head"] = emb, head


def _worker_range(args):
    episodes, start = args
    return _score_range(episodes, _WORKER["emb"], _WORKER["head"], start)


def score_episodes(episodes: Sequence[Episode], emb: EmbeddingSet, head: HeadLike,
                   jobs: int = 1) -> list[float]:
    """Per-episode accuracies in episode order; ``jobs > 1`` uses worker processes."""
    episodes = list(episodes)
    if jobs <= 1 or len(episodes) < 2 * jobs:
        return _score_range(episodes, emb, head, 0)
    bounds = np.linspace(0, len(episodes), jobs + 1).astype(int)
    chunks = [(episodes[a:b], int(a)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(emb, head)) as ex:
        parts = list(ex.map(_worker_range, chunks))
    return [acc for part in parts for acc in part]


def _aggregate(trace: np.ndarray, groups: np.ndarray, how: str) -> tuple[float, float]:
    if how == "episodes":
        sd = float(np.std(trace, ddof=1)) if trace.size > 1 else 0.0
        return float(np.mean(trace)), Z_95 * sd / math.sqrt(trace.size)
    # "seeds": mean and sd of per-seed means, seeds in sorted order
    means = np.array([trace[groups == g].mean() for g in np.unique(groups)])
    sd = float(np.std(means, ddof=1)) if means.size > 1 else 0.0
    return float(np.mean(means)), sd


def run_eval(episodes: Sequence[Episode], head: HeadLike, emb: EmbeddingSet, jobs: int = 1,
             aggregate: str = "episodes", groups: Sequence[int] | None = None,
             embedding_label: str = "embeddings") -> EvalReport:
    """Score every episode with ``head`` and aggregate per mode.

    ``groups`` assigns each episode to a seed group; it is only used when
    ``aggregate="seeds"`` (mean and sd over group means).
    """
    if aggregate not in ("episodes", "seeds"):
        raise EvalError(f"unknown aggregate {aggregate!r}")
    episodes = list(episodes)
    if not episodes:
        raise EvalError("no episodes to evaluate")
    if groups is None:
        groups = [0] * len(episodes)
    groups = np.asarray(groups)
    if groups.size != len(episodes):
        raise EvalError("groups must have one entry per episode")
    trace = np.asarray(score_episodes(episodes, emb, head, jobs))
    modes = {}
    for mode in Mode:
        sel = np.array([ep.mode == mode for ep in episodes])
        if not sel.any():
            continue
        mean, spread = _aggregate(trace[sel], groups[sel], aggregate)
        seeds = tuple(int(ep.seed) for ep, s in zip(episodes, sel) if s)
        modes[mode.value] = ModeResult(mode.value, mean, spread, int(sel.sum()), seeds,
                                       tuple(float(t) for t in trace[sel]))
    return EvalReport(_head_meta(head), embedding_label, aggregate, modes)


def gap_report(iid: EvalReport, ood: EvalReport) -> float:
    """Delta = mean IID accuracy - mean OOD accuracy, in percentage points."""
    if iid.config_key() != ood.config_key():
        raise EvalError("incomparable reports: head, embedding or aggregation differ")
    if Mode.IID.value not in iid.modes or Mode.OOD.value not in ood.modes:
        raise EvalError("incomparable reports: need an IID and an OOD result")
    return iid.modes[Mode.IID.value].mean - ood.modes[Mode.OOD.value].mean


def head_swap_matrix(embedding_sets: Mapping[str, EmbeddingSet], heads: Sequence[HeadLike],
                     episodes: Sequence[Episode], jobs: int = 1,
                     aggregate: str = "episodes") -> dict[tuple[str, str], EvalReport]:
    """Every head (rows) on every embedding set (columns), same episodes throughout."""
    out = {}
    for head in heads:
        row = head_name(head)
        for col, emb in embedding_sets.items():
            try:
                out[(row, col)] = run_eval(episodes, head, emb, jobs, aggregate, embedding_label=col)
            except SpurBenchError as exc:
                raise EvalError(f"cell ({row}, {col}): {exc}") from exc
    return out


def head_name(head: HeadLike) -> str:
    meta = _head_meta(head)
    return meta["kind"]


# ---------------------------------------------------------------- output

REPORT_COLUMNS = ["head", "embedding", "mode", "n_episodes", "mean", "spread", "aggregate"]


def _f(v) -> str:
    return "" if v is None else repr(float(v))


def report_rows(report: EvalReport) -> list[list[str]]:
    rows = []
    for mode, r in sorted(report.modes.items()):
        rows.append([report.head["kind"], report.embedding, mode, str(r.n_episodes),
                     _f(r.mean), _f(r.spread), report.aggregate])
    return rows


def write_report_csv(path: str | Path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS + ["gap"])
        for rep in reports:
            for row in report_rows(rep):
                w.writerow(row + [_f(rep.gap)])


def write_report_json(path: str | Path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_matrix_csv(path: str | Path, matrix: Mapping[tuple[str, str], EvalReport],
                     value: str = "gap") -> None:
    """Rows are heads, columns embedding sets; cells hold the gap or a mode's accuracy."""
    rows = list(dict.fromkeys(r for r, _ in matrix))
    cols = list(dict.fromkeys(c for _, c in matrix))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["head"] + cols)
        for r in rows:
            cells = []
            for c in cols:
                rep = matrix.get((r, c))
                if rep is None:
                    cells.append("")
                elif value == "gap":
                    cells.append(_f(rep.gap))
                else:
                    cells.append(_f(rep.modes[value].mean) if value in rep.modes else "")
            w.writerow([r] + cells)


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepPoint:
    strength: float
    iid: float
    iid_ci: float
    ood: float
    ood_ci: float

    @property
    def gap(self) -> float:
        return self.iid - self.ood


def gap_sweep(strengths: Sequence[float], make_embeddings: Callable[[float], EmbeddingSet],
              iid_episodes: Sequence[Episode], ood_episodes: Sequence[Episode],
              head: HeadLike, jobs: int = 1) -> list[SweepPoint]:
    """Gap at each strength, reusing the same frozen episodes at every point."""
    points = []
    for s in strengths:
        emb = make_embeddings(float(s))
        rep = run_eval(list(iid_episodes) + list(ood_episodes), head, emb, jobs)
        i, o = rep.modes[Mode.IID.value], rep.modes[Mode.OOD.value]
        points.append(SweepPoint(float(s), i.mean, i.spread, o.mean, o.spread))
    return points


def write_sweep_csv(path: str | Path, points: Sequence[SweepPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strength", "iid", "iid_ci", "ood", "ood_ci", "delta"])
        for p in points:
            w.writerow([_f(p.strength), _f(p.iid), _f(p.iid_ci), _f(p.ood), _f(p.ood_ci), _f(p.gap)])
