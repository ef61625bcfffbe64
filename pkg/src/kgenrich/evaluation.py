"""Filtered ranking metrics and the link-score ablation."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .rotate import RotateParams, _check_ids, score

__all__ = [
    "KnownTriples",
    "SideReport",
    "RankingReport",
    "EvaluationError",
    "candidate_scores",
    "filtered_rank",
    "evaluate",
    "link_score_ablation",
    "summarize_ranks",
]

SIDES = ("head", "tail")


class EvaluationError(ValueError):
    pass


class KnownTriples:
    """Index of true triples answering "which heads/tails complete this query"."""

    def __init__(self, triples: Iterable[np.ndarray] | np.ndarray):
        if isinstance(triples, np.ndarray):
            triples = [triples]
        self.tails: dict[tuple[int, int], set[int]] = defaultdict(set)
        self.heads: dict[tuple[int, int], set[int]] = defaultdict(set)
        for arr in triples:
            for h, r, t in np.asarray(arr, dtype=np.int64).reshape(-1, 3).tolist():
                self.tails[(h, r)].add(t)
                self.heads[(r, t)].add(h)

    def answers(self, triple, side: str) -> set[int]:
        h, r, t = (int(x) for x in triple)
        if side == "tail":
            return self.tails.get((h, r), set())
        return self.heads.get((r, t), set())


def candidate_scores(params: RotateParams, triple, side: str, candidates: np.ndarray) -> np.ndarray:
    """Scores of ``triple`` with its ``side`` entity replaced by each candidate."""
    h, r, t = (int(x) for x in triple)
    cand = np.asarray(candidates, dtype=np.int64)
    if side not in SIDES:
        raise ValueError(f"side must be 'head' or 'tail', not {side!r}")
    tri = np.empty((len(cand), 3), dtype=np.int64)
    tri[:, 0] = cand if side == "head" else h
    tri[:, 1] = r
    tri[:, 2] = cand if side == "tail" else t
    return score(params, tri)


def _realistic_rank(scores: np.ndarray, true_score: float) -> float:
    better = int(np.count_nonzero(scores > true_score))
    ties = int(np.count_nonzero(scores == true_score))
    # optimistic = better + 1, pessimistic = better + ties + 1
    return better + 1 + ties / 2.0


def filtered_rank(params: RotateParams, triple, side: str, candidates: np.ndarray, known: KnownTriples) -> float:
    """Rank of the true entity among unfiltered candidates, ties averaged.

    Candidates forming a known true triple (other than ``triple`` itself) are
    removed before ranking.
    """
    cand = np.asarray(candidates, dtype=np.int64)
    true_ent = int(triple[0] if side == "head" else triple[2])
    if side not in SIDES:
        raise ValueError(f"side must be 'head' or 'tail', not {side!r}")
    if not np.any(cand == true_ent):
        raise EvaluationError(f"true {side} {true_ent} is not a candidate")
    blocked = known.answers(triple, side)
    if blocked:
        keep = ~np.isin(cand, np.fromiter(blocked, dtype=np.int64, count=len(blocked)))
        cand = cand[keep | (cand == true_ent)]
    others = cand[cand != true_ent]
    scores = candidate_scores(params, triple, side, np.concatenate([[true_ent], others]))
    return _realistic_rank(scores[1:], float(scores[0]))


@dataclass(frozen=True)
class SideReport:
    hits: dict
    mr: float
    mrr: float
    count: int

    def to_dict(self) -> dict:
        out = {f"hits@{k}": v for k, v in sorted(self.hits.items())}
        out.update(mr=self.mr, mrr=self.mrr, count=self.count)
        return out


@dataclass(frozen=True)
class RankingReport(SideReport):
    head: SideReport = None
    tail: SideReport = None
    ranks: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["head"] = self.head.to_dict()
        out["tail"] = self.tail.to_dict()
        return out


def summarize_ranks(ranks: Sequence[float], ks: Sequence[int]) -> SideReport:
    ranks = [float(x) for x in ranks]
    n = len(ranks)
    if n == 0:
        raise EvaluationError("no ranks to summarize")
    return SideReport(
        hits={k: sum(1 for x in ranks if x <= k) / n for k in ks},
        mr=math.fsum(ranks) / n,
        mrr=math.fsum(1.0 / x for x in ranks) / n,
        count=n,
    )


def evaluate(
    params: RotateParams,
    triples: np.ndarray,
    candidates: np.ndarray,
    known: KnownTriples,
    ks: Sequence[int] = (1, 3, 10),
) -> RankingReport:
    """Head and tail filtered ranks for every triple, pooled with equal weight."""
    tri = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(tri) == 0:
        raise EvaluationError("empty evaluation set")
    _check_ids(params, tri[:, 0], tri[:, 1], tri[:, 2])
    cand = np.unique(np.asarray(candidates, dtype=np.int64))
    ranks = {side: [] for side in SIDES}
    for row in tri:
        for side in SIDES:
            try:
                ranks[side].append(filtered_rank(params, row, side, cand, known))
            except EvaluationError as err:
                raise EvaluationError(f"triple {tuple(row.tolist())}: {err}") from err
    both = summarize_ranks(ranks["head"] + ranks["tail"], ks)
    return RankingReport(
        hits=both.hits,
        mr=both.mr,
        mrr=both.mrr,
        count=len(tri),
        head=summarize_ranks(ranks["head"], ks),
        tail=summarize_ranks(ranks["tail"], ks),
        ranks={s: np.array(v) for s, v in ranks.items()},
    )


@dataclass(frozen=True)
class AblationResult:
    means: dict  # label -> {"weighted": mean, "standard": mean}
    gaps: dict  # label -> relative gap


def link_score_ablation(
    weighted: RotateParams,
    standard: RotateParams | None,
    triples: np.ndarray,
    labels: Sequence[str],
) -> AblationResult:
    """Mean link-triple score per label and how far weighting lowered it.

    The gap for a label is ``(standard_mean - weighted_mean) / |standard_mean|``.
    """
    tri = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    labels = np.asarray(labels)
    if len(labels) != len(tri):
        raise ValueError("one label per triple required")
    names = ("correct", "incorrect")
    means, gaps = {}, {}
    for name in names:
        sel = tri[labels == name]
        if len(sel) == 0:
            raise ValueError(f"no {name} link triples")
        entry = {"weighted": math.fsum(score(weighted, sel).tolist()) / len(sel)}
        if standard is not None:
            entry["standard"] = math.fsum(score(standard, sel).tolist()) / len(sel)
            gaps[name] = (entry["standard"] - entry["weighted"]) / abs(entry["standard"])
        means[name] = entry
    return AblationResult(means, gaps)
