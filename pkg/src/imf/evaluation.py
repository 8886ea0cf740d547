"""Filtered link-prediction ranking with random tie placement."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import AnswerIndex

METRICS = ("MR", "MRR", "H@1", "H@10")
DIRECTIONS = ("head", "tail", "both")


@dataclass
class RankResult:
    anchor: int
    relation: int
    direction: str
    true_entity: int
    rank: int
    filtered: bool = True


def rank_one(
    scores: np.ndarray,
    true_id: int,
    filter_set: Iterable[int] = (),
    rng=None,
) -> int:
    """Filtered rank of ``true_id``.

    Candidates in ``filter_set`` other than ``true_id`` are dropped; the true
    entity is placed uniformly at random among remaining candidates sharing its
    score. ``rng`` may be a Generator or anything ``np.random.default_rng``
    accepts as a seed; it is only consulted when there are ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= true_id < scores.shape[0]:
        raise IndexError(f"true entity {true_id} outside 0..{scores.shape[0] - 1}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    keep = np.ones(scores.shape[0], dtype=bool)
    filt = filter_set if isinstance(filter_set, np.ndarray) else np.fromiter(filter_set, dtype=np.int64)
    if len(filt):
        keep[filt] = False
    keep[true_id] = False
    target = scores[true_id]
    others = scores[keep]
    higher = int(np.count_nonzero(others > target))
    ties = int(np.count_nonzero(others == target))
    if not ties:
        return higher + 1
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return higher + 1 + int(rng.integers(0, ties + 1))


@dataclass
class MetricsReport:
    metrics: dict[str, dict[str, float]]
    num_queries: dict[str, int] = field(default_factory=dict)
    ranks: list[RankResult] = field(default_factory=list, repr=False)

    def __getitem__(self, key):
        return self.metrics[key]

    @property
    def mrr(self) -> float:
        return self.metrics["both"]["MRR"]

    def to_dict(self) -> dict:
        return {d: dict(self.metrics[d]) for d in DIRECTIONS}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def to_table(self, title: str = "") -> str:
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'':<6}{'MR':>10}{'MRR':>8}{'H@1':>8}{'H@10':>8}")
        for d in DIRECTIONS:
            m = self.metrics[d]
            lines.append(f"{d:<6}{m['MR']:>10.1f}{m['MRR']:>8.3f}{m['H@1']:>8.1f}{m['H@10']:>8.1f}")
        return "\n".join(lines)


def summarize(ranks: Sequence[int] | np.ndarray) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return {m: float("nan") for m in METRICS}
    return {
        "MR": float(ranks.mean()),
        "MRR": float((1.0 / ranks).mean()),
        "H@1": float(100.0 * (ranks <= 1).mean()),
        "H@10": float(100.0 * (ranks <= 10).mean()),
    }


ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def evaluate(
    score_fn: ScoreFn,
    triples: np.ndarray,
    filter_index: AnswerIndex,
    num_relations: int,
    seed: int = 0,
    batch_size: int = 256,
    keep_ranks: bool = False,
) -> MetricsReport:
    """Rank every triple's tail given ``(h, r)`` and head given ``(r, t)``.

    ``score_fn(anchors, query_relations)`` returns a ``B x |E|`` score matrix;
    head queries use ``relation + num_relations``. Tie breaking draws from a
    per-query generator derived from ``seed``, so results do not depend on
    batching.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(triples) == 0:
        raise ValueError("cannot evaluate an empty split")
    n = len(triples)
    # query q < n: tail prediction for triple q; q >= n: head prediction for triple q - n
    anchors = np.concatenate([triples[:, 0], triples[:, 2]])
    relations = np.concatenate([triples[:, 1], triples[:, 1] + num_relations])
    truths = np.concatenate([triples[:, 2], triples[:, 0]])
    ranks = np.empty(2 * n, dtype=np.int64)
    for start in range(0, 2 * n, batch_size):
        stop = min(start + batch_size, 2 * n)
        scores = np.asarray(score_fn(anchors[start:stop], relations[start:stop]))
        for row, q in enumerate(range(start, stop)):
            direction = "tail" if q < n else "head"
            h, r, t = triples[q % n]
            known = filter_index.answers(h, r, "tail") if direction == "tail" else filter_index.answers(t, r, "head")
            filt = np.fromiter(known, dtype=np.int64, count=len(known))
            ranks[q] = rank_one(scores[row], truths[q], filt, [seed, q])
    metrics = {"tail": summarize(ranks[:n]), "head": summarize(ranks[n:]), "both": summarize(ranks)}
    records = []
    if keep_ranks:
        for q in range(2 * n):
            direction = "tail" if q < n else "head"
            h, r, t = triples[q % n]
            records.append(RankResult(int(anchors[q]), int(r), direction, int(truths[q]), int(ranks[q])))
    return MetricsReport(metrics, {"tail": n, "head": n, "both": 2 * n}, records)


def aggregate(reports: Sequence[MetricsReport]) -> dict[str, dict[str, tuple[float, float]]]:
    """Mean and standard deviation of each metric across runs (e.g. seeds)."""
    out = {}
    for d in DIRECTIONS:
        out[d] = {}
        for m in METRICS:
            vals = np.array([r.metrics[d][m] for r in reports])
            out[d][m] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out
