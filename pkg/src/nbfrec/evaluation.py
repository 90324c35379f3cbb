"""Filtered ranking evaluation: ranks, Hits@K and NDCG@K.

Ties are resolved by averaging over random tie-breaking.  A per-query rank is
the expected rank ``1 + greater + ties / 2``; aggregate metrics in a
:class:`RankingReport` are expectations of the metric under uniform
tie-breaking, so a constant scorer lands at chance level.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .graph import DatasetSplit, InteractionGraph, mask_edges

METRIC_RE = re.compile(r"^(hits|ndcg)@(\d+)$")
DEFAULT_METRICS = ("hits@10", "ndcg@20")


def parse_metric(name: str) -> tuple[str, int]:
    m = METRIC_RE.match(name.strip().lower())
    if not m or int(m.group(2)) < 1:
        raise ValueError(f"unknown metric {name!r}; expected hits@K or ndcg@K")
    return m.group(1), int(m.group(2))


def rank_counts(scores, true_item: int, filter_items=()) -> tuple[int, int]:
    """(number of strictly higher, number of tied) unfiltered competitors."""
    s = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(s), dtype=bool)
    filt = np.asarray(list(filter_items), dtype=np.int64)
    if len(filt) and np.any(filt == true_item):
        raise ValueError(f"true item {true_item} is in the filter set")
    keep[filt] = False
    keep[true_item] = False
    st = s[true_item]
    return int((s[keep] > st).sum()), int((s[keep] == st).sum())


def filtered_rank(scores, true_item: int, filter_items=()) -> float:
    greater, ties = rank_counts(scores, true_item, filter_items)
    return 1 + greater + ties / 2


def hits_at_k(ranks, K: int, ties=None) -> float:
    """Fraction of ranks <= K.

    With ``ties`` (per-query tied-competitor counts matching expected ranks),
    returns the expectation under random tie-breaking instead.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    r = np.asarray(ranks, dtype=np.float64)
    if len(r) == 0:
        return 0.0
    if ties is None:
        return float(np.mean(r <= K))
    t = np.asarray(ties, dtype=np.float64)
    greater = r - 1 - t / 2
    return float(np.mean(np.clip((K - greater) / (t + 1), 0.0, 1.0)))


def _discount_prefix(n: int) -> np.ndarray:
    """``out[m] = sum_{p=1..m} 1/log2(p+1)``."""
    out = np.zeros(n + 1)
    out[1:] = np.cumsum(1.0 / np.log2(np.arange(2, n + 2)))
    return out


def ndcg_at_k(ranks, K: int, ties=None) -> float:
    """Mean of ``1/log2(rank+1)`` for ranks <= K (one relevant item per query)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    r = np.asarray(ranks, dtype=np.float64)
    if len(r) == 0:
        return 0.0
    if ties is None:
        gains = np.where(r <= K, 1.0 / np.log2(r + 1), 0.0)
        return float(np.mean(gains))
    t = np.asarray(ties, dtype=np.int64)
    greater = np.rint(r - 1 - t / 2).astype(np.int64)
    prefix = _discount_prefix(K)
    hi = np.minimum(greater + t + 1, K)
    lo = np.minimum(greater, K)
    return float(np.mean((prefix[hi] - prefix[lo]) / (t + 1)))


def metric_value(name: str, ranks, ties=None) -> float:
    kind, K = parse_metric(name)
    return hits_at_k(ranks, K, ties) if kind == "hits" else ndcg_at_k(ranks, K, ties)


@dataclass
class RankingReport:
    users: np.ndarray
    items: np.ndarray
    ranks: np.ndarray
    ties: np.ndarray
    metrics: dict[str, float] = field(default_factory=dict)

    @property
    def queries(self) -> int:
        return len(self.ranks)

    @classmethod
    def build(cls, users, items, ranks, ties, metric_names: Sequence[str] = DEFAULT_METRICS) -> "RankingReport":
        r = cls(np.asarray(users), np.asarray(items), np.asarray(ranks, dtype=np.float64), np.asarray(ties, dtype=np.int64))
        r.metrics = {m: metric_value(m, r.ranks, r.ties) for m in metric_names}
        return r

    def to_dict(self, per_query: bool = False) -> dict:
        out = {"metric": dict(self.metrics), "queries": self.queries}
        if per_query:
            out["per_query"] = [
                {"user": int(u), "item": int(i), "rank": float(r)}
                for u, i, r in zip(self.users, self.items, self.ranks)
            ]
        return out

    def to_json(self, per_query: bool = False) -> str:
        return json.dumps(self.to_dict(per_query), indent=2)


def _known_items(g: InteractionGraph, edge_ids: np.ndarray) -> dict[int, np.ndarray]:
    known: dict[int, list] = {}
    for u, i in zip(g.users[edge_ids], g.items[edge_ids]):
        known.setdefault(int(u), []).append(int(i))
    return {u: np.array(v, dtype=np.int64) for u, v in known.items()}


def parse_candidates(policy: str) -> int | None:
    """``"full"`` -> None, ``"sampled:N"`` -> N."""
    if policy == "full":
        return None
    m = re.match(r"^sampled:(\d+)$", policy)
    if not m or int(m.group(1)) < 1:
        raise ValueError(f"candidate policy must be 'full' or 'sampled:N', got {policy!r}")
    return int(m.group(1))


def evaluate(
    model,
    head,
    graph: InteractionGraph,
    split: DatasetSplit,
    which: str = "test",
    metrics: Sequence[str] = DEFAULT_METRICS,
    candidates: str = "full",
    seed: int = 0,
    query_batch: int = 256,
    max_queries: int | None = None,
) -> RankingReport:
    """Rank each held-out edge's item against the catalog for its user.

    ``which="test"``: message passing over train+valid edges, filter train+valid
    positives.  ``which="valid"``: train edges only, filter train positives.
    """
    for m in metrics:
        parse_metric(m)
    n_sampled = parse_candidates(candidates)
    if which == "test":
        eval_ids, known_ids = split.test, np.concatenate([split.train, split.valid])
        view = mask_edges(graph, split.test)
    elif which == "valid":
        eval_ids, known_ids = split.valid, split.train
        view = mask_edges(graph, np.concatenate([split.valid, split.test]))
    else:
        raise ValueError(f"which must be 'test' or 'valid', got {which!r}")
    if len(eval_ids) == 0:
        raise ValueError(f"empty {which} split")
    if max_queries is not None and len(eval_ids) > max_queries:
        eval_ids = np.sort(np.random.default_rng(seed).choice(eval_ids, max_queries, replace=False))

    known = _known_items(graph, known_ids)
    rng = np.random.default_rng(seed)
    eval_users = graph.users[eval_ids]
    query_users = np.unique(eval_users)
    out_u, out_i, out_r, out_t = [], [], [], []
    with torch.no_grad():
        for start in range(0, len(query_users), query_batch):
            chunk = query_users[start : start + query_batch]
            scores = model.score_items(head, view, chunk).double().numpy()
            for row, u in enumerate(chunk):
                s = scores[row]
                filt = known.get(int(u), np.zeros(0, dtype=np.int64))
                for i in graph.items[eval_ids[eval_users == u]]:
                    greater, ties = _rank_one(s, int(i), filt, n_sampled, rng)
                    out_u.append(int(u))
                    out_i.append(int(i))
                    out_r.append(1 + greater + ties / 2)
                    out_t.append(ties)
    order = np.lexsort((np.array(out_i), np.array(out_u)))
    pick = lambda xs: np.asarray(xs)[order]
    return RankingReport.build(pick(out_u), pick(out_i), pick(out_r), pick(out_t), metrics)


def _rank_one(s: np.ndarray, true_item: int, filt: np.ndarray, n_sampled: int | None, rng) -> tuple[int, int]:
    if n_sampled is None:
        return rank_counts(s, true_item, filt)
    pool = np.ones(len(s), dtype=bool)
    pool[filt] = False
    pool[true_item] = False
    cand = np.flatnonzero(pool)
    if len(cand) > n_sampled:
        cand = rng.choice(cand, n_sampled, replace=False)
    st = s[true_item]
    return int((s[cand] > st).sum()), int((s[cand] == st).sum())


def chance_hits(K: int, num_candidates: int) -> float:
    return min(1.0, K / num_candidates)


def mean_ci(values: Sequence[float]) -> dict:
    """Mean and 95% normal-approximation half-width (omitted for one value)."""
    v = np.asarray(values, dtype=np.float64)
    out = {"mean": float(v.mean()), "n": int(len(v)), "values": v.tolist()}
    if len(v) > 1:
        out["ci95"] = float(1.96 * v.std(ddof=1) / math.sqrt(len(v)))
    return out
