"""Seeded cluster-planted bipartite graphs with informative edge features."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .graph import DataError, InteractionGraph, write_interactions


@dataclass(frozen=True)
class SynthSpec:
    num_users: int = 200
    num_items: int = 200
    num_clusters: int = 4
    p_intra: float = 0.15
    p_inter: float = 0.01
    feature_dim: int = 16
    feature_signal: float = 0.8
    seed: int = 0

    def validate(self):
        if self.num_users < 1 or self.num_items < 1:
            raise ValueError("need at least one user and one item")
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        # equal probabilities are allowed: the no-structure control case
        if not 0 <= self.p_inter <= self.p_intra <= 1:
            raise ValueError(f"need 0 <= p_inter <= p_intra <= 1 (got {self.p_inter}, {self.p_intra})")
        if not 0 <= self.feature_signal <= 1:
            raise ValueError("feature_signal must lie in [0, 1]")
        if self.feature_dim < 0:
            raise ValueError("feature_dim must be >= 0")
        if self.expected_edges() < 10:
            raise ValueError(f"expected edge count {self.expected_edges():.1f} < 10: untrainable instance")

    def user_clusters(self) -> np.ndarray:
        return np.arange(self.num_users) % self.num_clusters

    def item_clusters(self) -> np.ndarray:
        return np.arange(self.num_items) % self.num_clusters

    def expected_edges(self) -> float:
        same = (self.user_clusters()[:, None] == self.item_clusters()[None, :]).sum()
        total = self.num_users * self.num_items
        return same * self.p_intra + (total - same) * self.p_inter

    def to_dict(self) -> dict:
        return asdict(self)


def block_codes(num_clusters: int, feature_dim: int) -> np.ndarray:
    """Unit-norm code per (user cluster, item cluster) block, ``[K*K, feature_dim]``.

    A block's code is the one-hot of its user cluster (columns ``0..K-1``)
    plus the one-hot of its item cluster (columns ``K..2K-1``), rescaled to
    unit norm.  With ``feature_dim >= 2K`` every block gets a distinct code;
    smaller widths wrap columns modulo ``feature_dim``.  Columns past ``2K``
    carry noise only.
    """
    K = num_clusters
    b = np.arange(K * K)
    codes = np.zeros((K * K, feature_dim))
    if feature_dim:
        np.add.at(codes, (b, (b // K) % feature_dim), 1.0)
        np.add.at(codes, (b, (K + b % K) % feature_dim), 1.0)
        codes /= np.linalg.norm(codes, axis=1, keepdims=True)
    return codes


@dataclass
class SynthGraph:
    graph: InteractionGraph
    user_clusters: np.ndarray
    item_clusters: np.ndarray
    spec: SynthSpec

    def labels_json(self) -> str:
        return json.dumps(
            {
                "spec": self.spec.to_dict(),
                "user_clusters": self.user_clusters.tolist(),
                "item_clusters": self.item_clusters.tolist(),
            }
        )

    def write(self, csv_path, labels_path=None):
        with open(csv_path, "w") as fh:
            schema = write_interactions(self.graph, fh)
        if labels_path is not None:
            with open(labels_path, "w") as fh:
                fh.write(self.labels_json())
        return schema


def generate(spec: SynthSpec) -> SynthGraph:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cu, ci = spec.user_clusters(), spec.item_clusters()
    same = cu[:, None] == ci[None, :]
    prob = np.where(same, spec.p_intra, spec.p_inter)
    users, items = np.nonzero(rng.random(prob.shape) < prob)
    if len(users) == 0:
        raise DataError("generator produced no edges")
    blocks = cu[users] * spec.num_clusters + ci[items]
    codes = block_codes(spec.num_clusters, spec.feature_dim)[blocks]
    noise = rng.standard_normal((len(users), spec.feature_dim))
    feats = spec.feature_signal * codes + (1 - spec.feature_signal) * noise
    g = InteractionGraph(
        num_users=spec.num_users,
        num_items=spec.num_items,
        users=users,
        items=items,
        features=feats,
        feature_names=tuple(f"f{j}" for j in range(spec.feature_dim)),
        user_labels=tuple(f"u{u}" for u in range(spec.num_users)),
        item_labels=tuple(f"i{i}" for i in range(spec.num_items)),
    )
    return SynthGraph(g, cu, ci, spec)


def family_pair(spec: SynthSpec, seed_a: int, seed_b: int) -> tuple[SynthGraph, SynthGraph]:
    """Two independent draws from one generative family."""
    a = generate(replace(spec, seed=seed_a))
    b = generate(replace(spec, seed=seed_b))
    reroll = seed_b
    while a.graph.same_as(b.graph):
        reroll += 1_000_003
        b = generate(replace(spec, seed=reroll))
    return a, b
