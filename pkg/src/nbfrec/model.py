"""NBF-Rec forward pass.

For a query user ``u`` every node starts from the boundary state (the learned
``boundary`` vector at ``u``, zeros elsewhere).  Each of the ``T`` layers sends
DistMult messages ``h_x * MLP_t(g(r))`` along every active arc, sums them per
target node together with the node's initial state, and applies
linear -> layer norm -> relu to ``[h_prev ; aggregate]``.  Scores come from
``MLP_score([h_T ; h_0])``.

State tensors are node-major and batched over queries: ``[num_nodes, B, d]``.
"""

from __future__ import annotations

import json
import weakref
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .autodiff import MlpSpec, ParamStore, init_mlp, layer_norm, mlp_apply
from .graph import GraphView, InteractionGraph
from .kernels import ArcOperator

DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    d_proj: int = 16
    T: int = 4
    proj_hidden: tuple[int, ...] = ()
    emb_hidden: tuple[int, ...] = (32,)
    layer_hidden: tuple[int, ...] = ()
    score_hidden: tuple[int, ...] = (32,)
    structural_only: bool = False
    precision: str = "float32"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("proj_hidden", "emb_hidden", "layer_hidden", "score_hidden"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        if self.d < 1 or self.T < 1 or self.d_proj < 1:
            raise ValueError(f"need d, T, d_proj >= 1 (got d={self.d}, T={self.T}, d_proj={self.d_proj})")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.precision]

    def proj_spec(self, d_in: int) -> MlpSpec:
        return MlpSpec((d_in, *self.proj_hidden, self.d_proj))

    @property
    def emb_spec(self) -> MlpSpec:
        return MlpSpec((self.d_proj, *self.emb_hidden, self.d))

    @property
    def layer_spec(self) -> MlpSpec:
        return MlpSpec((self.d, *self.layer_hidden, self.d))

    @property
    def score_spec(self) -> MlpSpec:
        return MlpSpec((2 * self.d, *self.score_hidden, 1))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})


def init_backbone(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    gen = torch.Generator().manual_seed(int(seed))
    dt = cfg.dtype
    p = ParamStore()
    p["boundary"] = torch.ones(cfg.d, dtype=dt)
    init_mlp(p, cfg.emb_spec, "emb", gen, dt)
    for t in range(1, cfg.T + 1):
        init_mlp(p, cfg.layer_spec, f"layer{t}.mlp", gen, dt)
        init_mlp(p, MlpSpec((2 * cfg.d, cfg.d)), f"layer{t}.update", gen, dt)
        p[f"layer{t}.norm.gamma"] = torch.ones(cfg.d, dtype=dt)
        p[f"layer{t}.norm.beta"] = torch.zeros(cfg.d, dtype=dt)
    init_mlp(p, cfg.score_spec, "score", gen, dt)
    if cfg.structural_only:
        p["edge_const"] = torch.ones(cfg.d, dtype=dt)
    return p


class ProjectionHead:
    """Dataset-specific projection of standardized raw arc features to ``d_proj``.

    Standardization statistics cover the raw columns only; the direction flag
    (last column) passes through unchanged.
    """

    def __init__(self, params: ParamStore, mean: np.ndarray, std: np.ndarray, cfg: ModelConfig):
        self.params = params
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.spec = cfg.proj_spec(len(self.mean) + 1)
        self.dtype = cfg.dtype
        self._cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()

    @property
    def d_in(self) -> int:
        return self.spec.layer_dims[0]

    @classmethod
    def fresh(cls, cfg: ModelConfig, graph: InteractionGraph, train_ids: np.ndarray | None, seed: int = 0):
        feats = graph.features if train_ids is None or len(train_ids) == 0 else graph.features[train_ids]
        if len(feats):
            mean = feats.mean(axis=0)
            std = feats.std(axis=0)
        else:
            mean = np.zeros(graph.d_raw)
            std = np.ones(graph.d_raw)
        std = np.where(std > 1e-12, std, 1.0)
        gen = torch.Generator().manual_seed(int(seed) + 7919)
        params = ParamStore()
        init_mlp(params, cfg.proj_spec(graph.d_raw + 1), "proj", gen, cfg.dtype)
        return cls(params, mean, std, cfg)

    def arc_inputs(self, graph: InteractionGraph) -> torch.Tensor:
        """Standardized arc features ``[2E, d_raw + 1]`` (cached per graph)."""
        if graph.d_raw + 1 != self.d_in:
            raise ValueError(f"head expects {self.d_in - 1} raw features, graph has {graph.d_raw}")
        x = self._cache.get(graph)
        if x is None:
            raw = graph.arc_features()
            raw[:, :-1] = (raw[:, :-1] - self.mean) / self.std
            x = torch.as_tensor(raw, dtype=self.dtype)
            self._cache[graph] = x
        return x

    def project(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_apply(self.spec, self.params, x, "proj")

    def copy(self) -> "ProjectionHead":
        h = ProjectionHead.__new__(ProjectionHead)
        h.params, h.mean, h.std = self.params.copy(), self.mean.copy(), self.std.copy()
        h.spec, h.dtype, h._cache = self.spec, self.dtype, weakref.WeakKeyDictionary()
        return h


def distmult_message(h_x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return h_x * w


def probability(score):
    if isinstance(score, torch.Tensor):
        return torch.sigmoid(score)
    return 1.0 / (1.0 + np.exp(-np.asarray(score, dtype=np.float64)))


def view_operator(view: GraphView, d: int) -> tuple[np.ndarray, ArcOperator]:
    """Active arc ids and the cached sparse operator of ``view`` for width ``d``."""
    cache = view.__dict__.setdefault("_operators", {})
    if d not in cache:
        a = view.graph.arcs
        active = view.active_arcs
        # (dst, src) order lets the operator use the weights without a gather
        active = active[np.lexsort((a.src[active], a.dst[active]))]
        op = ArcOperator(torch.as_tensor(a.src[active]), torch.as_tensor(a.dst[active]), view.graph.num_nodes, d)
        cache[d] = (active, op)
    return cache[d]


class NBFRec:
    """Backbone parameters plus the forward computations that use them."""

    def __init__(self, cfg: ModelConfig, backbone: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.backbone = backbone if backbone is not None else init_backbone(cfg, seed)

    # -- pieces -------------------------------------------------------------

    def embed_edges(self, head: ProjectionHead | None, arc_inputs: torch.Tensor) -> torch.Tensor:
        """``g(r) = MLP_emb(MLP_proj(r))`` for every arc, ``[A, d]``."""
        if self.cfg.structural_only:
            return self.backbone["edge_const"].expand(arc_inputs.shape[0], self.cfg.d)
        if head is None:
            raise ValueError("a projection head is required unless structural_only is set")
        if arc_inputs.shape[-1] != head.d_in:
            raise ValueError(f"arc feature width {arc_inputs.shape[-1]} != head input width {head.d_in}")
        return mlp_apply(self.cfg.emb_spec, self.backbone, head.project(arc_inputs), "emb")

    def init_states(self, num_nodes: int, queries: Sequence[int] | torch.Tensor) -> torch.Tensor:
        q = torch.as_tensor(queries, dtype=torch.long).reshape(-1)
        if len(q) and (q.min() < 0 or q.max() >= num_nodes):
            raise ValueError(f"query node out of range [0, {num_nodes})")
        b = self.backbone["boundary"]
        onehot = torch.zeros(num_nodes, len(q), dtype=b.dtype)
        onehot[q, torch.arange(len(q))] = 1.0
        return onehot.unsqueeze(-1) * b

    def edge_weights(self, t: int, arc_embeds: torch.Tensor) -> torch.Tensor:
        return mlp_apply(self.cfg.layer_spec, self.backbone, arc_embeds, f"layer{t}.mlp")

    def propagate_layer(
        self,
        t: int,
        H_prev: torch.Tensor,
        H0: torch.Tensor,
        view: GraphView,
        arc_embeds: torch.Tensor,
        arc_probe: Callable[[np.ndarray], None] | None = None,
        weights: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if not 1 <= t <= self.cfg.T:
            raise ValueError(f"layer index {t} outside 1..{self.cfg.T}")
        arc_ids, op = view_operator(view, self.cfg.d)
        if arc_probe is not None:
            arc_probe(arc_ids)
        w = self.edge_weights(t, arc_embeds) if weights is None else weights
        msg_sum = op(w[torch.as_tensor(arc_ids)], H_prev.permute(0, 2, 1)).permute(0, 2, 1)
        agg = msg_sum + H0
        p = self.backbone
        W = p[f"layer{t}.update.0.weight"]
        d = self.cfg.d
        # linear([h_prev ; agg]) without materializing the concatenation
        z = torch.addmm(p[f"layer{t}.update.0.bias"], H_prev.reshape(-1, d), W[:, :d].T)
        z = z.addmm_(agg.reshape(-1, d), W[:, d:].T).reshape(H_prev.shape)
        z = layer_norm(z, p[f"layer{t}.norm.gamma"], p[f"layer{t}.norm.beta"], self.cfg.ln_eps)
        return torch.relu(z)

    def forward(
        self,
        head: ProjectionHead | None,
        view: GraphView,
        queries: Sequence[int],
        arc_probe: Callable[[np.ndarray], None] | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Run all layers for a batch of query users; returns ``(H_T, H_0)``."""
        g = view.graph
        q = np.asarray(queries, dtype=np.int64).reshape(-1)
        if len(q) and (q.min() < 0 or q.max() >= g.num_users):
            raise ValueError("queries must be user nodes")
        if self.cfg.structural_only:
            arc_inputs = torch.zeros(g.arcs.num_arcs, 0, dtype=self.cfg.dtype)
        else:
            if head is None:
                raise ValueError("a projection head is required unless structural_only is set")
            arc_inputs = head.arc_inputs(g)
        arc_embeds = self.embed_edges(head, arc_inputs)
        H0 = self.init_states(g.num_nodes, q)
        H = H0
        for t in range(1, self.cfg.T + 1):
            H = self.propagate_layer(t, H, H0, view, arc_embeds, arc_probe)
        return H, H0

    def score_nodes(self, H: torch.Tensor, H0: torch.Tensor, qidx, nodes) -> torch.Tensor:
        """Scores for (query row, node) pairs; ``qidx`` and ``nodes`` broadcast."""
        qidx = torch.as_tensor(qidx, dtype=torch.long)
        nodes = torch.as_tensor(nodes, dtype=torch.long)
        x = torch.cat([H[nodes, qidx], H0[nodes, qidx]], dim=-1)
        return mlp_apply(self.cfg.score_spec, self.backbone, x, "score").squeeze(-1)

    def score_items(self, head, view: GraphView, queries: Sequence[int], arc_probe=None) -> torch.Tensor:
        """Scores of every item for each query user, ``[B, num_items]``."""
        H, H0 = self.forward(head, view, queries, arc_probe)
        nu = view.graph.num_users
        x = torch.cat([H[nu:], H0[nu:]], dim=-1)
        return mlp_apply(self.cfg.score_spec, self.backbone, x, "score").squeeze(-1).T

    def score_candidates(self, head, view: GraphView | InteractionGraph, u: int, candidates: Sequence[int]) -> torch.Tensor:
        """Scores of candidate item *nodes* for one query user (one forward pass)."""
        if isinstance(view, InteractionGraph):
            view = GraphView(view)
        g = view.graph
        if not 0 <= int(u) < g.num_users:
            raise ValueError(f"query {u} is not a user node")
        cand = np.asarray(candidates, dtype=np.int64).reshape(-1)
        if len(cand) == 0:
            return torch.zeros(0, dtype=self.cfg.dtype)
        if cand.min() < g.num_users or cand.max() >= g.num_nodes:
            raise ValueError("candidates must be item nodes")
        H, H0 = self.forward(head, view, [int(u)])
        return self.score_nodes(H, H0, torch.zeros(len(cand), dtype=torch.long), cand)

    def copy(self) -> "NBFRec":
        return NBFRec(self.cfg, self.backbone.copy())
