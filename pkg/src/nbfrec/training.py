"""Loss, strict negative sampling and the epoch loop with batch-edge removal."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import Adam, ParamStore, backward
from .evaluation import evaluate
from .graph import DatasetSplit, GraphView, InteractionGraph, mask_edges
from .model import NBFRec, ProjectionHead

log = logging.getLogger(__name__)

LOG_CLAMP = math.log(1e-12)


class NumericalError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    n_negatives: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    seed: int = 0
    patience: int = 5
    valid_metric: str = "hits@10"
    early_stopping: bool = True
    max_valid_queries: int | None = None

    def __post_init__(self):
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})


# -- negatives ----------------------------------------------------------------


class EdgeSet:
    """O(log E) membership for (user, item) pairs via sorted integer keys."""

    def __init__(self, g: InteractionGraph, edge_ids: np.ndarray):
        self.num_items = g.num_items
        self.keys = np.sort(g.edge_keys[edge_ids])

    def contains(self, users, items) -> np.ndarray:
        q = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == q if len(self.keys) else np.zeros(q.shape, dtype=bool)


def sample_strict_negatives(
    train: EdgeSet,
    num_users: int,
    num_items: int,
    pos_users,
    pos_items,
    n: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` corrupted pairs per positive, none of them in ``train``.

    Each attempt flips a coin: corrupt the tail (uniform item) or the head
    (uniform user).  Rejected attempts are redrawn from scratch, coin
    included, until the pair is absent.  Returns (users, items), each ``[P, n]``.
    """
    pu = np.asarray(pos_users, dtype=np.int64).reshape(-1, 1)
    pi = np.asarray(pos_items, dtype=np.int64).reshape(-1, 1)
    P = len(pu)
    users = np.broadcast_to(pu, (P, n)).copy()
    items = np.broadcast_to(pi, (P, n)).copy()
    todo = np.ones((P, n), dtype=bool)
    rejections = np.zeros(P, dtype=np.int64)
    limit = 100 * n
    while todo.any():
        rows, cols = np.nonzero(todo)
        head = rng.random(len(rows)) < 0.5
        users[rows, cols] = np.where(head, rng.integers(0, num_users, len(rows)), pu[rows, 0])
        items[rows, cols] = np.where(head, pi[rows, 0], rng.integers(0, num_items, len(rows)))
        bad = train.contains(users[rows, cols], items[rows, cols])
        todo[:] = False
        todo[rows[bad], cols[bad]] = True
        np.add.at(rejections, rows[bad], 1)
        if (rejections > limit).any():
            p = int(np.argmax(rejections > limit))
            raise SamplingError(
                f"no strict negative found for positive ({int(pu[p, 0])}, {int(pi[p, 0])}) "
                f"after {limit} rejections: both corrupted sides are (nearly) fully connected"
            )
    return users, items


def negatives_for(g: InteractionGraph, train_ids: np.ndarray, user: int, item: int, n: int, rng) -> list[tuple[int, int]]:
    u, i = sample_strict_negatives(EdgeSet(g, train_ids), g.num_users, g.num_items, [user], [item], n, rng)
    return list(zip(u[0].tolist(), i[0].tolist()))


# -- loss ---------------------------------------------------------------------


def nbf_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """Mean over positives of ``-log p(pos) - mean_i log(1 - p(neg_i))``.

    ``p`` is the logistic link; both logs are clamped below at ``log(1e-12)``.
    """
    pos_term = torch.clamp(F.logsigmoid(pos_scores), min=LOG_CLAMP)
    neg_term = torch.clamp(F.logsigmoid(-neg_scores), min=LOG_CLAMP).mean(dim=-1)
    return -(pos_term + neg_term).mean()


def batch_loss(
    model: NBFRec,
    head: ProjectionHead | None,
    view: GraphView,
    pos_users,
    pos_items,
    neg_users,
    neg_items,
    arc_probe: Callable[[np.ndarray], None] | None = None,
) -> torch.Tensor:
    """Loss of one batch; items are item indices (not node ids).

    One forward pass per distinct query user serves that user's positives and
    tail-corrupted negatives together.
    """
    g = view.graph
    pu = np.asarray(pos_users, dtype=np.int64)
    nu_ = np.asarray(neg_users, dtype=np.int64)
    queries = np.unique(np.concatenate([pu, nu_.ravel()]))
    H, H0 = model.forward(head, view, queries, arc_probe)
    s_pos = model.score_nodes(H, H0, np.searchsorted(queries, pu), g.item_node(pos_items))
    s_neg = model.score_nodes(H, H0, np.searchsorted(queries, nu_), g.item_node(neg_items))
    return nbf_loss(s_pos, s_neg)


# -- epochs -------------------------------------------------------------------


@dataclass
class EpochStats:
    mean_loss: float
    batches: int
    wall_time: float


@dataclass
class Task:
    """One dataset being trained: graph, split, head and its sampling state."""

    name: str
    graph: InteractionGraph
    split: DatasetSplit
    head: ProjectionHead | None
    base_view: GraphView = field(init=False)
    train_set: EdgeSet = field(init=False)

    def __post_init__(self):
        if len(self.split.train) == 0:
            raise ValueError(f"{self.name}: empty train split")
        # convolution graph during training: train edges only
        self.base_view = mask_edges(self.graph, np.concatenate([self.split.valid, self.split.test]))
        self.train_set = EdgeSet(self.graph, self.split.train)

    def batches(self, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
        perm = self.split.train[rng.permutation(len(self.split.train))]
        return [perm[s : s + batch_size] for s in range(0, len(perm), batch_size)]


def task_loss(model: NBFRec, task: Task, batch: np.ndarray, cfg: TrainConfig, rng, arc_probe=None) -> torch.Tensor:
    g = task.graph
    view = task.base_view.mask(batch)
    pu, pi = g.users[batch], g.items[batch]
    nu_, ni = sample_strict_negatives(task.train_set, g.num_users, g.num_items, pu, pi, cfg.n_negatives, rng)
    return batch_loss(model, task.head, view, pu, pi, nu_, ni, arc_probe)


def _check_finite(loss: torch.Tensor, batch_id: int, stores: list[ParamStore]):
    if not torch.isfinite(loss):
        norms = {k: v for s in stores for k, v in s.norms().items()}
        raise NumericalError(f"non-finite loss {loss.item()} at batch {batch_id}; parameter norms: {norms}")


def train_epoch(
    model: NBFRec,
    task: Task,
    cfg: TrainConfig,
    rng: np.random.Generator,
    optimizer: Adam,
    arc_probe_factory: Callable[[np.ndarray], Callable] | None = None,
) -> EpochStats:
    """Shuffle train edges, then per batch: mask the batch, sample, forward, backward, step.

    ``arc_probe_factory(batch)`` may return a callable that receives the arc
    ids used by every propagation layer of that batch's forward pass.
    """
    start = time.perf_counter()
    stores = [model.backbone] + ([task.head.params] if task.head is not None else [])
    losses = []
    for b, batch in enumerate(task.batches(cfg.batch_size, rng)):
        optimizer.zero_grad()
        probe = arc_probe_factory(batch) if arc_probe_factory else None
        loss = task_loss(model, task, batch, cfg, rng, probe)
        _check_finite(loss, b, stores)
        backward(loss, stores)
        optimizer.step()
        losses.append(loss.item())
    return EpochStats(float(np.mean(losses)), len(losses), time.perf_counter() - start)


def _cycled(task: Task, batch_size: int, rng: np.random.Generator):
    while True:
        yield from task.batches(batch_size, rng)


def multi_epoch(
    model: NBFRec,
    tasks: list[Task],
    cfg: TrainConfig,
    rng: np.random.Generator,
    backbone_opt: Adam,
    head_opts: dict[str, Adam],
    grad_hook: Callable[[str], None] | None = None,
) -> EpochStats:
    """Round-robin epoch over several datasets sharing one backbone.

    A cycle takes one batch from every dataset in order.  Each batch
    backpropagates into the backbone and its own head only; the head steps
    right after its batch, the backbone once per cycle on the gradients
    accumulated over the cycle.  The epoch length is the batch count of the
    largest dataset; smaller ones restart with a fresh shuffle.

    With a single dataset this performs the same updates as ``train_epoch``.
    """
    start = time.perf_counter()
    heads = [t.head.params for t in tasks if t.head is not None]
    first = [t.batches(cfg.batch_size, rng) for t in tasks]
    cycles = max(len(b) for b in first)
    streams = [iter(b) for b in first]
    losses = []
    for c in range(cycles):
        model.backbone.zero_grad()
        for k, task in enumerate(tasks):
            batch = next(streams[k], None)
            if batch is None:
                streams[k] = _cycled(task, cfg.batch_size, rng)
                batch = next(streams[k])
            for h in heads:
                h.zero_grad()
            loss = task_loss(model, task, batch, cfg, rng)
            _check_finite(loss, c, [model.backbone] + heads)
            backward(loss, [model.backbone] + heads)
            if grad_hook is not None:
                grad_hook(task.name)
            if task.head is not None:
                head_opts[task.name].step()
            losses.append(loss.item())
        backbone_opt.step()
    return EpochStats(float(np.mean(losses)), len(losses), time.perf_counter() - start)


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    best_valid: float


def _snapshot(model: NBFRec, tasks: list[Task]):
    return model.backbone.state_dict(), [t.head.params.state_dict() if t.head is not None else None for t in tasks]


def _restore(model: NBFRec, tasks: list[Task], snap):
    model.backbone.load(snap[0])
    for t, h in zip(tasks, snap[1]):
        if h is not None:
            t.head.params.load(h)


def fit(
    model: NBFRec,
    tasks: Task | list[Task],
    cfg: TrainConfig,
    on_epoch: Callable[[int, EpochStats], None] | None = None,
    grad_hook: Callable[[str], None] | None = None,
) -> FitResult:
    """Train for up to ``cfg.epochs`` epochs, keeping the best-validation parameters.

    Validation score is the mean of ``cfg.valid_metric`` over datasets.  The
    starting point counts as epoch 0 for model selection.  Without early
    stopping (or validation edges) the final parameters are kept.
    """
    tasks = [tasks] if isinstance(tasks, Task) else list(tasks)
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate dataset names: {names}")
    rng = np.random.default_rng(cfg.seed)
    betas = (cfg.beta1, cfg.beta2)
    backbone_opt = Adam(model.backbone, lr=cfg.lr, betas=betas, eps=cfg.adam_eps)
    head_opts = {t.name: Adam(t.head.params, lr=cfg.lr, betas=betas, eps=cfg.adam_eps) for t in tasks if t.head is not None}
    use_valid = cfg.early_stopping and all(len(t.split.valid) for t in tasks)

    def valid_score() -> float:
        scores = [
            evaluate(model, t.head, t.graph, t.split, "valid", [cfg.valid_metric], seed=cfg.seed,
                     max_queries=cfg.max_valid_queries).metrics[cfg.valid_metric]
            for t in tasks
        ]
        return float(np.mean(scores))

    history = []
    best = valid_score() if use_valid else -math.inf
    best_epoch, snap, stale = 0, _snapshot(model, tasks), 0
    for epoch in range(1, cfg.epochs + 1):
        stats = multi_epoch(model, tasks, cfg, rng, backbone_opt, head_opts, grad_hook)
        row = {"epoch": epoch, "loss": stats.mean_loss, "batches": stats.batches, "time": stats.wall_time}
        if use_valid:
            v = valid_score()
            row[f"valid_{cfg.valid_metric}"] = v
            if v > best:
                best, best_epoch, snap, stale = v, epoch, _snapshot(model, tasks), 0
            else:
                stale += 1
        else:
            best_epoch = epoch
        history.append(row)
        log.info("epoch %d %s", epoch, row)
        if on_epoch:
            on_epoch(epoch, stats)
        if use_valid and stale >= cfg.patience:
            break
    if use_valid:
        _restore(model, tasks, snap)
    return FitResult(history, best_epoch, best)
