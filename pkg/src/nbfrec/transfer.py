"""End-to-end, zero-shot and fine-tuning workflows plus the transfer matrix."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .evaluation import DEFAULT_METRICS, RankingReport, evaluate
from .graph import DatasetSplit, InteractionGraph
from .model import ModelConfig, NBFRec, ProjectionHead
from .training import FitResult, Task, TrainConfig, fit

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    name: str
    graph: InteractionGraph
    split: DatasetSplit


@dataclass
class TrainedModel:
    model: NBFRec
    heads: dict[str, ProjectionHead]
    fit: FitResult | None
    reports: dict[str, RankingReport] = field(default_factory=dict)

    def checkpoint(self, meta: dict | None = None) -> Checkpoint:
        return Checkpoint.from_model(self.model, self.heads, meta)


def _fresh_head(cfg: ModelConfig, ds: Dataset, seed: int) -> ProjectionHead:
    return ProjectionHead.fresh(cfg, ds.graph, ds.split.train, seed)


def multi_graph_pretrain(
    datasets: Sequence[Dataset],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    grad_hook=None,
    on_epoch=None,
) -> TrainedModel:
    """One shared backbone, one head per dataset, round-robin batches."""
    if not datasets:
        raise ValueError("need at least one dataset")
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate dataset names: {names}")
    model = NBFRec(cfg, seed=tcfg.seed)
    heads = {d.name: _fresh_head(cfg, d, tcfg.seed + k) for k, d in enumerate(datasets)}
    tasks = [Task(d.name, d.graph, d.split, heads[d.name]) for d in datasets]
    result = fit(model, tasks, tcfg, on_epoch=on_epoch, grad_hook=grad_hook)
    return TrainedModel(model, heads, result)


def end_to_end(
    ds: Dataset,
    cfg: ModelConfig,
    tcfg: TrainConfig,
    metrics: Sequence[str] = DEFAULT_METRICS,
    candidates: str = "full",
    on_epoch=None,
) -> TrainedModel:
    trained = multi_graph_pretrain([ds], cfg, tcfg, on_epoch=on_epoch)
    trained.reports[ds.name] = evaluate(
        trained.model, trained.heads[ds.name], ds.graph, ds.split, "test", metrics, candidates, seed=tcfg.seed
    )
    return trained


def zero_shot(
    ckpt: Checkpoint,
    ds: Dataset,
    seed: int = 0,
    metrics: Sequence[str] = DEFAULT_METRICS,
    candidates: str = "full",
) -> RankingReport:
    """Evaluate the checkpoint's backbone on ``ds`` with a fresh random head; no updates."""
    model = ckpt.model()
    head = _fresh_head(model.cfg, ds, seed)
    return evaluate(model, head, ds.graph, ds.split, "test", metrics, candidates, seed=seed)


def fine_tune(
    ckpt: Checkpoint,
    ds: Dataset,
    tcfg: TrainConfig,
    metrics: Sequence[str] = DEFAULT_METRICS,
    candidates: str = "full",
    on_epoch=None,
) -> TrainedModel:
    """Update the pretrained backbone and a fresh head on the target's train edges.

    The head is built exactly as in :func:`zero_shot` with ``tcfg.seed``, so
    zero epochs reproduce the zero-shot report.
    """
    model = ckpt.model()
    head = _fresh_head(model.cfg, ds, tcfg.seed)
    result = fit(model, Task(ds.name, ds.graph, ds.split, head), tcfg, on_epoch=on_epoch)
    trained = TrainedModel(model, {ds.name: head}, result)
    trained.reports[ds.name] = evaluate(model, head, ds.graph, ds.split, "test", metrics, candidates, seed=tcfg.seed)
    return trained


@dataclass
class TransferMatrix:
    sources: list[str]
    targets: list[str]
    metric: str
    reports: dict[tuple[str, str], RankingReport]  # (target, source) -> report

    def raw(self) -> np.ndarray:
        return np.array([[self.reports[(t, s)].metrics[self.metric] for s in self.sources] for t in self.targets])

    def normalized(self) -> np.ndarray:
        raw = self.raw()
        peak = raw.max(axis=1, keepdims=True)
        return np.divide(raw, peak, out=np.zeros_like(raw), where=peak > 0)

    def to_csv(self) -> str:
        raw, norm = self.raw(), self.normalized()
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["target\\source", *self.sources])
        for r, t in enumerate(self.targets):
            w.writerow([t, *(f"{raw[r, c]:.6g};{norm[r, c]:.6g}" for c in range(len(self.sources)))])
        return out.getvalue()


def transfer_matrix(
    datasets: Sequence[Dataset],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    metric: str = "hits@10",
    candidates: str = "full",
    checkpoints: dict[str, Checkpoint] | None = None,
) -> TransferMatrix:
    """Pretrain a backbone per source and zero-shot it on every target.

    Diagonal cells use a fresh head on the source's own graph as well.
    ``checkpoints`` may supply already-trained source backbones by name.
    """
    if len(datasets) < 2:
        raise ValueError("a transfer matrix needs at least two datasets")
    checkpoints = dict(checkpoints or {})
    reports = {}
    for src in datasets:
        if src.name not in checkpoints:
            checkpoints[src.name] = multi_graph_pretrain([src], cfg, tcfg).checkpoint()
        for tgt in datasets:
            rep = zero_shot(checkpoints[src.name], tgt, tcfg.seed, [metric], candidates)
            reports[(tgt.name, src.name)] = rep
            log.info("transfer %s -> %s: %s", src.name, tgt.name, rep.metrics)
    names = [d.name for d in datasets]
    return TransferMatrix(names, names, metric, reports)
