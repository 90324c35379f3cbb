import math

import numpy as np
import pytest
import torch

from nbfrec.autodiff import Adam
from nbfrec.graph import InteractionGraph, split_edges
from nbfrec.model import ModelConfig, NBFRec, ProjectionHead
from nbfrec.synth import SynthSpec, generate
from nbfrec.training import (
    EdgeSet,
    NumericalError,
    SamplingError,
    Task,
    TrainConfig,
    fit,
    multi_epoch,
    nbf_loss,
    sample_strict_negatives,
    train_epoch,
)

TINY = ModelConfig(d=8, d_proj=4, T=3, emb_hidden=(8,), score_hidden=(8,), precision="float64")


def make_task(g, name="g", cfg=TINY, seed=0, ratios=(0.8, 0.1, 0.1)):
    split = split_edges(g, ratios, seed)
    return Task(name, g, split, ProjectionHead.fresh(cfg, g, split.train, seed))


def synth_graph(seed=0, **kw):
    spec = dict(num_users=40, num_items=40, num_clusters=2, p_intra=0.2, p_inter=0.05, feature_dim=4, seed=seed)
    spec.update(kw)
    return generate(SynthSpec(**spec)).graph


# -- negatives ----------------------------------------------------------------


def test_negatives_are_strict_and_shaped():
    g = synth_graph()
    train = np.arange(g.num_edges)
    es = EdgeSet(g, train)
    rng = np.random.default_rng(0)
    u, i = sample_strict_negatives(es, g.num_users, g.num_items, g.users, g.items, 2, rng)
    assert u.shape == i.shape == (g.num_edges, 2)
    assert not es.contains(u, i).any()
    # each negative corrupts exactly one side of its positive
    same_user = u == g.users[:, None]
    same_item = i == g.items[:, None]
    assert np.all(same_user ^ same_item)


def test_tail_corruption_is_forced_to_the_only_free_item():
    n_items = 6
    g = InteractionGraph(2, n_items, [0] * 5 + [1], list(range(5)) + [5], np.zeros((6, 0)))
    es = EdgeSet(g, np.arange(6))
    u, i = sample_strict_negatives(es, 2, n_items, [0] * 50, [0] * 50, 4, np.random.default_rng(1))
    tail = u == 0
    assert tail.any()
    assert np.all(i[tail] == 5)


def test_uniform_tail_corruption():
    g = InteractionGraph(1, 11, [0], [0], np.zeros((1, 0)))
    es = EdgeSet(g, np.arange(1))
    u, i = sample_strict_negatives(es, 1, 11, [0], [0], 10_000, np.random.default_rng(2))
    counts = np.bincount(i.ravel(), minlength=11)
    assert counts[0] == 0
    assert np.all(np.abs(counts[1:] - 1000) <= 100), counts


def test_impossible_negatives_raise():
    g = InteractionGraph(2, 2, [0, 0, 1, 1], [0, 1, 0, 1], np.zeros((4, 0)))
    es = EdgeSet(g, np.arange(4))
    with pytest.raises(SamplingError):
        sample_strict_negatives(es, 2, 2, [0], [0], 3, np.random.default_rng(0))


# -- loss ---------------------------------------------------------------------


def test_loss_at_zero_scores():
    loss = nbf_loss(torch.zeros(5, dtype=torch.float64), torch.zeros(5, 2, dtype=torch.float64))
    assert abs(loss.item() - 2 * math.log(2)) <= 1e-12
    assert abs(loss.item() - 1.3863) <= 1e-4


def test_loss_perfect_separation_and_clamping():
    perfect = nbf_loss(torch.tensor([50.0]), torch.tensor([[-50.0, -50.0]]))
    assert perfect.item() < 1e-12
    extreme = nbf_loss(torch.tensor([-1e30]), torch.tensor([[1e30]]))
    assert math.isfinite(extreme.item())
    assert abs(extreme.item() - 2 * -math.log(1e-12)) <= 1e-6


# -- epochs -------------------------------------------------------------------


def test_batch_edges_never_propagate():
    g = synth_graph(num_users=50, num_items=50, p_intra=0.35, p_inter=0.05)
    task = make_task(g)
    traversed = []

    def factory(batch):
        batch_arcs = set(np.flatnonzero(np.isin(g.arcs.edge_id, batch)).tolist())

        def probe(arc_ids):
            traversed.append(len(batch_arcs.intersection(arc_ids.tolist())))

        return probe

    model = NBFRec(TINY)
    cfg = TrainConfig(batch_size=64, n_negatives=2)
    stats = train_epoch(model, task, cfg, np.random.default_rng(0), Adam([model.backbone, task.head.params]), factory)
    assert len(traversed) == stats.batches * TINY.T
    assert sum(traversed) == 0


def _train_params(seed):
    g = synth_graph(seed=3)
    task = make_task(g, seed=seed)
    model = NBFRec(TINY, seed=seed)
    opt = Adam([model.backbone, task.head.params], lr=0.01)
    rng = np.random.default_rng(seed)
    for _ in range(2):
        train_epoch(model, task, TrainConfig(batch_size=32, n_negatives=3, seed=seed), rng, opt)
    return {**model.backbone.state_dict(), **task.head.params.state_dict()}


def test_training_is_deterministic():
    a, b = _train_params(5), _train_params(5)
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_loss_decreases_over_first_epochs():
    decreasing = 0
    for seed in range(3):
        g = generate(SynthSpec(num_users=40, num_items=40, num_clusters=2, p_intra=0.22, p_inter=0.03,
                               feature_dim=4, seed=seed)).graph
        assert 150 <= g.num_edges <= 250
        task = make_task(g, cfg=ModelConfig(), seed=seed, ratios=(1.0, 0.0, 0.0))
        model = NBFRec(ModelConfig(), seed=seed)
        opt = Adam([model.backbone, task.head.params], lr=1e-3)
        rng = np.random.default_rng(seed)
        losses = [train_epoch(model, task, TrainConfig(batch_size=32, seed=seed), rng, opt).mean_loss for _ in range(5)]
        decreasing += all(b < a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 2


class RecordingAdam(Adam):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.touched = set()

    def step(self):
        for name, t in self.named:
            if t.grad is not None and t.grad.abs().sum() > 0:
                self.touched.add(name)
        super().step()


def test_every_backbone_tensor_receives_gradient():
    g = synth_graph(seed=1, p_intra=0.4, p_inter=0.1)
    task = make_task(g, seed=1)
    model = NBFRec(TINY, seed=1)
    opt = RecordingAdam([model.backbone, task.head.params])
    train_epoch(model, task, TrainConfig(batch_size=32, n_negatives=4), np.random.default_rng(1), opt)
    assert set(model.backbone.names()) <= opt.touched


def test_non_finite_loss_raises():
    g = synth_graph()
    task = make_task(g)
    model = NBFRec(TINY)
    with torch.no_grad():
        model.backbone["score.0.bias"].fill_(float("nan"))
    with pytest.raises(NumericalError, match="parameter norms"):
        train_epoch(model, task, TrainConfig(batch_size=64), np.random.default_rng(0), Adam(model.backbone))


# -- multi-dataset scheduling -------------------------------------------------


def _sized_graph(n_edges, seed):
    rng = np.random.default_rng(seed)
    keys = rng.choice(30 * 30, n_edges, replace=False)
    return InteractionGraph(30, 30, keys // 30, keys % 30, rng.normal(size=(n_edges, 2)))


def test_round_robin_schedule_and_head_isolation():
    ga, gb = _sized_graph(125, 0), _sized_graph(375, 1)
    ta, tb = make_task(ga, "A"), make_task(gb, "B")
    assert (len(ta.split.train), len(tb.split.train)) == (100, 300)
    model = NBFRec(TINY)
    order, leaks = [], []

    def hook(name):
        order.append(name)
        other = tb if name == "A" else ta
        leaks.append(sum(float(other.head.params.grad(k).abs().sum()) for k in other.head.params))

    cfg = TrainConfig(batch_size=50, n_negatives=2)
    opts = {t.name: Adam(t.head.params) for t in (ta, tb)}
    stats = multi_epoch(model, [ta, tb], cfg, np.random.default_rng(0), Adam(model.backbone), opts, hook)
    assert stats.batches == 12
    assert order == ["A", "B"] * 6
    assert leaks == [0.0] * 12


def test_single_task_multi_epoch_matches_train_epoch():
    g = synth_graph(seed=2)
    params = []
    for runner in ("single", "multi"):
        task = make_task(g, seed=2)
        model = NBFRec(TINY, seed=2)
        cfg = TrainConfig(batch_size=32, n_negatives=2, lr=0.01)
        rng = np.random.default_rng(9)
        if runner == "single":
            train_epoch(model, task, cfg, rng, Adam([model.backbone, task.head.params], lr=0.01))
        else:
            multi_epoch(model, [task], cfg, rng, Adam(model.backbone, lr=0.01), {"g": Adam(task.head.params, lr=0.01)})
        params.append({**model.backbone.state_dict(), **task.head.params.state_dict()})
    assert all(torch.allclose(params[0][k], params[1][k], atol=1e-12) for k in params[0])


def test_fit_rejects_duplicate_names():
    g = synth_graph()
    with pytest.raises(ValueError, match="duplicate"):
        fit(NBFRec(TINY), [make_task(g, "x"), make_task(g, "x")], TrainConfig(epochs=1))


def test_fit_zero_epochs_keeps_initial_parameters():
    g = synth_graph()
    task = make_task(g)
    model = NBFRec(TINY)
    before = model.backbone.state_dict()
    result = fit(model, task, TrainConfig(epochs=0))
    assert result.best_epoch == 0 and result.history == []
    assert all(torch.equal(before[k], model.backbone[k]) for k in before)


def test_fit_restores_best_validation_epoch():
    g = synth_graph(seed=4)
    task = make_task(g, seed=4)
    model = NBFRec(TINY, seed=4)
    seen = {}

    def on_epoch(epoch, stats):
        seen[epoch] = model.backbone.state_dict()

    result = fit(model, task, TrainConfig(epochs=4, batch_size=32, lr=0.01, patience=2), on_epoch=on_epoch)
    key = "valid_hits@10"
    scores = [row[key] for row in result.history]
    assert result.best_valid >= max(scores)
    if result.best_epoch > 0:
        best = seen[result.best_epoch]
        assert all(torch.equal(best[k], model.backbone[k]) for k in best)
    ran = len(result.history)
    assert ran == 4 or (ran >= 2 and all(s <= result.best_valid for s in scores[-2:]))
