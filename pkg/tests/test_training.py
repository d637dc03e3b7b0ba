"""Loss combination, masking, the training loop, and the experiment grid."""

import numpy as np
import pytest

from floorgraph.autodiff import Tape
from floorgraph.model import Model, ModelConfig, forward_graph, instance_a0_channels, prepare_instances
from floorgraph.synthgen import GenParams, generate_corpus, generate_record
from floorgraph.training import (
    CSV_HEADER,
    GridCell,
    LossConfig,
    TrainConfig,
    TrainHistory,
    TrainingDiverged,
    ablation_grid,
    attribute_set_grid,
    cell_rows,
    completion_grid,
    edge_bce,
    learning_rate,
    pair_mask,
    run_experiment_grid,
    total_loss,
    train,
)

TINY_MODEL = dict(k_iterations=1, gat_hidden=4, scoring_mlp_dims=(4, 1), decoder_mlp_dims=(4, 1))


@pytest.fixture(scope="module")
def tiny_corpus():
    return generate_corpus(50, GenParams(min_rooms=4, max_rooms=8, grid_w=8, grid_h=8), seed=77)


def _prepped_instance(seed=0, task="generate", observe=0.6):
    record = generate_record(GenParams(min_rooms=5, max_rooms=7, grid_w=8, grid_h=8), seed=seed)
    cfg = ModelConfig(**TINY_MODEL)
    fm = record.features.select_sets((1,))
    model = Model.initialize(cfg, fm.f, seed=seed, feature_sets=(1,), feature_layout=fm.layout)
    inst = prepare_instances(model, [record], task, observe, seed=seed)[0]
    return model, inst


# ----------------------------------------------------------------------
# edge_bce

def bce_loop_oracle(pred, target, mask):
    total, count = 0.0, 0.0
    eps = 1e-7
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if mask[i, j] <= 0:
                continue
            p = min(max(pred[i, j], eps), 1 - eps)
            y = target[i, j]
            total += -(y * np.log(p) + (1 - y) * np.log(1 - p)) * mask[i, j]
            count += mask[i, j]
    return total / count


def test_edge_bce_perfect_prediction_is_clamp_floor():
    tape = Tape()
    target = np.array([[0.0, 1.0], [1.0, 0.0]])
    mask = np.triu(np.ones((2, 2)), k=1)
    loss = edge_bce(tape, tape.leaf(target), target, mask)
    assert loss.item() == pytest.approx(1e-7, rel=1e-2)


def test_edge_bce_uniform_half_is_log_two():
    tape = Tape()
    n = 4
    pred = np.full((n, n), 0.5)
    target = np.zeros((n, n))
    mask = np.triu(np.ones((n, n)), k=1)
    loss = edge_bce(tape, tape.leaf(pred), target, mask)
    assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_edge_bce_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(25):
        n = 6
        pred = rng.uniform(0.01, 0.99, (n, n))
        target = (rng.random((n, n)) > 0.6).astype(float)
        mask = np.triu((rng.random((n, n)) > 0.3).astype(float), k=1)
        if mask.sum() == 0:
            mask[0, 1] = 1.0
        tape = Tape()
        loss = edge_bce(tape, tape.leaf(pred), target, mask)
        assert loss.item() == pytest.approx(bce_loop_oracle(pred, target, mask), abs=1e-12)


# ----------------------------------------------------------------------
# total_loss

def test_total_loss_lambda_zero_reduces_to_door_terms(  ):
    model, inst = _prepped_instance()
    mask = pair_mask(inst, "generate")

    def compute(l1, l2):
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in model.params.items()}
        out = forward_graph(tape, leaves, model.config, inst.features.x, instance_a0_channels(inst))
        return total_loss(tape, out, inst.target, mask, LossConfig(lambda1=l1, lambda2=l2)).item()

    base = compute(0.0, 0.0)
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in model.params.items()}
    out = forward_graph(tape, leaves, model.config, inst.features.x, instance_a0_channels(inst))
    door_terms = edge_bce(tape, out.p["door"], inst.target.door, mask).item()
    for step in out.per_iteration:
        door_terms += edge_bce(tape, step["door"], inst.target.door, mask).item()
    assert base == pytest.approx(door_terms, abs=1e-12)


def test_total_loss_k0_is_final_combination_only():
    record = generate_record(GenParams(min_rooms=5, max_rooms=7, grid_w=8, grid_h=8), seed=1)
    cfg = ModelConfig(k_iterations=0, gat_hidden=4, scoring_mlp_dims=(4, 1), decoder_mlp_dims=(4, 1))
    fm = record.features.select_sets((1,))
    model = Model.initialize(cfg, fm.f, seed=0, feature_sets=(1,), feature_layout=fm.layout)
    inst = prepare_instances(model, [record], "generate")[0]
    mask = pair_mask(inst, "generate")
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in model.params.items()}
    out = forward_graph(tape, leaves, model.config, inst.features.x, instance_a0_channels(inst))
    assert out.per_iteration == []
    loss = total_loss(tape, out, inst.target, mask, LossConfig())
    manual = (
        edge_bce(tape, out.p["door"], inst.target.door, mask).item()
        + edge_bce(tape, out.p["wall"], inst.target.wall, mask).item()
        + edge_bce(tape, out.p["spatial"], inst.target.spatial, mask).item()
    )
    assert loss.item() == pytest.approx(manual, abs=1e-12)


def test_total_loss_lambda_grid_runs():
    model, inst = _prepped_instance()
    mask = pair_mask(inst, "generate")
    values = set()
    for l1 in (0.25, 0.5, 1.0, 2.0):
        for l2 in (0.25, 0.5, 1.0, 2.0):
            tape = Tape()
            leaves = {k: tape.leaf(v) for k, v in model.params.items()}
            out = forward_graph(tape, leaves, model.config, inst.features.x, instance_a0_channels(inst))
            values.add(round(total_loss(tape, out, inst.target, mask, LossConfig(lambda1=l1, lambda2=l2)).item(), 9))
    assert len(values) == 16


def test_loss_nonnegative_and_zero_only_when_clamped_perfect():
    tape = Tape()
    target = np.array([[0.0, 1.0], [1.0, 0.0]])
    mask = np.triu(np.ones((2, 2)), k=1)
    loss = edge_bce(tape, tape.leaf(target), target, mask)
    assert 0 < loss.item() < 1e-6


# ----------------------------------------------------------------------
# masking

def test_pair_mask_excludes_diagonal_and_lower_triangle():
    model, inst = _prepped_instance()
    mask = pair_mask(inst, "generate")
    assert np.all(np.tril(mask) == 0)
    n = inst.target.n
    assert mask.sum() == n * (n - 1) / 2


def test_completion_mask_excludes_observed_pairs():
    model, inst = _prepped_instance(task="complete", observe=0.6)
    mask = pair_mask(inst, "complete")
    for i, j in inst.observed_pairs():
        assert mask[i, j] == 0.0
    assert mask.sum() > 0


def test_balanced_sample_mask_balances_classes():
    model, inst = _prepped_instance(seed=3)
    rng = np.random.default_rng(0)
    mask = pair_mask(inst, "generate", policy="balanced_sample", rng=rng)
    spatial = inst.target.spatial
    pos = sum(1 for i in range(inst.target.n) for j in range(i + 1, inst.target.n)
              if mask[i, j] > 0 and spatial[i, j] > 0.5)
    neg = sum(1 for i in range(inst.target.n) for j in range(i + 1, inst.target.n)
              if mask[i, j] > 0 and spatial[i, j] <= 0.5)
    assert neg == min(pos, neg)


def test_observed_pairs_get_zero_gradient():
    model, inst = _prepped_instance(task="complete", observe=0.6)
    mask = pair_mask(inst, "complete")
    observed = inst.observed_pairs()
    assert observed, "fixture should observe at least one pair"
    # gradient of the loss w.r.t. a leaf prediction matrix
    tape = Tape()
    pred = tape.sigmoid(tape.leaf(np.random.default_rng(0).normal(size=mask.shape)))
    loss = edge_bce(tape, pred, inst.target.spatial, mask)
    grads = tape.backward(loss)
    g = grads[tape._ops[0][2][0]]  # gradient at the sigmoid input leaf
    for i, j in observed:
        assert g[i, j] == 0.0
    assert np.any(g != 0.0)


# ----------------------------------------------------------------------
# schedule and loop

def test_learning_rate_schedule_drops():
    cfg = TrainConfig(lr=1e-4)
    assert learning_rate(cfg, 1) == 1e-4
    assert learning_rate(cfg, 59) == 1e-4
    assert learning_rate(cfg, 60) == 5e-5
    assert learning_rate(cfg, 119) == 5e-5
    assert learning_rate(cfg, 130) == pytest.approx(2.5e-5)
    assert learning_rate(cfg, 300) == pytest.approx(2.5e-5)


def test_train_config_validation():
    with pytest.raises(ValueError, match="increasing"):
        TrainConfig(lr_drops=((60, 0.5), (30, 0.5))).validate()
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=0).validate()


def test_train_loss_decreases_and_history_is_consistent(tiny_corpus):
    tc = TrainConfig(lr=1e-3, lr_drops=(), max_epochs=12, early_stop_patience=12, seed=5)
    model, hist = train(
        tiny_corpus, "generate", ModelConfig(**TINY_MODEL), LossConfig(), tc, feature_sets=(1,)
    )
    assert len(hist.train_loss) == 12
    # downward trend over the first 10 epochs, allowing a 3-epoch noise window
    first = hist.train_loss[:10]
    assert min(first[7:]) < first[0]
    assert all(first[i] <= first[0] for i in range(3, 10))
    assert hist.best_epoch >= 1
    assert len(hist.val_auc) == len(hist.train_loss) == len(hist.lr)
    rebuilt = TrainHistory.from_dict(hist.to_dict())
    assert rebuilt.train_loss == hist.train_loss


def test_train_same_seed_identical_history(tiny_corpus):
    tc = TrainConfig(lr=1e-3, lr_drops=(), max_epochs=4, early_stop_patience=4, seed=9)
    _, h1 = train(tiny_corpus, "generate", ModelConfig(**TINY_MODEL), LossConfig(), tc, feature_sets=(1,))
    _, h2 = train(tiny_corpus, "generate", ModelConfig(**TINY_MODEL), LossConfig(), tc, feature_sets=(1,))
    assert h1.train_loss == h2.train_loss
    assert h1.val_auc == h2.val_auc


def test_train_early_stopping_restores_best_epoch(tiny_corpus):
    tc = TrainConfig(lr=1e-3, lr_drops=(), max_epochs=15, early_stop_patience=3, seed=2)
    model, hist = train(tiny_corpus, "generate", ModelConfig(**TINY_MODEL), LossConfig(), tc, feature_sets=(1,))
    assert hist.stopped_epoch <= 15
    assert hist.best_epoch <= hist.stopped_epoch
    assert hist.stopped_epoch - hist.best_epoch >= 3 or hist.stopped_epoch == 15
    best_auc = hist.val_auc[hist.best_epoch - 1]["spatial"]
    assert all(best_auc >= d["spatial"] for d in hist.val_auc)


def test_train_completion_task_runs(tiny_corpus):
    tc = TrainConfig(lr=1e-3, lr_drops=(), max_epochs=3, early_stop_patience=3, seed=0)
    model, hist = train(
        tiny_corpus, "complete", ModelConfig(**TINY_MODEL), LossConfig(), tc,
        feature_sets=(1,), observe_fraction=0.6,
    )
    assert len(hist.train_loss) == 3


def test_train_divergence_aborts_with_context(tiny_corpus):
    # an absurd lr overflows the parameters to inf, and the next forward
    # pass produces a non-finite loss
    tc = TrainConfig(lr=1e200, lr_drops=(), max_epochs=5, early_stop_patience=5, seed=0)
    with pytest.raises((TrainingDiverged, ValueError)):
        train(tiny_corpus, "generate", ModelConfig(**TINY_MODEL), LossConfig(), tc, feature_sets=(1,))


# ----------------------------------------------------------------------
# grids and baselines

def test_ablation_grid_has_four_rows():
    cells = ablation_grid()
    assert [c.variant for c in cells] == ["full", "no_il", "no_mr_gat", "no_mr_decoder"]


def test_attribute_grid_has_eight_rows():
    assert len(attribute_set_grid()) == 8


def test_completion_grid_covers_fractions():
    cells = completion_grid()
    assert [c.observe_frac for c in cells] == [0.2, 0.4, 0.6, 0.8]
    assert all(c.task == "complete" for c in cells)


def test_grid_csv_deterministic(tiny_corpus):
    tc = TrainConfig(lr=1e-3, lr_drops=(), max_epochs=2, early_stop_patience=2, seed=0)
    base = ModelConfig(**TINY_MODEL)
    cells = [GridCell(experiment_id="smoke", variant="full", k=1, sets=(1,), seed=3)]
    csv1 = run_experiment_grid(tiny_corpus, cells, base, tc)
    csv2 = run_experiment_grid(tiny_corpus, cells, base, tc)
    assert csv1 == csv2
    lines = csv1.strip().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 4  # header + three relations
    assert lines[1].startswith("smoke,generate,full,1,1,,spatial,")


def test_baselines_run_and_report(tiny_corpus):
    from floorgraph.training import gat_knn_baseline, mlp_baseline

    tc = TrainConfig(lr=1e-3, lr_drops=(), max_epochs=2, early_stop_patience=2, seed=0)
    for fn in (mlp_baseline, gat_knn_baseline):
        model, report = fn(tiny_corpus, sets=(1,), train_cfg=tc)
        assert set(report.pooled) == {"spatial", "wall", "door"}
        assert all(0.0 <= report.pooled[r]["auc"] <= 1.0 for r in report.pooled)


def test_gat_knn_full_k_sees_every_node():
    # with k = N-1 the kNN graph is complete, so attention covers all pairs
    from floorgraph.floorplan import knn_graph

    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    adj = knn_graph(x, k=5)
    assert np.array_equal(adj.spatial, 1.0 - np.eye(6))


def test_cell_rows_format():
    from floorgraph.metrics import EvalReport

    report = EvalReport(
        pooled={r: {"auc": 0.75, "ap": 0.5} for r in ("spatial", "wall", "door")},
        macro={r: {"auc": 0.7, "ap": 0.45} for r in ("spatial", "wall", "door")},
        n_graphs=3,
        n_pairs=30,
    )
    rows = cell_rows(GridCell(experiment_id="e1", task="complete", observe_frac=0.4, sets=(1, 2), seed=7), report)
    assert rows[0] == "e1,complete,full,2,1+2,0.40,spatial,0.750000,0.500000,7"
