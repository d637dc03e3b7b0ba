"""Joint multi-relational training objective, loop, and experiment grid.

The loss is binary cross-entropy over unordered node pairs for the
door, wall, and spatial channels, applied to the decoder output and to
every intermediate adjacency the encoder produces:

    L = L_door + lambda1 * L_wall + lambda2 * L_spatial
        + w_iter * sum_k [same combination on the k-th block's adjacency]

Completion training masks out the observed pairs, so they contribute no
gradient. Optimization is Adam with stepwise learning-rate drops and
early stopping on pooled validation spatial AUC.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step
from .floorplan import TaskInstance
from .metrics import EvalReport, evaluate
from .model import Model, ModelConfig, forward_graph, instance_a0_channels, prepare_instances
from . import features as feat
from .synthgen import Corpus

LOSS_RELATIONS = ("door", "wall", "spatial")
TASKS = ("generate", "complete")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_finite_loss: float):
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"non-finite loss at epoch {epoch}; last finite epoch loss was {last_finite_loss:.6f}"
        )


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    negative_policy: str = "all_pairs"
    per_iteration_weight: float = 1.0

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be nonnegative")
        if self.negative_policy not in ("all_pairs", "balanced_sample"):
            raise ValueError(f"unknown negative_policy {self.negative_policy!r}")
        if self.per_iteration_weight < 0:
            raise ValueError("per_iteration_weight must be nonnegative")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_drops: tuple = ((60, 0.5), (120, 0.5))
    max_epochs: int = 300
    early_stop_patience: int = 30
    batch: int = 1
    seed: int = 0

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        epochs = [e for e, _ in self.lr_drops]
        if epochs != sorted(epochs) or len(set(epochs)) != len(epochs):
            raise ValueError("lr_drops epochs must be strictly increasing")
        if self.max_epochs < 1 or self.batch < 1:
            raise ValueError("max_epochs and batch must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)  # one {relation: auc} dict per epoch
    val_ap: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainHistory":
        return cls(**data)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate in force at a 1-based epoch index."""
    lr = cfg.lr
    for drop_epoch, factor in cfg.lr_drops:
        if epoch >= drop_epoch:
            lr *= factor
    return lr


# ----------------------------------------------------------------------
# loss

def pair_mask(
    inst: TaskInstance,
    task: str,
    policy: str = "all_pairs",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Upper-triangle mask of pairs that contribute to the loss.

    The diagonal never contributes. Completion training additionally
    excludes the observed pairs. Under balanced_sample, negatives are
    subsampled (seeded) to match the positive count on the spatial channel.
    """
    n = inst.target.n
    mask = np.triu(np.ones((n, n)), k=1)
    if task == "complete":
        for i, j in inst.observed_pairs():
            mask[i, j] = 0.0
    if policy == "balanced_sample":
        if rng is None:
            raise ValueError("balanced_sample needs an rng")
        spatial = inst.target.spatial
        pos = [(i, j) for i in range(n) for j in range(i + 1, n) if mask[i, j] > 0 and spatial[i, j] > 0.5]
        neg = [(i, j) for i in range(n) for j in range(i + 1, n) if mask[i, j] > 0 and spatial[i, j] <= 0.5]
        keep = min(len(pos), len(neg))
        chosen = rng.choice(len(neg), size=keep, replace=False) if keep < len(neg) else range(len(neg))
        mask = np.zeros((n, n))
        for i, j in pos:
            mask[i, j] = 1.0
        for idx in chosen:
            i, j = neg[idx]
            mask[i, j] = 1.0
    return mask


def edge_bce(tape: Tape, pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean BCE over the masked unordered pairs."""
    return tape.bce_mean(pred, target, mask)


def total_loss(tape: Tape, forward_out, target, mask: np.ndarray, cfg: LossConfig) -> Tensor:
    """Final-decoder combination plus the same combination per encoder block."""
    channels = target.channels()

    def combination(preds: dict) -> Tensor:
        total = None
        for rel, weight in zip(LOSS_RELATIONS, (1.0, cfg.lambda1, cfg.lambda2)):
            if rel not in preds:
                continue
            term = edge_bce(tape, preds[rel], channels[rel], mask)
            if weight != 1.0:
                term = tape.scale(term, weight)
            total = term if total is None else tape.add(total, term)
        return total

    loss = combination(forward_out.p)
    for step in forward_out.per_iteration:
        step_loss = combination(step)
        if cfg.per_iteration_weight != 1.0:
            step_loss = tape.scale(step_loss, cfg.per_iteration_weight)
        loss = tape.add(loss, step_loss)
    return loss


# ----------------------------------------------------------------------
# training loop

def _val_metrics(model: Model, instances, task: str) -> EvalReport:
    return evaluate(model, instances, task)


def train(
    corpus: Corpus,
    task: str,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig | None = None,
    train_cfg: TrainConfig | None = None,
    feature_sets=(1, 2, 3),
    observe_fraction: float = 0.6,
    log=None,
) -> tuple[Model, TrainHistory]:
    """Fit a model on the corpus train split; early-stop on validation AUC.

    Returns the model restored to its best validation epoch. Fully
    deterministic given the train config seed.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or TrainConfig()
    loss_cfg.validate()
    train_cfg.validate()
    if not corpus.train or not corpus.val:
        raise ValueError("corpus train and val splits must be nonempty")

    seeds = np.random.SeedSequence(train_cfg.seed)
    init_seed, shuffle_seed, mask_seed, instance_seed = (
        int(s.generate_state(1)[0]) for s in seeds.spawn(4)
    )

    # feature pipeline: fit set-2 statistics on the training split only
    selected = [rec.features.select_sets(feature_sets) for rec in corpus.train]
    stats = feat.fit_set2_stats(selected)
    layout = selected[0].layout if selected else ()

    model = Model.initialize(
        config=model_cfg,
        feature_dim=selected[0].f,
        seed=init_seed,
        feature_sets=feature_sets,
        feature_layout=layout,
        set2_stats=stats,
    )

    train_instances = prepare_instances(model, corpus.train, task, observe_fraction, seed=instance_seed)
    val_instances = prepare_instances(model, corpus.val, task, observe_fraction, seed=instance_seed + 1)

    mask_rng = np.random.default_rng(mask_seed)
    masks = [
        pair_mask(inst, task, loss_cfg.negative_policy, rng=mask_rng)
        for inst in train_instances
    ]
    trainable = [i for i, m in enumerate(masks) if m.sum() > 0]

    shuffle_rng = np.random.default_rng(shuffle_seed)
    state = AdamState.zeros_like(model.params)
    history = TrainHistory()
    best_auc = -np.inf
    best_params = model.copy_params()
    best_epoch = -1

    for epoch in range(1, train_cfg.max_epochs + 1):
        lr = learning_rate(train_cfg, epoch)
        order = shuffle_rng.permutation(len(trainable))
        epoch_losses = []
        accum: dict[str, np.ndarray] | None = None
        accum_count = 0
        for pos, oidx in enumerate(order):
            inst_idx = trainable[oidx]
            inst = train_instances[inst_idx]
            tape = Tape()
            leaves = {name: tape.leaf(value) for name, value in model.params.items()}
            out = forward_graph(tape, leaves, model.config, inst.features.x, instance_a0_channels(inst))
            loss = total_loss(tape, out, inst.target, masks[inst_idx], loss_cfg)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                last = epoch_losses[-1] if epoch_losses else (history.train_loss[-1] if history.train_loss else float("nan"))
                raise TrainingDiverged(epoch, last)
            epoch_losses.append(loss_value)
            grads = tape.gradients(loss, leaves)
            if accum is None:
                accum = grads
                accum_count = 1
            else:
                for name in accum:
                    accum[name] += grads[name]
                accum_count += 1
            if accum_count >= train_cfg.batch or pos == len(order) - 1:
                if accum_count > 1:
                    for name in accum:
                        accum[name] /= accum_count
                adam_step(model.params, accum, state, lr=lr)
                accum, accum_count = None, 0

        report = _val_metrics(model, val_instances, task)
        history.train_loss.append(float(np.mean(epoch_losses)))
        history.val_auc.append({rel: report.pooled[rel]["auc"] for rel in report.pooled})
        history.val_ap.append({rel: report.pooled[rel]["ap"] for rel in report.pooled})
        history.lr.append(lr)

        val_auc = report.pooled["spatial"]["auc"]
        if val_auc > best_auc:
            best_auc = val_auc
            best_params = model.copy_params()
            best_epoch = epoch
        if log:
            log(f"epoch {epoch:3d} loss {history.train_loss[-1]:.4f} val spatial auc {val_auc:.4f} lr {lr:.2e}")
        if epoch - best_epoch >= train_cfg.early_stop_patience:
            break

    history.best_epoch = best_epoch
    history.stopped_epoch = len(history.train_loss)
    model.params = best_params
    return model, history


# ----------------------------------------------------------------------
# experiment grid and baselines

@dataclass
class GridCell:
    experiment_id: str
    task: str = "generate"
    variant: str = "full"
    k: int = 2
    sets: tuple = (1, 2, 3)
    observe_frac: float | None = None
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 1.0
    share_block_weights: bool = False
    long_skip: bool = True


CSV_HEADER = "experiment_id,task,variant,k,sets,observe_frac,relation,auc,ap,seed"


def ablation_grid(seed: int = 0, k: int = 2, sets=(1, 2, 3)) -> list[GridCell]:
    return [
        GridCell(experiment_id=v, variant=v, k=k, sets=sets, seed=seed)
        for v in ("full", "no_il", "no_mr_gat", "no_mr_decoder")
    ]


def iteration_grid(k_values=(0, 1, 2, 3, 4), seed: int = 0, sets=(1, 2, 3)) -> list[GridCell]:
    return [GridCell(experiment_id=f"k{k}", k=k, sets=sets, seed=seed) for k in k_values]


def attribute_set_grid(seed: int = 0, k: int = 2) -> list[GridCell]:
    combos = ((1,), (2,), (3,), (4,), (1, 2), (1, 3), (1, 2, 3), (1, 2, 3, 4))
    return [
        GridCell(experiment_id="sets_" + "+".join(map(str, c)), k=k, sets=c, seed=seed)
        for c in combos
    ]


def completion_grid(fractions=(0.2, 0.4, 0.6, 0.8), seed: int = 0, k: int = 2, sets=(1, 2, 3)) -> list[GridCell]:
    return [
        GridCell(
            experiment_id=f"complete_{f:.1f}",
            task="complete",
            observe_frac=f,
            k=k,
            sets=sets,
            seed=seed,
        )
        for f in fractions
    ]


def run_cell(
    corpus: Corpus,
    cell: GridCell,
    base_model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
) -> tuple[Model, TrainHistory, EvalReport]:
    base = asdict(base_model_cfg) if base_model_cfg else {}
    base.update(
        variant=cell.variant,
        k_iterations=cell.k,
        share_block_weights=cell.share_block_weights,
        long_skip=cell.long_skip,
    )
    model_cfg = ModelConfig(**base)
    loss_cfg = LossConfig(lambda1=cell.lambda1, lambda2=cell.lambda2)
    tc = train_cfg or TrainConfig()
    tc = TrainConfig(
        lr=tc.lr,
        lr_drops=tc.lr_drops,
        max_epochs=tc.max_epochs,
        early_stop_patience=tc.early_stop_patience,
        batch=tc.batch,
        seed=cell.seed,
    )
    observe = cell.observe_frac if cell.observe_frac is not None else 0.6
    model, history = train(
        corpus,
        cell.task,
        model_cfg,
        loss_cfg,
        tc,
        feature_sets=cell.sets,
        observe_fraction=observe,
    )
    test_instances = prepare_instances(
        model, corpus.test, cell.task, observe, seed=cell.seed + 7919
    )
    report = evaluate(model, test_instances, cell.task)
    return model, history, report


def cell_rows(cell: GridCell, report: EvalReport) -> list[str]:
    rows = []
    frac = "" if cell.observe_frac is None else f"{cell.observe_frac:.2f}"
    sets = "+".join(map(str, cell.sets))
    for rel in ("spatial", "wall", "door"):
        auc = report.pooled[rel]["auc"]
        ap = report.pooled[rel]["ap"]
        rows.append(
            f"{cell.experiment_id},{cell.task},{cell.variant},{cell.k},{sets},{frac},{rel},{auc:.6f},{ap:.6f},{cell.seed}"
        )
    return rows


def run_experiment_grid(
    corpus: Corpus,
    cells: list[GridCell],
    base_model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    log=None,
) -> str:
    """Train and evaluate every cell; returns the results CSV."""
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for cell in cells:
        if log:
            log(f"running {cell.experiment_id}")
        _, _, report = run_cell(corpus, cell, base_model_cfg, train_cfg)
        for row in cell_rows(cell, report):
            out.write(row + "\n")
    return out.getvalue()


def mlp_baseline(
    corpus: Corpus,
    sets=(1, 2, 3),
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
) -> tuple[Model, EvalReport]:
    """Attributes straight into the relational decoder; no message passing."""
    cell = GridCell(experiment_id="mlp", variant="mlp", k=0, sets=sets, seed=seed)
    model, _, report = run_cell(corpus, cell, None, train_cfg)
    return model, report


def gat_knn_baseline(
    corpus: Corpus,
    sets=(1, 2, 3),
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
    k: int = 3,
) -> tuple[Model, EvalReport]:
    """Single attention layer over a fixed kNN feature graph, same decoder."""
    cfg = ModelConfig(variant="gat_knn", knn_k=k)
    cell = GridCell(experiment_id="gat_knn", variant="gat_knn", k=1, sets=sets, seed=seed)
    model, _, report = run_cell(corpus, cell, cfg, train_cfg)
    return model, report
