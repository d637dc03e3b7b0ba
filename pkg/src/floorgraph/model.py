"""Iterative multi-relational topology model.

The encoder alternates two moves for K blocks:

1. topology update: a per-relation scoring MLP maps [x_i, a_ij, x_j] to a
   fresh soft adjacency for the door and wall channels (symmetrized, then
   squashed); the spatial channel is their clamped sum.
2. node update: per-relation graph attention over the soft neighborhood,
   fused across relations by learned softmax mixing weights.

The decoder scores every unordered node pair with one MLP branch per
relation; door and wall predictions fuse into the spatial one. A long
skip connection concatenates the raw node attributes onto the final
embeddings before decoding.

Ablation variants switch parts off: ``no_il`` (no encoder blocks),
``no_mr_gat`` (single-relation attention over the spatial channel only),
``no_mr_decoder`` (three independent decoder branches, no fusion). Two
reference baselines reuse the same machinery: ``mlp`` (decoder on raw
attributes) and ``gat_knn`` (one attention layer over a fixed kNN graph).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import features as feat
from .autodiff import Tape, Tensor
from .floorplan import (
    MultiAdjacency,
    TaskInstance,
    knn_graph,
    make_completion_instance,
    make_generation_instance,
)

VARIANTS = ("full", "no_il", "no_mr_gat", "no_mr_decoder", "mlp", "gat_knn")
MR_RELATIONS = ("door", "wall")
NONLINEARITIES = ("elu", "leaky_relu")

CHECKPOINT_VERSION = 1


class ModelConfigError(ValueError):
    pass


class CompatibilityError(ValueError):
    """Checkpoint and data disagree on the feature layout."""


@dataclass
class ModelConfig:
    k_iterations: int = 2
    gat_hidden: int = 32
    scoring_mlp_dims: tuple = (32, 16, 1)
    decoder_mlp_dims: tuple = (64, 16, 1)
    share_block_weights: bool = False
    long_skip: bool = True
    variant: str = "full"
    nonlinearity: str = "elu"
    attention_leak: float = 0.2
    neighborhood_tau: float = 0.01
    knn_k: int = 3  # only read by the gat_knn baseline

    def __post_init__(self):
        self.scoring_mlp_dims = tuple(int(d) for d in self.scoring_mlp_dims)
        self.decoder_mlp_dims = tuple(int(d) for d in self.decoder_mlp_dims)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.k_iterations < 0:
            raise ModelConfigError(f"k_iterations must be >= 0, got {self.k_iterations}")
        for dims, name in ((self.scoring_mlp_dims, "scoring"), (self.decoder_mlp_dims, "decoder")):
            if not dims or dims[-1] != 1:
                raise ModelConfigError(f"{name}_mlp_dims must end in 1, got {dims}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ModelConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.gat_hidden < 1:
            raise ModelConfigError("gat_hidden must be positive")

    # ---- derived structure -------------------------------------------

    def effective_iterations(self) -> int:
        if self.variant in ("no_il", "mlp"):
            return 0
        if self.variant == "gat_knn":
            return 1
        return self.k_iterations

    def encoder_relations(self) -> tuple:
        if self.variant in ("no_mr_gat", "gat_knn"):
            return ("spatial",)
        return MR_RELATIONS

    def decoder_relations(self) -> tuple:
        if self.variant == "no_mr_decoder":
            return ("door", "wall", "spatial")
        return MR_RELATIONS

    def has_topology_update(self) -> bool:
        return self.variant != "gat_knn" and self.effective_iterations() > 0

    def block_param_id(self, k: int) -> str:
        return "block" if self.share_block_weights else f"block{k}"

    def block_ids(self) -> list[str]:
        k_eff = self.effective_iterations()
        if k_eff == 0:
            return []
        return ["block"] if self.share_block_weights else [f"block{k}" for k in range(k_eff)]

    def block_in_dim(self, k: int, feature_dim: int) -> int:
        if self.share_block_weights:
            return self.gat_hidden
        return feature_dim if k == 0 else self.gat_hidden

    def embed_dim(self, feature_dim: int) -> int:
        """Width of the encoder output fed to the decoder."""
        return self.gat_hidden if self.effective_iterations() > 0 else feature_dim

    def decoder_adjacency_channels(self) -> int:
        """How many adjacency values each decoder branch sees per pair.

        The relational decoder reads the full stacked topology estimate
        (door, wall, spatial); the ablated independent branches see only
        their own relation's channel.
        """
        return 1 if self.variant == "no_mr_decoder" else 3

    def decoder_input_dim(self, feature_dim: int) -> int:
        # pair input is [h_i, a_ij channels, h_j]
        if self.variant == "mlp":
            h = feature_dim
        elif self.long_skip:
            h = self.embed_dim(feature_dim) + feature_dim
        else:
            h = self.embed_dim(feature_dim)
        return 2 * h + self.decoder_adjacency_channels()


# ----------------------------------------------------------------------
# parameters

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_mlp(params, rng, prefix: str, in_dim: int, dims) -> None:
    prev = in_dim
    for i, d in enumerate(dims):
        params[f"{prefix}.W{i}"] = _glorot(rng, prev, d, (prev, d))
        params[f"{prefix}.b{i}"] = np.zeros((1, d))
        prev = d


def init_params(config: ModelConfig, feature_dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """All learnable tensors, keyed by dotted names, in deterministic order."""
    params: dict[str, np.ndarray] = {}
    k_eff = config.effective_iterations()

    if config.share_block_weights and k_eff > 0:
        params["input_proj.W"] = _glorot(rng, feature_dim, config.gat_hidden, (feature_dim, config.gat_hidden))

    for k, bid in enumerate(config.block_ids()):
        in_dim = config.block_in_dim(k, feature_dim)
        if config.has_topology_update():
            for rel in config.encoder_relations():
                _init_mlp(params, rng, f"{bid}.score.{rel}", 2 * in_dim + 1, config.scoring_mlp_dims)
        for rel in config.encoder_relations():
            params[f"{bid}.att.{rel}"] = _glorot(rng, 2 * in_dim, 1, (2 * in_dim, 1))
            params[f"{bid}.W.{rel}"] = _glorot(rng, in_dim, config.gat_hidden, (in_dim, config.gat_hidden))
        if len(config.encoder_relations()) > 1:
            params[f"{bid}.alpha"] = np.zeros((1, len(config.encoder_relations())))

    for rel in config.decoder_relations():
        _init_mlp(params, rng, f"decoder.{rel}", config.decoder_input_dim(feature_dim), config.decoder_mlp_dims)
    return params


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


# ----------------------------------------------------------------------
# forward pass pieces (taped)

@dataclass
class ForwardOut:
    """Tape tensors produced by one forward pass."""

    p: dict  # relation -> Tensor (n x n, symmetric)
    per_iteration: list  # one dict of relation -> Tensor per encoder block
    x_final: Tensor


def _pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    idx_i = np.repeat(np.arange(n), n)
    idx_j = np.tile(np.arange(n), n)
    return idx_i, idx_j


def _nonlin(tape: Tape, cfg: ModelConfig, t: Tensor) -> Tensor:
    if cfg.nonlinearity == "elu":
        return tape.elu(t)
    return tape.leaky_relu(t, cfg.attention_leak)


def _mlp(tape: Tape, leaves, cfg: ModelConfig, prefix: str, h: Tensor, dims) -> Tensor:
    for i in range(len(dims)):
        h = tape.affine(h, leaves[f"{prefix}.W{i}"], leaves[f"{prefix}.b{i}"])
        if i < len(dims) - 1:
            h = _nonlin(tape, cfg, h)
    return h


def update_topology(tape: Tape, leaves, cfg: ModelConfig, x: Tensor, a: dict, bid: str) -> dict:
    """One topology refinement: score every ordered pair, symmetrize, squash.

    The diagonal is forced back to 1 so each node keeps itself in scope
    for message passing; the spatial channel is clamp(door + wall, 0, 1).
    """
    n = x.shape[0]
    idx_i, idx_j = _pair_indices(n)
    xi = tape.gather_rows(x, idx_i, scatter="repeat")
    xj = tape.gather_rows(x, idx_j, scatter="tile")
    eye = tape.const(np.eye(n))
    off_diag = tape.const(1.0 - np.eye(n))

    out: dict[str, Tensor] = {}
    for rel in cfg.encoder_relations():
        a_col = tape.reshape(a[rel], (n * n, 1))
        pair = tape.concat_cols(xi, a_col, xj)
        score = _mlp(tape, leaves, cfg, f"{bid}.score.{rel}", pair, cfg.scoring_mlp_dims)
        score_mat = tape.reshape(score, (n, n))
        symmetric = tape.scale(tape.add(score_mat, tape.transpose(score_mat)), 0.5)
        probs = tape.sigmoid(symmetric)
        out[rel] = tape.add(tape.mul(probs, off_diag), eye)
    if set(out) == set(MR_RELATIONS):
        out["spatial"] = tape.clamp(tape.add(out["door"], out["wall"]), 0.0, 1.0)
    return out


def attention_coefficients(tape: Tape, leaves, cfg: ModelConfig, x: Tensor, a_rel: Tensor, bid: str, rel: str) -> Tensor:
    """Row-normalized attention over the soft neighborhood of each node.

    Entries of the adjacency at or below neighborhood_tau are masked out;
    a row with no neighbors above the threshold comes back as zeros.
    """
    n = x.shape[0]
    idx_i, idx_j = _pair_indices(n)
    pair = tape.concat_cols(tape.gather_rows(x, idx_i, scatter="repeat"), tape.gather_rows(x, idx_j, scatter="tile"))
    logits = tape.leaky_relu(tape.matmul(pair, leaves[f"{bid}.att.{rel}"]), cfg.attention_leak)
    logits_mat = tape.reshape(logits, (n, n))
    mask = a_rel.data > cfg.neighborhood_tau
    return tape.softmax_rows(logits_mat, mask)


def node_update(tape: Tape, leaves, cfg: ModelConfig, x: Tensor, a: dict, bid: str) -> Tensor:
    """Attention-weighted message passing, fused over relation subgraphs."""
    rels = cfg.encoder_relations()
    mix_weights = None
    if len(rels) > 1:
        alpha = leaves[f"{bid}.alpha"]
        mix_weights = tape.softmax_rows(alpha, np.ones((1, len(rels)), dtype=bool))

    total = None
    for ridx, rel in enumerate(rels):
        beta = attention_coefficients(tape, leaves, cfg, x, a[rel], bid, rel)
        weighted_adj = tape.mul(beta, a[rel])
        message = tape.matmul(tape.matmul(weighted_adj, x), leaves[f"{bid}.W.{rel}"])
        if mix_weights is not None:
            message = tape.mul(message, tape.slice_cols(mix_weights, ridx, ridx + 1))
        total = message if total is None else tape.add(total, message)
    return _nonlin(tape, cfg, total)


def encode(tape: Tape, leaves, cfg: ModelConfig, x0: Tensor, a0: dict) -> tuple[Tensor, dict, list]:
    """Run the iteration blocks; K=0 passes features straight through."""
    x, a = x0, a0
    if cfg.share_block_weights and cfg.effective_iterations() > 0:
        x = tape.matmul(x, leaves["input_proj.W"])
    per_iteration = []
    for k in range(cfg.effective_iterations()):
        bid = cfg.block_param_id(k)
        if cfg.has_topology_update():
            a = update_topology(tape, leaves, cfg, x, a, bid)
            per_iteration.append(a)
        x = node_update(tape, leaves, cfg, x, a, bid)
    return x, a, per_iteration


def decode(tape: Tape, leaves, cfg: ModelConfig, x_final: Tensor, x0: Tensor, a_final: dict) -> dict:
    """Per-pair relation probabilities from the (skip-connected) embeddings.

    Relational branches score [h_i, a_door, a_wall, a_spatial, h_j]: the
    decoder refines the encoder's stacked topology estimate instead of
    starting from the embeddings alone. The ablated independent branches
    see only their own relation's channel.
    """
    if cfg.variant == "mlp":
        h = x0
    elif cfg.long_skip:
        h = tape.concat_cols(x_final, x0)
    else:
        h = x_final
    n = h.shape[0]
    idx_i, idx_j = _pair_indices(n)
    hi = tape.gather_rows(h, idx_i, scatter="repeat")
    hj = tape.gather_rows(h, idx_j, scatter="tile")

    def channel(rel):
        # single-relation encoders track only the spatial channel
        a_rel = a_final[rel] if rel in a_final else a_final["spatial"]
        return tape.reshape(a_rel, (n * n, 1))

    preds: dict[str, Tensor] = {}
    for rel in cfg.decoder_relations():
        if cfg.decoder_adjacency_channels() == 3:
            pair = tape.concat_cols(hi, channel("door"), channel("wall"), channel("spatial"), hj)
        else:
            pair = tape.concat_cols(hi, channel(rel), hj)
        score = _mlp(tape, leaves, cfg, f"decoder.{rel}", pair, cfg.decoder_mlp_dims)
        prob = tape.sigmoid(tape.reshape(score, (n, n)))
        preds[rel] = tape.scale(tape.add(prob, tape.transpose(prob)), 0.5)
    if cfg.variant != "no_mr_decoder":
        preds["spatial"] = tape.clamp(tape.add(preds["door"], preds["wall"]), 0.0, 1.0)
    return preds


def forward_graph(tape: Tape, leaves, cfg: ModelConfig, x0_value: np.ndarray, a0_values: dict) -> ForwardOut:
    """Full taped forward pass for one graph."""
    if not np.isfinite(x0_value).all():
        raise ValueError("forward: non-finite node features")
    for rel, mat in a0_values.items():
        if not np.isfinite(mat).all():
            raise ValueError(f"forward: non-finite initial adjacency in channel {rel}")
    x0 = tape.const(x0_value)
    a0 = {rel: tape.const(mat) for rel, mat in a0_values.items()}
    x_final, a_final, per_iteration = encode(tape, leaves, cfg, x0, a0)
    preds = decode(tape, leaves, cfg, x_final, x0, a_final)
    return ForwardOut(p=preds, per_iteration=per_iteration, x_final=x_final)


# ----------------------------------------------------------------------
# numpy-facing predictions

@dataclass
class EdgePredictions:
    """Symmetric per-relation probabilities over node pairs."""

    p_door: np.ndarray
    p_wall: np.ndarray
    p_spatial: np.ndarray
    per_iteration: list = field(default_factory=list)

    def channel(self, rel: str) -> np.ndarray:
        return {"door": self.p_door, "wall": self.p_wall, "spatial": self.p_spatial}[rel]


def instance_a0_channels(inst: TaskInstance) -> dict[str, np.ndarray]:
    return {rel: mat.copy() for rel, mat in inst.a0.channels().items()}


# ----------------------------------------------------------------------
# the bundled model: config + params + feature pipeline

@dataclass
class Model:
    config: ModelConfig
    params: dict
    feature_sets: tuple = (1, 2, 3)
    feature_layout: tuple = ()
    set2_stats: feat.Set2Stats | None = None

    @classmethod
    def initialize(
        cls,
        config: ModelConfig,
        feature_dim: int,
        seed: int,
        feature_sets=(1, 2, 3),
        feature_layout=(),
        set2_stats=None,
    ) -> "Model":
        rng = np.random.default_rng(seed)
        return cls(
            config=config,
            params=init_params(config, feature_dim, rng),
            feature_sets=tuple(feature_sets),
            feature_layout=tuple(feature_layout),
            set2_stats=set2_stats,
        )

    @property
    def feature_dim(self) -> int:
        return self.feature_layout[-1][1][1] if self.feature_layout else 0

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def mixing_weights(self) -> dict:
        """Learned relation mixing (softmax of alpha) per encoder block."""
        out = {}
        for name, p in self.params.items():
            if name.endswith(".alpha"):
                e = np.exp(p[0] - p[0].max())
                out[name.rsplit(".", 1)[0]] = {
                    rel: float(w) for rel, w in zip(self.config.encoder_relations(), e / e.sum())
                }
        return out

    def forward_instance(self, tape: Tape, inst: TaskInstance) -> tuple[ForwardOut, dict]:
        leaves = {name: tape.leaf(value) for name, value in self.params.items()}
        out = forward_graph(tape, leaves, self.config, inst.features.x, instance_a0_channels(inst))
        return out, leaves

    def predict_instance(self, inst: TaskInstance) -> EdgePredictions:
        out, _ = self.forward_instance(Tape(), inst)
        return EdgePredictions(
            p_door=out.p["door"].data.copy(),
            p_wall=out.p["wall"].data.copy(),
            p_spatial=out.p["spatial"].data.copy(),
            per_iteration=[{rel: t.data.copy() for rel, t in step.items()} for step in out.per_iteration],
        )

    # ---- feature pipeline --------------------------------------------

    def prepare_feature_matrix(self, full_features: feat.FeatureMatrix) -> feat.FeatureMatrix:
        selected = full_features.select_sets(self.feature_sets)
        if self.feature_layout and tuple(selected.layout) != tuple(self.feature_layout):
            raise CompatibilityError(
                f"feature layout mismatch: checkpoint {self.feature_layout} vs data {selected.layout}"
            )
        return feat.standardize(selected, self.set2_stats)

    # ---- persistence ---------------------------------------------------

    def to_checkpoint(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "feature_sets": list(self.feature_sets),
            "feature_layout": [[name, [int(lo), int(hi)]] for name, (lo, hi) in self.feature_layout],
            "standardization_stats": self.set2_stats.to_dict() if self.set2_stats else None,
            "params": {
                name: {"shape": list(p.shape), "data": [float(v) for v in p.reshape(-1)]}
                for name, p in self.params.items()
            },
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_checkpoint()), encoding="utf-8")

    @classmethod
    def from_checkpoint(cls, data: dict) -> "Model":
        if data.get("format_version") != CHECKPOINT_VERSION:
            raise CompatibilityError(f"unsupported checkpoint format_version {data.get('format_version')}")
        cfg_data = dict(data["config"])
        cfg_data["scoring_mlp_dims"] = tuple(cfg_data["scoring_mlp_dims"])
        cfg_data["decoder_mlp_dims"] = tuple(cfg_data["decoder_mlp_dims"])
        config = ModelConfig(**cfg_data)
        params = {
            name: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
            for name, spec in data["params"].items()
        }
        return cls(
            config=config,
            params=params,
            feature_sets=tuple(data["feature_sets"]),
            feature_layout=tuple((name, (lo, hi)) for name, (lo, hi) in data["feature_layout"]),
            set2_stats=feat.Set2Stats.from_dict(data.get("standardization_stats")),
        )

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_checkpoint(json.loads(Path(path).read_text(encoding="utf-8")))


# ----------------------------------------------------------------------
# task instance preparation (shared by training and evaluation)

def prepare_instances(
    model: Model,
    records,
    task: str,
    observe_fraction: float | None = None,
    seed: int = 0,
) -> list[TaskInstance]:
    """Build task instances with the model's feature pipeline applied.

    Completion instances derive a per-graph seed from (seed, index within
    the split), so the held-out sets are reproducible.
    """
    if task not in ("generate", "complete"):
        raise ValueError(f"unknown task {task!r}; expected 'generate' or 'complete'")
    instances = []
    for idx, record in enumerate(records):
        fm = model.prepare_feature_matrix(record.features)
        if task == "generate":
            inst = make_generation_instance(record.floorplan, fm, target=record.graph)
        else:
            if observe_fraction is None:
                raise ValueError("completion task needs observe_fraction")
            inst = make_completion_instance(
                record.floorplan,
                fm,
                observe_fraction=observe_fraction,
                seed=int(np.random.SeedSequence([seed, idx]).generate_state(1)[0]),
                target=record.graph,
            )
        if model.config.variant == "gat_knn":
            base = knn_graph(fm, min(model.config.knn_k, fm.n - 1)) if fm.n > 1 else MultiAdjacency.identity(fm.n)
            withdiag = {rel: np.clip(mat + np.eye(fm.n), 0, 1) for rel, mat in base.channels().items()}
            inst = TaskInstance(
                floorplan_id=inst.floorplan_id,
                features=inst.features,
                a0=MultiAdjacency(fm.n, withdiag["door"], withdiag["wall"], withdiag["spatial"]),
                target=inst.target,
                heldout_pairs=inst.heldout_pairs,
            )
        instances.append(inst)
    return instances
