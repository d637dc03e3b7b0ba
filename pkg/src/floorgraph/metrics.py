"""Link-prediction metrics and graph edit distance.

AUC follows the Mann-Whitney formulation, P(score+ > score-) plus half
the tie probability, computed exactly through midranks. AP is the step
interpolation of the precision-recall curve with a deterministic
tie-break by pair index. Both have brute-force counterparts in the test
suite.

Graph edit distance is exact (A* over node assignments) up to a size
limit and falls back to a greedy upper bound above it, flagged in the
result.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .floorplan import MultiAdjacency, TaskInstance
from .model import Model

EVAL_RELATIONS = ("spatial", "wall", "door")
GED_EXACT_LIMIT = 12


class MetricError(ValueError):
    pass


@dataclass
class ScoredPairs:
    """Scores and binary labels for a set of distinct pairs."""

    pairs: tuple
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.pairs) != self.scores.size or self.scores.size != self.labels.size:
            raise MetricError("pairs, scores, and labels must have equal length")
        if len(set(self.pairs)) != len(self.pairs):
            raise MetricError("duplicate pairs in scored set")
        if not np.isin(self.labels, (0, 1)).all():
            raise MetricError("labels must be 0 or 1")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int((1 - self.labels).sum())


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(sp: ScoredPairs) -> float:
    if sp.n_pos == 0 or sp.n_neg == 0:
        raise MetricError(f"roc_auc needs both classes; got {sp.n_pos} positives, {sp.n_neg} negatives")
    ranks = _midranks(sp.scores)
    rank_sum = ranks[sp.labels == 1].sum()
    u = rank_sum - sp.n_pos * (sp.n_pos + 1) / 2.0
    return float(u / (sp.n_pos * sp.n_neg))


def average_precision(sp: ScoredPairs) -> float:
    if sp.n_pos == 0:
        raise MetricError("average_precision needs at least one positive")
    # descending score, ties broken by original pair index
    order = sorted(range(sp.scores.size), key=lambda i: (-sp.scores[i], i))
    hits = 0
    ap = 0.0
    for rank, idx in enumerate(order, start=1):
        if sp.labels[idx] == 1:
            hits += 1
            ap += hits / rank
    return float(ap / sp.n_pos)


# ----------------------------------------------------------------------
# graph edit distance

@dataclass(frozen=True)
class GedResult:
    cost: float
    exact: bool


def _edge_channels(adj: MultiAdjacency) -> list[np.ndarray]:
    # door and wall determine spatial, so comparing those two avoids
    # triple-charging one disagreement
    return [(adj.door > 0.5).astype(np.int8), (adj.wall > 0.5).astype(np.int8)]


def _mapping_cost(channels1, channels2, labels1, labels2, mapping: list[int]) -> float:
    """Edit cost of a full assignment; -1 in the mapping means deletion."""
    n1 = len(labels1)
    n2 = len(labels2)
    cost = 0.0
    mapped_targets = {m for m in mapping if m >= 0}
    cost += sum(1 for m in mapping if m < 0)  # deletions
    cost += n2 - len(mapped_targets)  # insertions
    for i, m in enumerate(mapping):
        if m >= 0 and labels1[i] != labels2[m]:
            cost += 1
    for c1, c2 in zip(channels1, channels2):
        for i in range(n1):
            for j in range(i + 1, n1):
                mi, mj = mapping[i], mapping[j]
                present1 = c1[i, j]
                present2 = c2[mi, mj] if mi >= 0 and mj >= 0 else 0
                if present1 != present2:
                    cost += 1
        # edges of g2 with an unmapped endpoint must be inserted
        for i in range(n2):
            for j in range(i + 1, n2):
                if c2[i, j] and (i not in mapped_targets or j not in mapped_targets):
                    cost += 1
    return cost


def _ged_exact(channels1, channels2, labels1, labels2) -> float:
    """A* over prefixes of the node assignment of graph 1 onto graph 2."""
    n1, n2 = len(labels1), len(labels2)

    def heuristic(assigned: tuple) -> float:
        rest1 = [labels1[i] for i in range(len(assigned), n1)]
        used = {m for m in assigned if m >= 0}
        rest2 = [labels2[j] for j in range(n2) if j not in used]
        overlap = 0
        pool = list(rest2)
        for lab in rest1:
            if lab in pool:
                pool.remove(lab)
                overlap += 1
        node_lb = abs(len(rest1) - len(rest2)) + max(0, min(len(rest1), len(rest2)) - overlap)
        edge_lb = 0.0
        for c1, c2 in zip(channels1, channels2):
            e1 = sum(
                c1[i, j]
                for i in range(len(assigned), n1)
                for j in range(i + 1, n1)
            )
            e2 = sum(
                c2[i, j]
                for i in range(n2)
                for j in range(i + 1, n2)
                if i not in used and j not in used
            )
            edge_lb += abs(float(e1) - float(e2))
        return node_lb + edge_lb

    def partial_cost(assigned: tuple) -> float:
        k = len(assigned)
        used = {m for m in assigned if m >= 0}
        cost = sum(1 for m in assigned if m < 0)
        for i in range(k):
            if assigned[i] >= 0 and labels1[i] != labels2[assigned[i]]:
                cost += 1
        for c1, c2 in zip(channels1, channels2):
            for i in range(k):
                for j in range(i + 1, k):
                    p1 = c1[i, j]
                    p2 = c2[assigned[i], assigned[j]] if assigned[i] >= 0 and assigned[j] >= 0 else 0
                    if p1 != p2:
                        cost += 1
        return cost

    def finish_cost(assigned: tuple) -> float:
        # all of graph 1 assigned: account for unmatched graph-2 nodes/edges
        used = {m for m in assigned if m >= 0}
        cost = n2 - len(used)
        for c2 in channels2:
            for i in range(n2):
                for j in range(i + 1, n2):
                    if c2[i, j] and (i not in used or j not in used):
                        cost += 1
        return cost

    counter = 0
    if n1 == 0:
        return finish_cost(())
    heap = [(heuristic(()), 0, ())]
    while heap:
        est, _, assigned = heapq.heappop(heap)
        if len(assigned) == n1:
            # complete states are pushed with their true total cost
            return est
        used = {m for m in assigned if m >= 0}
        options = [j for j in range(n2) if j not in used] + [-1]
        for j in options:
            nxt = assigned + (j,)
            counter += 1
            g = partial_cost(nxt)
            tail = finish_cost(nxt) if len(nxt) == n1 else heuristic(nxt)
            heapq.heappush(heap, (g + tail, counter, nxt))
    raise MetricError("graph edit distance search exhausted without a solution")


def _ged_greedy(channels1, channels2, labels1, labels2) -> float:
    """Upper bound: greedily match nodes by (label, degree) similarity."""
    n1, n2 = len(labels1), len(labels2)
    deg1 = sum(c.sum(axis=1) for c in channels1)
    deg2 = sum(c.sum(axis=1) for c in channels2)
    mapping = [-1] * n1
    used = set()
    for i in sorted(range(n1), key=lambda i: (-deg1[i], i)):
        best, best_score = -1, None
        for j in range(n2):
            if j in used:
                continue
            score = (0 if labels1[i] == labels2[j] else 1, abs(float(deg1[i]) - float(deg2[j])), j)
            if best_score is None or score < best_score:
                best, best_score = j, score
        if best >= 0:
            mapping[i] = best
            used.add(best)
    return _mapping_cost(channels1, channels2, labels1, labels2, mapping)


def graph_edit_distance(
    g1: MultiAdjacency,
    labels1,
    g2: MultiAdjacency,
    labels2,
    exact_limit: int = GED_EXACT_LIMIT,
) -> GedResult:
    """Minimum unit-cost edit distance between two labeled topology graphs.

    Node substitution costs 1 when labels differ; node insert/delete and
    edge insert/delete cost 1 each, counted per relation channel.
    """
    labels1, labels2 = list(labels1), list(labels2)
    if len(labels1) != g1.n or len(labels2) != g2.n:
        raise MetricError("label count must match node count")
    ch1, ch2 = _edge_channels(g1), _edge_channels(g2)
    if max(g1.n, g2.n) <= exact_limit:
        return GedResult(cost=float(_ged_exact(ch1, ch2, labels1, labels2)), exact=True)
    return GedResult(cost=float(_ged_greedy(ch1, ch2, labels1, labels2)), exact=False)


# ----------------------------------------------------------------------
# model evaluation

def scored_pairs_for_instance(preds, inst: TaskInstance, relation: str, task: str) -> ScoredPairs:
    """Pairs to score for one graph: all pairs (generation) or held-out ones."""
    pairs = inst.heldout_pairs
    mat = preds.channel(relation)
    target = inst.target.channels()[relation]
    scores = np.array([mat[i, j] for i, j in pairs])
    labels = np.array([int(target[i, j] > 0.5) for i, j in pairs])
    return ScoredPairs(pairs=tuple(pairs), scores=scores, labels=labels)


@dataclass
class EvalReport:
    pooled: dict  # relation -> {"auc": float, "ap": float}
    macro: dict  # relation -> {"auc": float, "ap": float} averaged per graph
    n_graphs: int
    n_pairs: int


def evaluate(model: Model, instances: list[TaskInstance], task: str) -> EvalReport:
    """Per-relation AUC/AP pooled across graphs; macro averages for reference.

    Graphs whose scored set lacks one of the classes contribute to the
    pooled metrics but are skipped in that relation's macro average.
    """
    pooled_scores = {rel: [] for rel in EVAL_RELATIONS}
    pooled_labels = {rel: [] for rel in EVAL_RELATIONS}
    pooled_pairs = {rel: [] for rel in EVAL_RELATIONS}
    macro_auc = {rel: [] for rel in EVAL_RELATIONS}
    macro_ap = {rel: [] for rel in EVAL_RELATIONS}
    n_pairs = 0

    for gidx, inst in enumerate(instances):
        preds = model.predict_instance(inst)
        for rel in EVAL_RELATIONS:
            sp = scored_pairs_for_instance(preds, inst, rel, task)
            pooled_scores[rel].append(sp.scores)
            pooled_labels[rel].append(sp.labels)
            pooled_pairs[rel].extend((gidx, i, j) for i, j in sp.pairs)
            if rel == EVAL_RELATIONS[0]:
                n_pairs += len(sp.pairs)
            if sp.n_pos and sp.n_neg:
                macro_auc[rel].append(roc_auc(sp))
                macro_ap[rel].append(average_precision(sp))

    pooled = {}
    macro = {}
    for rel in EVAL_RELATIONS:
        sp = ScoredPairs(
            pairs=tuple(pooled_pairs[rel]),
            scores=np.concatenate(pooled_scores[rel]),
            labels=np.concatenate(pooled_labels[rel]),
        )
        pooled[rel] = {"auc": roc_auc(sp), "ap": average_precision(sp)}
        macro[rel] = {
            "auc": float(np.mean(macro_auc[rel])) if macro_auc[rel] else float("nan"),
            "ap": float(np.mean(macro_ap[rel])) if macro_ap[rel] else float("nan"),
        }
    return EvalReport(pooled=pooled, macro=macro, n_graphs=len(instances), n_pairs=n_pairs)


def format_report_table(report: EvalReport, title: str = "link prediction") -> str:
    """Aligned text table: AUC block and AP block over the three relations."""
    header = f"{'':<14}" + "".join(f"{rel.capitalize():>10}" for rel in EVAL_RELATIONS)
    lines = [f"== {title} ({report.n_graphs} graphs, {report.n_pairs} pairs) ==", header]
    for metric in ("auc", "ap"):
        for scope_name, scope in (("pooled", report.pooled), ("macro", report.macro)):
            label = f"{metric.upper()} {scope_name}"
            row = f"{label:<14}" + "".join(f"{100 * scope[rel][metric]:>10.2f}" for rel in EVAL_RELATIONS)
            lines.append(row)
    return "\n".join(lines) + "\n"


def report_to_csv(report: EvalReport) -> str:
    lines = ["scope,relation,auc,ap"]
    for scope_name, scope in (("pooled", report.pooled), ("macro", report.macro)):
        for rel in EVAL_RELATIONS:
            lines.append(f"{scope_name},{rel},{scope[rel]['auc']:.6f},{scope[rel]['ap']:.6f}")
    return "\n".join(lines) + "\n"
