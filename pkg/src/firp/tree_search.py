"""Searching for draft-tree templates that maximise expected accepted length.

Calibration measures, per prediction step, how often the model's true next
choice lands at each rank of the draft distribution. Under independence
across steps, a candidate node is accepted with the product of the rank
accuracies along its root path; the search greedily grows the template that
maximises the summed acceptance probability within a node budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .decode import PrefixState, TreeNode, TreeTemplate, step_distributions, _plain_forward_with_retention
from .errors import DataError, ParameterError, TableError
from .model import (
    AttentionSpec,
    KvCache,
    ModelWeights,
    causal_mask,
    embed,
    forward_layers,
    greedy_next,
    logits,
)
from .projections import ProjectionSet

__all__ = [
    "AccuracyTable",
    "calibrate_accuracies",
    "expected_acceptance",
    "greedy_tree_search",
    "token_rank",
]


@dataclass
class AccuracyTable:
    """``a[i-1][j-1]``: probability that the step-i ground-truth token is the
    rank-j draft candidate."""

    a: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.ndim != 2:
            raise TableError(f"accuracy table must be 2-d, got shape {self.a.shape}")
        if np.any(self.a < 0) or np.any(self.a > 1):
            raise TableError("accuracy entries must lie in [0, 1]")
        if np.any(self.a.sum(axis=1) > 1 + 1e-9):
            raise TableError("rank accuracies of one step must sum to at most 1")

    @property
    def k(self) -> int:
        return self.a.shape[0]

    @property
    def j_max(self) -> int:
        return self.a.shape[1]

    def to_json(self) -> str:
        return json.dumps({"a": self.a.tolist(), "sample_count": self.sample_count})

    @staticmethod
    def from_json(text: str) -> "AccuracyTable":
        obj = json.loads(text)
        return AccuracyTable(np.array(obj["a"]), int(obj["sample_count"]))


def token_rank(dist: np.ndarray, token: int) -> int:
    """1-based rank of ``token`` under (probability desc, token id asc) order."""
    p = dist[token]
    higher = int(np.sum(dist > p))
    tied_before = int(np.sum(dist[:token] == p))
    return higher + tied_before + 1


def calibrate_accuracies(
    weights: ModelWeights,
    projections: ProjectionSet,
    eval_tokens,
    j_max: int = 10,
    n_probes: int = 100,
    min_prefix: int = 8,
    max_prefix: int = 96,
    seed: int = 0,
) -> AccuracyTable:
    """Empirical per-step per-rank draft accuracy on held-out text.

    Samples split points, drafts the K step distributions at each prefix, and
    records the rank of the token the model itself would emit at each future
    step (greedy continuation). Ranks beyond ``j_max`` are dropped, so each
    step's accuracies sum to at most one.
    """
    config = weights.config
    tokens = np.asarray(eval_tokens, dtype=np.int64)
    k = projections.k
    need = min_prefix + k + 2
    if tokens.size < need:
        raise DataError(f"evaluation stream needs at least {need} tokens, got {tokens.size}")
    rng = np.random.default_rng(seed)
    counts = np.zeros((k, j_max), dtype=np.int64)
    retain = [p.layer for p in projections]
    for _ in range(n_probes):
        n = int(rng.integers(min_prefix, min(max_prefix, config.max_seq_len - 2 * k - 2) + 1))
        start = int(rng.integers(0, tokens.size - n))
        prompt = tokens[start : start + n]
        cache = KvCache(config, capacity=n + 2 * k + 4)
        positions = np.arange(n, dtype=np.int64)
        row_logits, hidden_at, kv = _plain_forward_with_retention(
            weights, cache, prompt, positions, causal_mask(n), retain
        )
        cache.append_block(kv, positions)
        state = PrefixState(
            cache=cache,
            hidden_by_layer={l: h[-1] for l, h in hidden_at.items()},
            last_position=n - 1,
        )
        dists, _ = step_distributions(weights, projections, state)
        # greedy continuation: tokens at offsets 1..k+1 past the prefix
        future = [greedy_next(row_logits[-1])]
        for _ in range(k):
            pos = np.array([n - 1 + len(future)], dtype=np.int64)
            mask = np.ones((1, cache.slot_count + 1), dtype=np.bool_)
            h = embed(weights, [future[-1]], pos)
            h = forward_layers(
                weights, h, 0, config.n_layers, AttentionSpec(mask, pos), cache, append_to_cache=True
            )
            future.append(greedy_next(logits(weights, h).data[0]))
        for step in range(1, k + 1):
            rank = token_rank(dists[step - 1], future[step])
            if rank <= j_max:
                counts[step - 1, rank - 1] += 1
    return AccuracyTable(counts / max(1, n_probes), sample_count=n_probes)


def expected_acceptance(template: TreeTemplate, table: AccuracyTable) -> float:
    """Expected number of accepted draft nodes under rank independence."""
    total = 0.0
    path_prob: list[float] = []
    for idx, node in enumerate(template.nodes):
        if node.step > table.k:
            raise TableError(f"node step {node.step} exceeds table steps {table.k}")
        if node.rank > table.j_max:
            raise TableError(f"node rank {node.rank} exceeds table ranks {table.j_max}")
        parent_prob = 1.0 if node.parent == -1 else path_prob[node.parent]
        prob = parent_prob * table.a[node.step - 1, node.rank - 1]
        path_prob.append(prob)
        total += prob
    return total


def greedy_tree_search(table: AccuracyTable, node_budget: int) -> TreeTemplate:
    """Grow the template one node at a time, always taking the frontier node
    with the largest acceptance-probability contribution.

    Ties resolve by (lower step, lower rank, earlier parent), which makes the
    result deterministic for any table.
    """
    if node_budget < 1:
        raise ParameterError(f"node budget must be >= 1, got {node_budget}")
    nodes: list[TreeNode] = []
    path_prob: list[float] = []
    used: set[tuple[int, int]] = set()
    for _ in range(node_budget):
        best: tuple | None = None
        parents: list[tuple[int, int, float]] = [(-1, 0, 1.0)] + [
            (i, nodes[i].step, path_prob[i]) for i in range(len(nodes))
        ]
        for parent, parent_step, parent_prob in parents:
            step = parent_step + 1
            if step > table.k:
                continue
            for rank in range(1, table.j_max + 1):
                if (parent, rank) in used:
                    continue
                contribution = parent_prob * table.a[step - 1, rank - 1]
                key = (-contribution, step, rank, parent)
                if best is None or key < best:
                    best = key
        if best is None or -best[0] <= 0.0:
            break  # nothing left that could ever be accepted
        contribution, step, rank, parent = -best[0], best[1], best[2], best[3]
        nodes.append(TreeNode(step=step, rank=rank, parent=parent))
        path_prob.append(contribution)
        used.add((parent, rank))
    return TreeTemplate(nodes)
