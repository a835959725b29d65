"""Tree-verified speculative decoding with fused pseudo-state drafting.

Each round flattens a candidate-token tree behind the last committed token,
verifies every root-to-node path in one forward under a tree attention mask,
and — in the same forward — injects pseudo states for every row so the next
round's draft distributions come out for free. A greedy acceptance walk picks
the longest drafted path that matches what the model itself would emit, so
the output stream is identical to plain autoregressive decoding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CapacityError, ContractError, TemplateError
from .model import (
    AttentionSpec,
    HiddenMatrix,
    KvCache,
    ModelWeights,
    causal_mask,
    embed,
    forward_layers,
    greedy_next,
    logits,
)
from .projections import Projection, ProjectionSet, predict_pseudo

__all__ = [
    "TreeNode",
    "TreeTemplate",
    "DraftTree",
    "PrefixState",
    "AcceptedPath",
    "DecodeMetrics",
    "tree_attention_mask",
    "instantiate_tree",
    "step_distributions",
    "verify_and_extend",
    "speculative_decode",
    "compact_cache",
]


@dataclass(frozen=True)
class TreeNode:
    """One candidate slot: the rank-``rank`` token of the step-``step`` draft
    distribution, attached under ``parent`` (-1 for the tree root)."""

    step: int
    rank: int
    parent: int


class TreeTemplate:
    """A fixed draft-tree skeleton, reused every decoding round."""

    def __init__(self, nodes: Sequence[TreeNode]):
        nodes = list(nodes)
        seen_children: set[tuple[int, int]] = set()
        for idx, nd in enumerate(nodes):
            if nd.rank < 1:
                raise TemplateError(f"node {idx}: rank must be >= 1, got {nd.rank}")
            if nd.parent >= idx or nd.parent < -1:
                raise TemplateError(
                    f"node {idx}: parent {nd.parent} is cyclic or undefined"
                )
            expected_step = 1 if nd.parent == -1 else nodes[nd.parent].step + 1
            if nd.step != expected_step:
                raise TemplateError(
                    f"node {idx}: step {nd.step} inconsistent with parent (expected {expected_step})"
                )
            key = (nd.parent, nd.rank)
            if key in seen_children:
                raise TemplateError(f"duplicate child (parent={nd.parent}, rank={nd.rank})")
            seen_children.add(key)
        self.nodes = nodes

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def max_step(self) -> int:
        return max((nd.step for nd in self.nodes), default=0)

    def children(self, parent: int) -> list[int]:
        return [i for i, nd in enumerate(self.nodes) if nd.parent == parent]

    def ancestors(self, idx: int) -> list[int]:
        out = []
        p = self.nodes[idx].parent
        while p != -1:
            out.append(p)
            p = self.nodes[p].parent
        return out[::-1]

    @staticmethod
    def chain(depth: int) -> "TreeTemplate":
        """Single greedy path: rank-1 candidate at every step."""
        return TreeTemplate([TreeNode(s + 1, 1, s - 1) for s in range(depth)])

    def to_json(self) -> str:
        return json.dumps(
            {"nodes": [{"step": n.step, "rank": n.rank, "parent": None if n.parent == -1 else n.parent} for n in self.nodes]}
        )

    @staticmethod
    def from_json(text: str) -> "TreeTemplate":
        obj = json.loads(text)
        nodes = [
            TreeNode(int(n["step"]), int(n["rank"]), -1 if n["parent"] is None else int(n["parent"]))
            for n in obj["nodes"]
        ]
        return TreeTemplate(nodes)

    def __eq__(self, other) -> bool:
        return isinstance(other, TreeTemplate) and self.nodes == other.nodes


@dataclass
class DraftTree:
    """A template instantiated with concrete candidate token ids."""

    template: TreeTemplate
    tokens: list[int]


def tree_attention_mask(template: TreeTemplate, prefix_len: int) -> np.ndarray:
    """Mask for a flattened tree: each node sees the whole prefix, its
    ancestors, and itself — never a sibling branch."""
    n = template.node_count
    mask = np.zeros((n, prefix_len + n), dtype=np.bool_)
    mask[:, :prefix_len] = True
    for idx, nd in enumerate(template.nodes):
        if nd.parent != -1:
            mask[idx, prefix_len:] |= mask[nd.parent, prefix_len:]
            mask[idx, prefix_len + nd.parent] = True
        mask[idx, prefix_len + idx] = True
    return mask


def instantiate_tree(template: TreeTemplate, distributions: np.ndarray) -> DraftTree:
    """Fill a template with tokens: node (step, rank) takes the rank-th most
    probable token of the step's draft distribution (probability ties resolve
    to the lower token id)."""
    dists = np.asarray(distributions)
    k, vocab = dists.shape
    if template.max_step > k:
        raise TemplateError(f"template needs {template.max_step} steps, have {k}")
    orders = [np.argsort(-dists[i], kind="stable") for i in range(k)]
    tokens = []
    for nd in template.nodes:
        if nd.rank > vocab:
            raise TemplateError(f"rank {nd.rank} exceeds vocabulary size {vocab}")
        tokens.append(int(orders[nd.step - 1][nd.rank - 1]))
    return DraftTree(template=template, tokens=tokens)


@dataclass
class PrefixState:
    """Everything drafting needs about the last committed, forwarded position:
    the cache, that position's hidden state at every injection layer, and its
    position id."""

    cache: KvCache
    hidden_by_layer: dict[int, np.ndarray]
    last_position: int


@dataclass
class AcceptedPath:
    """Result of one acceptance walk: accepted template nodes in root-to-leaf
    order (possibly none) and the always-present bonus token."""

    node_indices: list[int]
    bonus_token: int


@dataclass
class DecodeMetrics:
    """Per-session decoding counters."""

    forward_count: int = 0
    emitted_token_count: int = 0
    accepted_histogram: dict[int, int] = field(default_factory=dict)
    draft_hits: dict[int, int] = field(default_factory=dict)
    draft_counts: dict[int, int] = field(default_factory=dict)

    def record_round(self, accepted_len: int) -> None:
        self.forward_count += 1
        self.emitted_token_count += accepted_len + 1
        self.accepted_histogram[accepted_len] = self.accepted_histogram.get(accepted_len, 0) + 1

    def record_draft_outcome(self, step: int, hit: bool) -> None:
        self.draft_counts[step] = self.draft_counts.get(step, 0) + 1
        if hit:
            self.draft_hits[step] = self.draft_hits.get(step, 0) + 1

    @property
    def mean_accepted(self) -> float:
        if self.forward_count == 0:
            return 0.0
        return (self.emitted_token_count - self.forward_count) / self.forward_count

    @property
    def tokens_per_forward(self) -> float:
        if self.forward_count == 0:
            return 0.0
        return self.emitted_token_count / self.forward_count

    def to_dict(self) -> dict:
        return {
            "forward_count": self.forward_count,
            "emitted_token_count": self.emitted_token_count,
            "mean_accepted": self.mean_accepted,
            "tokens_per_forward": self.tokens_per_forward,
            "accepted_histogram": {str(k): v for k, v in sorted(self.accepted_histogram.items())},
            "draft_top1_accuracy": {
                str(s): self.draft_hits.get(s, 0) / c
                for s, c in sorted(self.draft_counts.items())
                if c
            },
        }


def compact_cache(cache: KvCache, keep_slots: Sequence[int]) -> KvCache:
    """Drop all slots outside ``keep_slots`` (ascending), preserving order."""
    cache.compact(keep_slots)
    return cache


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    m = x64.max(axis=-1, keepdims=True)
    e = np.exp(x64 - m)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def _plain_forward_with_retention(
    weights: ModelWeights,
    cache: KvCache,
    tokens: Sequence[int],
    positions: np.ndarray,
    mask: np.ndarray,
    retain_layers: Sequence[int] = (),
):
    """Forward token rows through the full stack without touching the cache.

    Returns (row logits, hidden states at each requested layer, per-layer
    keys/values for the caller to commit).
    """
    config = weights.config
    h = embed(weights, tokens, positions)
    hidden_at: dict[int, np.ndarray] = {}
    kv_all: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    spec = AttentionSpec(mask, positions)
    retain = set(retain_layers)
    prev = 0
    for layer in sorted(retain | {config.n_layers}):
        if layer == prev:
            continue
        h, kv = forward_layers(weights, h, prev, layer, spec, cache, collect_kv=True)
        kv_all.update(kv)
        if layer in retain:
            hidden_at[layer] = h.values.data.copy()
        prev = layer
    return logits(weights, h).data, hidden_at, kv_all


def _fused_forward(
    weights: ModelWeights,
    projections: ProjectionSet,
    cache: KvCache,
    tokens: Sequence[int],
    positions: np.ndarray,
    token_mask: np.ndarray,
    sources: Sequence[int],
):
    """Forward token rows plus pseudo rows for every source row, in one pass.

    At each projection's injection layer, pseudo rows predicted from the
    source rows' current hidden states join the batch. A pseudo row sees its
    source's context, the same source's earlier-step pseudo rows (when the
    projection was trained that way), and itself. Token rows never see pseudo
    rows, so their outputs are exactly those of a plain forward.

    Returns (token row logits, pseudo logits [K, n_sources, vocab],
    per-layer token-row keys/values).
    """
    config = weights.config
    r = len(tokens)
    c = cache.slot_count
    k = projections.k
    s = len(sources)
    sources = np.asarray(sources, dtype=np.int64)
    total = r + k * s

    full_mask = np.zeros((total, c + total), dtype=np.bool_)
    full_mask[:r, : c + r] = token_mask
    full_pos = np.empty(total, dtype=np.int64)
    full_pos[:r] = positions
    for bi, proj in enumerate(projections):
        off = r + bi * s
        full_mask[off : off + s, : c + r] = token_mask[sources]
        if proj.attend_earlier:
            for mb in range(bi):
                full_mask[off + np.arange(s), c + r + mb * s + np.arange(s)] = True
        full_mask[off + np.arange(s), c + off + np.arange(s)] = True
        full_pos[off : off + s] = positions[sources] + proj.step

    h = embed(weights, tokens, positions)
    kv_token: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    prev = 0
    active = r
    for proj in projections:
        t = proj.layer
        if t > prev:
            spec = AttentionSpec(full_mask[:active, : c + active], full_pos[:active])
            h, kv = forward_layers(weights, h, prev, t, spec, cache, collect_kv=True)
            kv_token.update({l: (kk[:, :r], vv[:, :r]) for l, (kk, vv) in kv.items()})
            prev = t
        src_hidden = HiddenMatrix(Tensor.wrap(h.values.data[sources].copy()), layer_index=t)
        pseudo = predict_pseudo(src_hidden, proj)
        h = HiddenMatrix(
            Tensor.wrap(np.concatenate([h.values.data, pseudo.values.data], axis=0)),
            layer_index=t,
        )
        active += s
    spec = AttentionSpec(full_mask[:active, : c + active], full_pos[:active])
    h, kv = forward_layers(weights, h, prev, config.n_layers, spec, cache, collect_kv=True)
    kv_token.update({l: (kk[:, :r], vv[:, :r]) for l, (kk, vv) in kv.items()})
    all_logits = logits(weights, h).data
    token_logits = all_logits[:r]
    pseudo_logits = all_logits[r:].reshape(k, s, config.vocab_size)
    return token_logits, pseudo_logits, kv_token


def step_distributions(
    weights: ModelWeights,
    projections: ProjectionSet,
    prefix: PrefixState,
    record_trace: bool = False,
):
    """Draft distributions for the K future steps, two-pass style.

    Injects each step's pseudo state at its layer and forwards it over the
    committed cache, letting later steps attend earlier steps' pseudo rows.
    This is the reference path that fused drafting must reproduce. With
    ``record_trace`` the pseudo hidden state after every layer is captured
    (used by the refinement probe).

    Returns (distributions [K, vocab], trace {step: {layer: vector}}).
    """
    config = weights.config
    cache = prefix.cache
    committed = cache.slot_count
    dists = np.zeros((projections.k, config.vocab_size), dtype=np.float32)
    trace: dict[int, dict[int, np.ndarray]] = {}
    try:
        for proj in projections:
            if proj.layer not in prefix.hidden_by_layer:
                raise ContractError(
                    f"no retained hidden state for injection layer {proj.layer}"
                )
            src = prefix.hidden_by_layer[proj.layer].reshape(1, -1)
            h = predict_pseudo(
                HiddenMatrix(Tensor.wrap(src.copy()), layer_index=proj.layer), proj
            )
            pos = np.array([prefix.last_position + proj.step], dtype=np.int64)
            mask = np.zeros((1, cache.slot_count + 1), dtype=np.bool_)
            mask[0, :committed] = True
            if proj.attend_earlier:
                mask[0, committed : cache.slot_count] = True
            mask[0, cache.slot_count] = True
            if record_trace:
                steps = {}
                kv_scratch: dict[int, tuple[np.ndarray, np.ndarray]] = {}
                steps[proj.layer] = h.values.data[0].copy()
                for layer in range(proj.layer, config.n_layers):
                    h, kv = forward_layers(
                        weights, h, layer, layer + 1, AttentionSpec(mask, pos), cache, collect_kv=True
                    )
                    kv_scratch.update(kv)
                    steps[layer + 1] = h.values.data[0].copy()
                cache.append_block(kv_scratch, pos)
                trace[proj.step] = steps
            else:
                h = forward_layers(
                    weights,
                    h,
                    proj.layer,
                    config.n_layers,
                    AttentionSpec(mask, pos),
                    cache,
                    append_to_cache=True,
                )
            dists[proj.step - 1] = _softmax_rows(logits(weights, h).data)[0]
    finally:
        cache.compact(list(range(committed)))
    return dists, trace


def _token_rows_mask(template: TreeTemplate, prefix_len: int) -> np.ndarray:
    """Mask for [pending root + flattened tree nodes] over [cache + rows]."""
    n = template.node_count
    mask = np.zeros((1 + n, prefix_len + 1 + n), dtype=np.bool_)
    mask[0, : prefix_len + 1] = True  # root: all prefix slots and itself
    if n:
        mask[1:] = tree_attention_mask(template, prefix_len + 1)
    return mask


@dataclass
class TreeBatch:
    """One round's flattened verification batch."""

    tree: DraftTree
    tokens: np.ndarray  # pending root token followed by node tokens
    positions: np.ndarray
    mask: np.ndarray  # token-row mask over [cache slots | token rows]

    @staticmethod
    def build(tree: DraftTree, pending_token: int, root_position: int, cache: KvCache) -> "TreeBatch":
        template = tree.template
        tokens = np.array([pending_token] + tree.tokens, dtype=np.int64)
        depths = np.array([0] + [nd.step for nd in template.nodes], dtype=np.int64)
        return TreeBatch(
            tree=tree,
            tokens=tokens,
            positions=root_position + depths,
            mask=_token_rows_mask(template, cache.slot_count),
        )


def _acceptance_walk(
    template: TreeTemplate, draft_tokens: Sequence[int], token_logits: np.ndarray
) -> tuple[list[int], int, int]:
    """Greedy walk: keep descending while some child drafted exactly the token
    the model wants next. Returns (accepted nodes, bonus token, stop row)."""
    children_of: dict[int, list[int]] = {}
    for idx, nd in enumerate(template.nodes):
        children_of.setdefault(nd.parent, []).append(idx)
    path: list[int] = []
    current = -1  # template index; -1 is the pending root (row 0)
    while True:
        row = 0 if current == -1 else 1 + current
        want = greedy_next(token_logits[row])
        match = next(
            (ch for ch in children_of.get(current, []) if draft_tokens[ch] == want), None
        )
        if match is None:
            return path, want, row
        path.append(match)
        current = match


def verify_and_extend(
    weights: ModelWeights,
    projections: ProjectionSet,
    batch: TreeBatch,
    cache: KvCache,
    fused: bool = True,
):
    """Verify one tree batch, commit the accepted rows, and draft the next round.

    One forward produces logits for every tree row; the acceptance walk picks
    the longest drafted path matching the model's own greedy choices, plus a
    bonus token at the stop. The cache gains all token rows and is then
    compacted to {prefix, root, accepted path}. With ``fused`` the same
    forward also injects pseudo rows for every tree row, so the stop row's
    next-round distributions are already available; otherwise a second
    drafting pass runs against the committed cache.

    Returns (AcceptedPath, next distributions [K, vocab], stop row logits).
    """
    template = batch.tree.template
    r = len(batch.tokens)
    prefix_len = cache.slot_count
    if fused:
        token_logits, pseudo_logits, kv_token = _fused_forward(
            weights, projections, cache, batch.tokens, batch.positions, batch.mask, range(r)
        )
        hidden_at = None
    else:
        retain = [p.layer for p in projections]
        token_logits, hidden_at, kv_token = _plain_forward_with_retention(
            weights, cache, batch.tokens, batch.positions, batch.mask, retain
        )
    path, bonus, stop_row = _acceptance_walk(template, batch.tree.tokens, token_logits)

    cache.append_block(kv_token, batch.positions)
    keep = list(range(prefix_len)) + [prefix_len] + [prefix_len + 1 + v for v in path]
    compact_cache(cache, keep)

    if fused:
        dists = _softmax_rows(pseudo_logits[:, stop_row, :])
    else:
        state = PrefixState(
            cache=cache,
            hidden_by_layer={l: h[stop_row] for l, h in hidden_at.items()},
            last_position=int(batch.positions[stop_row]),
        )
        dists, _ = step_distributions(weights, projections, state)
    return AcceptedPath(node_indices=path, bonus_token=bonus), dists, token_logits[stop_row]


def _prefill(
    weights: ModelWeights,
    projections: ProjectionSet | None,
    cache: KvCache,
    prompt: Sequence[int],
    fused: bool,
    draft: bool,
):
    """Forward the whole prompt, commit it, and draft from its last row.

    Returns (greedy next token, draft distributions or None).
    """
    n = len(prompt)
    positions = np.arange(n, dtype=np.int64)
    mask = causal_mask(n)
    if draft and fused:
        token_logits, pseudo_logits, kv = _fused_forward(
            weights, projections, cache, prompt, positions, mask, [n - 1]
        )
        cache.append_block(kv, positions)
        return greedy_next(token_logits[-1]), _softmax_rows(pseudo_logits[:, 0, :])
    retain = [p.layer for p in projections] if (draft and projections) else []
    token_logits, hidden_at, kv = _plain_forward_with_retention(
        weights, cache, prompt, positions, mask, retain
    )
    cache.append_block(kv, positions)
    if not draft:
        return greedy_next(token_logits[-1]), None
    state = PrefixState(
        cache=cache,
        hidden_by_layer={l: h[-1] for l, h in hidden_at.items()},
        last_position=n - 1,
    )
    dists, _ = step_distributions(weights, projections, state)
    return greedy_next(token_logits[-1]), dists


def speculative_decode(
    weights: ModelWeights,
    projections: ProjectionSet,
    prompt: Sequence[int],
    max_new_tokens: int,
    template: TreeTemplate,
    two_pass: bool = False,
) -> tuple[list[int], DecodeMetrics]:
    """Greedy decoding accelerated by tree-verified drafts.

    The emitted tokens are exactly those of ``autoregressive_generate`` on
    the same prompt: drafts only ever change how many forwards it takes. An
    empty template degrades to one token per forward. ``two_pass`` switches
    drafting to the separate-pass reference mode.
    """
    config = weights.config
    metrics = DecodeMetrics()
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ContractError("prompt must contain at least one token")
    if template.max_step > projections.k:
        raise TemplateError(
            f"template uses step {template.max_step}, projections cover {projections.k}"
        )
    k = projections.k
    if len(prompt) + max_new_tokens + 2 * k > config.max_seq_len:
        raise CapacityError(
            f"{len(prompt)}+{max_new_tokens} tokens (+{2 * k} drafting margin) "
            f"exceed max_seq_len {config.max_seq_len}"
        )
    if max_new_tokens == 0:
        return prompt, metrics

    drafting = template.node_count > 0
    cache = KvCache(config, capacity=len(prompt) + max_new_tokens + template.node_count + 2)
    pending, dists = _prefill(weights, projections, cache, prompt, not two_pass, drafting)
    metrics.record_round(0)
    emitted = [pending]
    last_accepted = 0

    while len(emitted) < max_new_tokens:
        if not drafting:
            pos = np.array([len(prompt) + len(emitted) - 1], dtype=np.int64)
            mask = np.ones((1, cache.slot_count + 1), dtype=np.bool_)
            row_logits, _, kv = _plain_forward_with_retention(
                weights, cache, [pending], pos, mask
            )
            cache.append_block(kv, pos)
            pending = greedy_next(row_logits[0])
            emitted.append(pending)
            metrics.record_round(0)
            continue
        tree = instantiate_tree(template, dists)
        batch = TreeBatch.build(tree, pending, len(prompt) + len(emitted) - 1, cache)
        accepted, dists_next, _ = verify_and_extend(
            weights, projections, batch, cache, fused=not two_pass
        )
        round_tokens = [batch.tree.tokens[v] for v in accepted.node_indices] + [
            accepted.bonus_token
        ]
        for offset, token in enumerate(round_tokens, start=1):
            if offset <= k:
                metrics.record_draft_outcome(offset, greedy_next(dists[offset - 1]) == token)
        emitted.extend(round_tokens)
        last_accepted = len(accepted.node_indices)
        metrics.record_round(last_accepted)
        dists = dists_next
        pending = accepted.bonus_token

    surplus = len(emitted) - max_new_tokens
    if surplus > 0:
        # retroactively shorten the last round so the histogram stays
        # consistent with the emitted count
        metrics.accepted_histogram[last_accepted] -= 1
        if metrics.accepted_histogram[last_accepted] == 0:
            del metrics.accepted_histogram[last_accepted]
        kept = last_accepted - surplus
        metrics.accepted_histogram[kept] = metrics.accepted_histogram.get(kept, 0) + 1
        metrics.emitted_token_count -= surplus
        emitted = emitted[:max_new_tokens]
    return prompt + emitted, metrics
