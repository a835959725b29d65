"""Training of the linear pseudo-state projections.

Each projection maps a layer-t hidden state of the current token to a
predicted ("pseudo") hidden state of a token several positions ahead, at the
same layer. Training builds a sequence of real rows followed by pseudo-row
blocks, forwards it through the frozen upper layers under a custom mask, and
distils the pseudo rows' output distributions onto the real rows they are
standing in for.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, zero_grads
from .errors import ContractError, DataError, TrainingError
from .model import (
    AttentionSpec,
    HiddenMatrix,
    KvCache,
    ModelConfig,
    ModelWeights,
    causal_mask,
    embed,
    forward_layers,
    logits,
)

__all__ = [
    "Projection",
    "ProjectionSet",
    "ProjectionTrainConfig",
    "init_projection",
    "predict_pseudo",
    "training_attention_mask",
    "TrainingBatch",
    "build_training_sequence",
    "firp_kl_loss",
    "train_projection",
    "evaluate_projection_loss",
    "default_injection_layers",
]


@dataclass
class Projection:
    """One trained linear map predicting the step-``step`` pseudo state.

    Applied row-wise as ``pseudo = h @ w.T + b`` at layer ``layer``.
    ``attend_earlier`` records whether the projection was trained with its
    rows seeing earlier-step pseudo rows; drafting honours the same
    visibility.
    """

    step: int
    layer: int
    w: Tensor
    b: Tensor
    attend_earlier: bool = True

    def __post_init__(self):
        if self.step < 1:
            raise ContractError(f"projection step must be >= 1, got {self.step}")
        if self.w.data.ndim != 2 or self.w.shape[0] != self.w.shape[1]:
            raise ContractError(f"projection weight must be square, got {self.w.shape}")
        if self.b.shape != (self.w.shape[0],):
            raise ContractError(f"projection bias {self.b.shape} vs weight {self.w.shape}")


class ProjectionSet:
    """Projections for steps 1..K with strictly increasing injection layers."""

    def __init__(self, projections: Sequence[Projection]):
        projs = sorted(projections, key=lambda p: p.step)
        steps = [p.step for p in projs]
        if steps != list(range(1, len(projs) + 1)):
            raise ContractError(f"projection steps must be 1..K, got {steps}")
        layers = [p.layer for p in projs]
        if sorted(set(layers)) != layers:
            raise ContractError(f"injection layers must be strictly increasing, got {layers}")
        self.projections = projs

    @property
    def k(self) -> int:
        return len(self.projections)

    @property
    def layers(self) -> list[int]:
        return [p.layer for p in self.projections]

    def __iter__(self):
        return iter(self.projections)

    def __len__(self) -> int:
        return len(self.projections)

    def by_step(self, step: int) -> Projection:
        return self.projections[step - 1]


def default_injection_layers(config: ModelConfig, k: int = 3) -> list[int]:
    """Evenly spaced layers in the upper-middle of the stack (e.g. 4,5,6 of 8)."""
    l = config.n_layers
    if k >= l:
        raise ContractError(f"cannot place {k} injection layers in {l}-layer model")
    return [max(1, min(l - 1, round(l * (0.5 + 0.1 * i)))) for i in range(k)]


def init_projection(
    config: ModelConfig,
    step: int,
    layer: int,
    seed: int = 0,
    noise: float = 0.01,
    attend_earlier: bool = True,
) -> Projection:
    """Identity-plus-noise initialisation: the pseudo state starts as a copy."""
    if not (1 <= layer <= config.n_layers - 1):
        raise ContractError(
            f"injection layer must be in [1, {config.n_layers - 1}], got {layer}"
        )
    rng = np.random.default_rng(seed)
    d = config.d_model
    w = np.eye(d, dtype=np.float32)
    if noise:
        w = w + rng.normal(0.0, noise, size=(d, d)).astype(np.float32)
    return Projection(
        step=step,
        layer=layer,
        w=Tensor(w, requires_grad=True),
        b=Tensor(np.zeros(d, dtype=np.float32), requires_grad=True),
        attend_earlier=attend_earlier,
    )


def predict_pseudo(h: HiddenMatrix, proj: Projection) -> HiddenMatrix:
    """Predict pseudo states row-wise from same-layer real hidden states."""
    if h.layer_index != proj.layer:
        raise ContractError(
            f"hidden states at layer {h.layer_index}, projection expects {proj.layer}"
        )
    values = ad.add(ad.matmul(h.values, ad.transpose(proj.w)), proj.b)
    return HiddenMatrix(values=values, layer_index=proj.layer, pseudo_step=proj.step)


def training_attention_mask(n: int, i: int) -> np.ndarray:
    """Mask over [real rows 1..n | pseudo rows for sources 1..n] at step ``i``.

    Real rows are causal over real columns only. The pseudo row for source j
    stands in for position j+i, so it may view real columns 1..min(j+i-1, n)
    plus itself, and nothing else.
    """
    if n < 1 or i < 1:
        raise ContractError(f"training mask needs n >= 1 and i >= 1, got n={n} i={i}")
    mask = np.zeros((2 * n, 2 * n), dtype=np.bool_)
    mask[:n, :n] = np.tril(np.ones((n, n), dtype=np.bool_))
    for j0 in range(n):
        visible = min(j0 + i, n)  # real columns 1..j+i-1, 1-based
        mask[n + j0, :visible] = True
        mask[n + j0, n + j0] = True
    return mask


@dataclass
class TrainingBatch:
    """One training sequence: real rows plus one pseudo block per step.

    ``blocks`` lists (step, row offset, attend_earlier) in layout order;
    the final block belongs to the step being trained. ``alignment`` maps
    each supervised pseudo row to the real row whose output distribution
    supervises it.
    """

    tokens: np.ndarray
    step: int
    layer: int
    n: int
    blocks: list[tuple[int, int, bool]]
    mask: np.ndarray
    position_ids: np.ndarray
    alignment: list[tuple[int, int]]

    @property
    def total_rows(self) -> int:
        return self.n * (1 + len(self.blocks))


def build_training_sequence(
    tokens: Sequence[int],
    proj: Projection,
    earlier: Sequence[Projection] = (),
) -> TrainingBatch:
    """Lay out rows, mask, positions, and supervision for one training step.

    With ``earlier`` non-empty, previously trained steps' pseudo rows are
    injected too, each under its own visibility rule, and the final step's
    rows may additionally attend the earlier-step row of the same source.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    i = proj.step
    if n < i + 1:
        raise DataError(f"need at least {i + 1} tokens to supervise step {i}, got {n}")
    earlier = sorted(earlier, key=lambda p: p.step)
    for e in earlier:
        if e.step >= i:
            raise ContractError(f"earlier projection step {e.step} not below {i}")
    specs = [(e.step, e.attend_earlier) for e in earlier] + [(i, len(earlier) > 0)]
    blocks = [(step, n * (1 + bi), att) for bi, (step, att) in enumerate(specs)]
    rows = n * (1 + len(blocks))

    mask = np.zeros((rows, rows), dtype=np.bool_)
    mask[:n, :n] = np.tril(np.ones((n, n), dtype=np.bool_))
    positions = np.empty(rows, dtype=np.int64)
    positions[:n] = np.arange(n)
    for step, off, attend_earlier in blocks:
        base = training_attention_mask(n, step)
        mask[off : off + n, :n] = base[n:, :n]
        mask[off : off + n, off : off + n] = base[n:, n:]
        if attend_earlier:
            for e_step, e_off, _ in blocks:
                if e_step < step:
                    idx = np.arange(n)
                    mask[off + idx, e_off + idx] = True
        positions[off : off + n] = np.arange(n) + step

    final_off = blocks[-1][1]
    alignment = [(final_off + j0, j0 + i) for j0 in range(n) if j0 + 1 + i <= n]
    return TrainingBatch(
        tokens=tokens,
        step=i,
        layer=proj.layer,
        n=n,
        blocks=blocks,
        mask=mask,
        position_ids=positions,
        alignment=alignment,
    )


def firp_kl_loss(batch_logits: Tensor, alignment: Sequence[tuple[int, int]]) -> Tensor:
    """Sum of KL(pseudo distribution || real distribution) over supervised rows.

    The real (target) rows are detached: gradients reach only whatever feeds
    the pseudo rows' logits.
    """
    if not alignment:
        raise DataError("empty alignment: nothing to supervise")
    loss: Tensor | None = None
    for pseudo_row, real_row in alignment:
        p = ad.softmax(ad.take_row(batch_logits, pseudo_row))
        target = ad.softmax(Tensor.wrap(batch_logits.data[real_row].copy()))
        term = ad.kl_divergence(p, target)
        loss = term if loss is None else ad.add(loss, term)
    return loss


@dataclass
class ProjectionTrainConfig:
    """Hyper-parameters for training one projection."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    epochs: int = 2
    seq_len: int = 192
    seed: int = 0
    init_noise: float = 0.01
    max_steps: int | None = None


def _chunk_windows(tokens: np.ndarray, seq_len: int) -> list[np.ndarray]:
    n_windows = tokens.size // seq_len
    if n_windows == 0:
        return [tokens]
    return [tokens[i * seq_len : (i + 1) * seq_len] for i in range(n_windows)]


def _real_forward_with_retention(
    weights: ModelWeights,
    tokens: np.ndarray,
    inj_layers: Sequence[int],
    cache: KvCache,
) -> tuple[dict[int, np.ndarray], np.ndarray]:
    """Causal forward of the real rows, retaining hidden states at injection
    layers and committing per-layer keys/values to ``cache``.

    Returns (hidden-by-layer, final logits). Runs without a tape: the base
    model is frozen.
    """
    config = weights.config
    n = len(tokens)
    spec = AttentionSpec(causal_mask(n), np.arange(n))
    h = embed(weights, tokens)
    hidden_at: dict[int, np.ndarray] = {}
    kv_all: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    prev = 0
    for layer in sorted(set(inj_layers)) + [config.n_layers]:
        if layer == prev:
            continue
        h, kv = forward_layers(weights, h, prev, layer, spec, collect_kv=True)
        kv_all.update(kv)
        if layer < config.n_layers:
            hidden_at[layer] = h.values.data.copy()
        prev = layer
    cache.append_block(kv_all, np.arange(n, dtype=np.int64))
    return hidden_at, logits(weights, h).data.copy()


def _forward_pseudo_block(
    weights: ModelWeights,
    batch: TrainingBatch,
    block_index: int,
    hidden: np.ndarray,
    proj: Projection,
    cache: KvCache,
    on_tape: bool,
) -> HiddenMatrix:
    """Forward one pseudo block from its injection layer to the top.

    The block attends the cache (real rows plus earlier blocks) and itself;
    its mask and positions are the corresponding slices of the batch layout.
    With ``append_to_cache`` the block's keys/values extend the cache for any
    later block.
    """
    config = weights.config
    n = batch.n
    _, off, _ = batch.blocks[block_index]
    mask = batch.mask[off : off + n, : off + n]
    positions = batch.position_ids[off : off + n]
    source = HiddenMatrix(Tensor.wrap(hidden), layer_index=proj.layer)
    hp = predict_pseudo(source, proj)
    return forward_layers(
        weights,
        hp,
        proj.layer,
        config.n_layers,
        AttentionSpec(mask, positions),
        cache,
        append_to_cache=not on_tape,
    )


def train_projection(
    weights: ModelWeights,
    corpus_tokens: Sequence[int],
    proj_init: Projection,
    earlier: Sequence[Projection] = (),
    train: ProjectionTrainConfig | None = None,
) -> tuple[Projection, list[float]]:
    """Optimise one projection's weight and bias against the frozen model.

    Earlier-step projections must already be trained; their pseudo rows are
    injected (frozen) so the new step can learn to exploit them. Returns the
    trained projection and the per-step loss history (mean KL per supervised
    row; entry 0 is the loss at initialisation).
    """
    train = train or ProjectionTrainConfig()
    config = weights.config
    weights.freeze()
    proj = proj_init
    earlier = sorted(earlier, key=lambda p: p.step)
    for e in earlier:
        e.w.requires_grad = False
        e.b.requires_grad = False
    proj.w.requires_grad = True
    proj.b.requires_grad = True
    # drafting must replay the visibility the projection was trained with
    proj.attend_earlier = len(earlier) > 0

    tokens = np.asarray(corpus_tokens, dtype=np.int64)
    seq_len = min(train.seq_len, config.max_seq_len - proj.step, tokens.size)
    windows = [w for w in _chunk_windows(tokens, seq_len) if len(w) >= proj.step + 1]
    if not windows:
        raise DataError("corpus too short for projection training")
    rng = np.random.default_rng(train.seed)
    params = {"w": proj.w, "b": proj.b}
    state = ad.AdamWState()
    losses: list[float] = []
    step_count = 0
    for _ in range(train.epochs):
        for w_idx in rng.permutation(len(windows)):
            loss_val = _projection_step(
                weights, windows[w_idx], proj, earlier, params, state, train
            )
            losses.append(loss_val)
            step_count += 1
            if train.max_steps is not None and step_count >= train.max_steps:
                return proj, losses
    return proj, losses


def _projection_step(
    weights: ModelWeights,
    window: np.ndarray,
    proj: Projection,
    earlier: Sequence[Projection],
    params: dict[str, Tensor],
    state: ad.AdamWState,
    train: ProjectionTrainConfig,
) -> float:
    config = weights.config
    batch = build_training_sequence(window, proj, earlier)
    cache = KvCache(config, capacity=batch.total_rows)
    inj_layers = [e.layer for e in earlier] + [proj.layer]
    with ad.fast_matmul():
        hidden_at, real_logits = _real_forward_with_retention(weights, window, inj_layers, cache)

        const_logits = [real_logits]
        for bi, e in enumerate(earlier):
            hb = _forward_pseudo_block(weights, batch, bi, hidden_at[e.layer], e, cache, on_tape=False)
            const_logits.append(logits(weights, hb).data)

        with Tape() as tape:
            hf = _forward_pseudo_block(
                weights, batch, len(earlier), hidden_at[proj.layer], proj, cache, on_tape=True
            )
            final_logits = logits(weights, hf)
            batch_logits = Tensor.wrap(np.concatenate(const_logits, axis=0))
            batch_logits = ad.concat_rows(batch_logits, final_logits)
            loss = firp_kl_loss(batch_logits, batch.alignment)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite projection loss at step {proj.step}")
            backward(tape, loss)
    grads = {"w": proj.w.grad, "b": proj.b.grad}
    ad.adamw_step(params, grads, state, train.lr, train.betas, train.weight_decay)
    zero_grads(params.values())
    return float(loss.data) / max(1, len(batch.alignment))


def evaluate_projection_loss(
    weights: ModelWeights,
    tokens: Sequence[int],
    proj: Projection,
    earlier: Sequence[Projection] = (),
    seq_len: int = 192,
) -> float:
    """Mean KL per supervised row over held-out text, without updating anything."""
    config = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    seq_len = min(seq_len, config.max_seq_len - proj.step, tokens.size)
    windows = [w for w in _chunk_windows(tokens, seq_len) if len(w) >= proj.step + 1]
    if not windows:
        raise DataError("evaluation stream too short")
    total = 0.0
    count = 0
    for window in windows:
        batch = build_training_sequence(window, proj, sorted(earlier, key=lambda p: p.step))
        cache = KvCache(config, capacity=batch.total_rows)
        inj_layers = [e.layer for e in earlier] + [proj.layer]
        hidden_at, real_logits = _real_forward_with_retention(weights, window, inj_layers, cache)
        const_logits = [real_logits]
        for bi, e in enumerate(sorted(earlier, key=lambda p: p.step)):
            hb = _forward_pseudo_block(weights, batch, bi, hidden_at[e.layer], e, cache, on_tape=False)
            const_logits.append(logits(weights, hb).data)
        hf = _forward_pseudo_block(
            weights, batch, len(earlier), hidden_at[proj.layer], proj, cache, on_tape=False
        )
        # cache gained the final block rows; harmless, the cache is per-window scratch
        all_logits = np.concatenate(const_logits + [logits(weights, hf).data], axis=0)
        loss = firp_kl_loss(Tensor.wrap(all_logits), batch.alignment)
        total += float(loss.data)
        count += len(batch.alignment)
    return total / max(1, count)
