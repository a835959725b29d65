"""Toy decoder-only transformer with explicit masks, positions, and a KV cache.

LLaMA-flavoured blocks: pre-norm RMS normalisation, rotary (or learned)
positions, SiLU-gated feed-forward. Small enough to train on a laptop yet
structured like the real thing: every forward takes an explicit attention
mask and per-row position ids, and the stack can be entered and left at any
layer boundary, which is what the pseudo-state machinery builds on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, zero_grads
from .errors import (
    CapacityError,
    ContractError,
    DataError,
    DimensionError,
    TrainingError,
    VocabularyError,
)

__all__ = [
    "ModelConfig",
    "ModelWeights",
    "AttentionSpec",
    "KvCache",
    "HiddenMatrix",
    "TrainConfig",
    "init_base_weights",
    "causal_mask",
    "embed",
    "forward_layers",
    "logits",
    "greedy_next",
    "autoregressive_generate",
    "train_base_model",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters for the toy transformer."""

    vocab_size: int = 128
    d_model: int = 128
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 512
    position_encoding: str = "rotary"  # "rotary" | "learned"
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    tie_lm_head: bool = False

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ContractError(f"vocab_size must be >= 2, got {self.vocab_size}")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.position_encoding not in ("rotary", "learned"):
            raise ContractError(f"unknown position_encoding {self.position_encoding!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "position_encoding": self.position_encoding,
            "rope_base": self.rope_base,
            "norm_eps": self.norm_eps,
            "tie_lm_head": self.tie_lm_head,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def _expected_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical tensor name/shape listing; also the checkpoint record order."""
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    shapes: list[tuple[str, tuple[int, ...]]] = [("embed.tokens", (v, d))]
    if config.position_encoding == "learned":
        shapes.append(("embed.positions", (config.max_seq_len, d)))
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "attn_norm", (d,)),
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "ffn_norm", (d,)),
            (p + "w1", (d, ff)),
            (p + "w3", (d, ff)),
            (p + "w2", (ff, d)),
        ]
    shapes.append(("final_norm", (d,)))
    if not config.tie_lm_head:
        shapes.append(("lm_head", (d, v)))
    return shapes


class ModelWeights:
    """All parameters of one model, addressable by name.

    Immutable once training finishes; safe to share across concurrent decode
    sessions. Rotary tables are derived from the config, not stored.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = dict(_expected_shapes(config))
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise ContractError(f"weight set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise DimensionError(
                    f"weight {name}: expected shape {shape}, got {tensors[name].shape}"
                )
        self.config = config
        self.tensors = tensors
        if config.position_encoding == "rotary":
            self.rope_cos, self.rope_sin = ad.rotary_tables(
                config.head_dim, config.max_seq_len, config.rope_base
            )
        else:
            self.rope_cos = self.rope_sin = None

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return [name for name, _ in _expected_shapes(self.config)]

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if t.requires_grad}

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False

    def lm_head_matrix(self) -> Tensor:
        if self.config.tie_lm_head:
            return ad.transpose(self.tensors["embed.tokens"])
        return self.tensors["lm_head"]


def init_base_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Gaussian init (std 0.02, residual outputs scaled down by depth)."""
    rng = np.random.default_rng(seed)
    std = 0.02
    res_std = std / np.sqrt(2.0 * config.n_layers)

    def normal(shape, s):
        return Tensor(rng.normal(0.0, s, size=shape).astype(np.float32), requires_grad=True)

    tensors: dict[str, Tensor] = {}
    for name, shape in _expected_shapes(config):
        if name.endswith("_norm") or name == "final_norm":
            tensors[name] = Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)
        elif name.endswith(".wo") or name.endswith(".w2"):
            tensors[name] = normal(shape, res_std)
        elif name == "embed.positions":
            tensors[name] = normal(shape, std)
        else:
            tensors[name] = normal(shape, std)
    return ModelWeights(config, tensors)


@dataclass
class AttentionSpec:
    """Boolean attention mask plus one position id per query row.

    ``mask[q, c]`` true means query row ``q`` may attend key column ``c``.
    Columns cover the cache slots (if any) followed by the query rows
    themselves.
    """

    mask: np.ndarray
    position_ids: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.bool_)
        self.position_ids = np.asarray(self.position_ids, dtype=np.int64)
        if self.mask.ndim != 2:
            raise ContractError(f"attention mask must be 2-d, got shape {self.mask.shape}")
        if self.position_ids.shape != (self.mask.shape[0],):
            raise ContractError(
                f"position_ids {self.position_ids.shape} vs mask rows {self.mask.shape[0]}"
            )
        if self.mask.shape[0] and not self.mask.any(axis=1).all():
            raise ContractError("every query row must attend at least one key")


def causal_mask(q_len: int, kv_offset: int = 0) -> np.ndarray:
    """Standard causal mask: row i sees all cache slots plus rows 0..i."""
    mask = np.zeros((q_len, kv_offset + q_len), dtype=np.bool_)
    mask[:, :kv_offset] = True
    mask[:, kv_offset:] = np.tril(np.ones((q_len, q_len), dtype=np.bool_))
    return mask


class KvCache:
    """Per-layer key/value slots for committed context rows.

    Slot counts are identical across layers at every API boundary. Keys are
    stored post-rotation, so each slot also remembers its position id.
    """

    def __init__(self, config: ModelConfig, capacity: int | None = None):
        self.config = config
        self.capacity = capacity if capacity is not None else config.max_seq_len
        h, hd = config.n_heads, config.head_dim
        self.k = [np.zeros((h, self.capacity, hd), dtype=np.float32) for _ in range(config.n_layers)]
        self.v = [np.zeros((h, self.capacity, hd), dtype=np.float32) for _ in range(config.n_layers)]
        self.positions = np.zeros(self.capacity, dtype=np.int64)
        self.slot_count = 0

    def layer_kv(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.slot_count
        return self.k[layer][:, :s], self.v[layer][:, :s]

    def append_block(
        self,
        kv_by_layer: dict[int, tuple[np.ndarray, np.ndarray]],
        positions: np.ndarray,
    ) -> None:
        """Append one block of slots atomically across all layers.

        Layers absent from ``kv_by_layer`` receive zero rows; those slots must
        never be attended at such layers (enforced by callers' masks).
        """
        count = len(positions)
        if count == 0:
            return
        if self.slot_count + count > self.capacity:
            raise CapacityError(
                f"cache overflow: {self.slot_count}+{count} > capacity {self.capacity}"
            )
        s = self.slot_count
        for layer in range(self.config.n_layers):
            if layer in kv_by_layer:
                k_rows, v_rows = kv_by_layer[layer]
                self.k[layer][:, s : s + count] = k_rows
                self.v[layer][:, s : s + count] = v_rows
            else:
                self.k[layer][:, s : s + count] = 0.0
                self.v[layer][:, s : s + count] = 0.0
        self.positions[s : s + count] = positions
        self.slot_count = s + count

    def compact(self, keep_slots: Sequence[int]) -> None:
        """Retain exactly ``keep_slots`` (ascending), preserving relative order."""
        keep = np.asarray(keep_slots, dtype=np.int64)
        if keep.size:
            if keep.min() < 0 or keep.max() >= self.slot_count:
                raise ContractError(f"keep slot out of range 0..{self.slot_count - 1}")
            if np.any(np.diff(keep) <= 0):
                raise ContractError("keep_slots must be strictly ascending")
        for layer in range(self.config.n_layers):
            self.k[layer][:, : keep.size] = self.k[layer][:, keep]
            self.v[layer][:, : keep.size] = self.v[layer][:, keep]
        self.positions[: keep.size] = self.positions[keep]
        self.slot_count = int(keep.size)


@dataclass
class HiddenMatrix:
    """Hidden states for a row block, tagged with the layer that produced them."""

    values: Tensor
    layer_index: int
    pseudo_step: int | None = None

    def __post_init__(self):
        if self.values.data.ndim != 2:
            raise ContractError(f"hidden states must be [seq, d], got {self.values.shape}")


def embed(
    weights: ModelWeights,
    tokens: Sequence[int],
    position_ids: np.ndarray | None = None,
) -> HiddenMatrix:
    """Token embeddings (plus learned position embeddings when configured)."""
    config = weights.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise VocabularyError(
            f"token id outside vocabulary of size {config.vocab_size}"
        )
    if position_ids is None:
        position_ids = np.arange(len(ids), dtype=np.int64)
    position_ids = np.asarray(position_ids, dtype=np.int64)
    x = ad.embedding_lookup(weights["embed.tokens"], ids)
    if config.position_encoding == "learned":
        if position_ids.size and (position_ids.min() < 0 or position_ids.max() >= config.max_seq_len):
            raise CapacityError("position id outside learned position table")
        pos = ad.embedding_lookup(weights["embed.positions"], position_ids)
        x = ad.add(x, pos)
    return HiddenMatrix(values=x, layer_index=0)


def _attention_block(
    weights: ModelWeights,
    layer: int,
    x: Tensor,
    spec: AttentionSpec,
    ctx_k: np.ndarray | None,
    ctx_v: np.ndarray | None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    config = weights.config
    p = f"layers.{layer}."
    xn = ad.rmsnorm(x, weights[p + "attn_norm"], config.norm_eps)
    q = ad.matmul(xn, weights[p + "wq"])
    k = ad.matmul(xn, weights[p + "wk"])
    v = ad.matmul(xn, weights[p + "wv"])
    qh = ad.to_heads(q, config.n_heads)
    kh = ad.to_heads(k, config.n_heads)
    vh = ad.to_heads(v, config.n_heads)
    if config.position_encoding == "rotary":
        qh = ad.rotary_apply(qh, spec.position_ids, weights.rope_cos, weights.rope_sin)
        kh = ad.rotary_apply(kh, spec.position_ids, weights.rope_cos, weights.rope_sin)
    if ctx_k is not None and ctx_k.shape[1]:
        k_all = ad.concat_slots(Tensor.wrap(ctx_k), kh)
        v_all = ad.concat_slots(Tensor.wrap(ctx_v), vh)
    else:
        k_all, v_all = kh, vh
    scores = ad.scale(ad.bmm(qh, k_all, transpose_b=True), 1.0 / np.sqrt(config.head_dim))
    probs = ad.masked_softmax(scores, spec.mask[None, :, :])
    context = ad.bmm(probs, v_all)
    out = ad.matmul(ad.from_heads(context), weights[p + "wo"])
    return ad.add(x, out), kh.data, vh.data


def _ffn_block(weights: ModelWeights, layer: int, x: Tensor) -> Tensor:
    p = f"layers.{layer}."
    xn = ad.rmsnorm(x, weights[p + "ffn_norm"], weights.config.norm_eps)
    gate = ad.silu(ad.matmul(xn, weights[p + "w1"]))
    up = ad.matmul(xn, weights[p + "w3"])
    return ad.add(x, ad.matmul(ad.mul(gate, up), weights[p + "w2"]))


def forward_layers(
    weights: ModelWeights,
    h: HiddenMatrix,
    from_layer: int,
    to_layer: int,
    spec: AttentionSpec,
    cache: KvCache | None = None,
    append_to_cache: bool = False,
    cache_rows: int | None = None,
    collect_kv: bool = False,
):
    """Run layers ``from_layer..to_layer-1`` over a row block.

    Key/value columns are the cache slots (if a cache is given) followed by
    the query rows themselves, and ``spec.mask`` must match that width. With
    ``append_to_cache``, the first ``cache_rows`` rows (default: all) are
    committed to the cache at every layer in range. With ``collect_kv`` the
    per-layer key/value rows are also returned for the caller to commit
    selectively later.
    """
    config = weights.config
    if h.layer_index != from_layer:
        raise ContractError(f"hidden states are at layer {h.layer_index}, expected {from_layer}")
    if not (0 <= from_layer < to_layer <= config.n_layers):
        raise ContractError(f"invalid layer range [{from_layer}, {to_layer})")
    q_len = h.values.shape[0]
    kv_len = (cache.slot_count if cache is not None else 0) + q_len
    if spec.mask.shape != (q_len, kv_len):
        raise ContractError(
            f"mask shape {spec.mask.shape} does not match (q={q_len}, kv={kv_len})"
        )
    if spec.position_ids.size and (
        spec.position_ids.min() < 0 or spec.position_ids.max() >= config.max_seq_len
    ):
        raise CapacityError("position id outside [0, max_seq_len)")
    rows = q_len if cache_rows is None else cache_rows
    x = h.values
    kv_out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for layer in range(from_layer, to_layer):
        if cache is not None:
            ctx_k, ctx_v = cache.layer_kv(layer)
        else:
            ctx_k = ctx_v = None
        x, kh, vh = _attention_block(weights, layer, x, spec, ctx_k, ctx_v)
        x = _ffn_block(weights, layer, x)
        if append_to_cache or collect_kv:
            kv_out[layer] = (kh, vh)
    if append_to_cache:
        if cache is None:
            raise ContractError("append_to_cache requires a cache")
        cache.append_block(
            {l: (k[:, :rows], v[:, :rows]) for l, (k, v) in kv_out.items()},
            spec.position_ids[:rows],
        )
    result = HiddenMatrix(values=x, layer_index=to_layer, pseudo_step=h.pseudo_step)
    if collect_kv:
        return result, kv_out
    return result


def logits(weights: ModelWeights, h: HiddenMatrix) -> Tensor:
    """Final-norm then language-model head; requires final-layer hidden states."""
    config = weights.config
    if h.layer_index != config.n_layers:
        raise ContractError(
            f"logits need layer-{config.n_layers} states, got layer {h.layer_index}"
        )
    xn = ad.rmsnorm(h.values, weights["final_norm"], config.norm_eps)
    return ad.matmul(xn, weights.lm_head_matrix())


def greedy_next(logit_row: np.ndarray | Tensor) -> int:
    """Argmax token id; ties resolve to the lowest id."""
    row = logit_row.data if isinstance(logit_row, Tensor) else np.asarray(logit_row)
    return int(np.argmax(row))


def autoregressive_generate(
    weights: ModelWeights,
    prompt: Sequence[int],
    max_new_tokens: int,
    use_cache: bool = True,
) -> list[int]:
    """Plain greedy decoding, one token per forward.

    This is the reference the speculative path must match token-for-token.
    With ``use_cache=False`` every step recomputes the full sequence, which
    serves as the cache-correctness oracle.
    """
    config = weights.config
    prompt = list(int(t) for t in prompt)
    if not prompt:
        raise DataError("prompt must contain at least one token")
    if len(prompt) + max_new_tokens > config.max_seq_len:
        raise CapacityError(
            f"{len(prompt)}+{max_new_tokens} tokens exceed max_seq_len {config.max_seq_len}"
        )
    if max_new_tokens == 0:
        return prompt
    out = list(prompt)
    if not use_cache:
        for _ in range(max_new_tokens):
            h = embed(weights, out)
            spec = AttentionSpec(causal_mask(len(out)), np.arange(len(out)))
            h = forward_layers(weights, h, 0, config.n_layers, spec)
            row = logits(weights, h).data[-1]
            out.append(greedy_next(row))
        return out
    cache = KvCache(config)
    spec = AttentionSpec(causal_mask(len(prompt)), np.arange(len(prompt)))
    h = forward_layers(weights, embed(weights, prompt), 0, config.n_layers, spec, cache, True)
    next_token = greedy_next(logits(weights, h).data[-1])
    out.append(next_token)
    for _ in range(max_new_tokens - 1):
        pos = np.array([len(out) - 1], dtype=np.int64)
        mask = np.ones((1, cache.slot_count + 1), dtype=np.bool_)
        h = embed(weights, [out[-1]], pos)
        h = forward_layers(weights, h, 0, config.n_layers, AttentionSpec(mask, pos), cache, True)
        out.append(greedy_next(logits(weights, h).data[-1]))
    return out


@dataclass
class TrainConfig:
    """Hyper-parameters for the base-model pretraining loop."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    epochs: int = 2
    seq_len: int = 192
    seed: int = 0
    max_steps: int | None = None


def train_base_model(
    corpus_tokens: Sequence[int],
    config: ModelConfig,
    train: TrainConfig | None = None,
) -> tuple[ModelWeights, list[float]]:
    """Next-token cross-entropy training from scratch.

    Returns the weights and the per-step loss history (entry 0 is the loss at
    initialisation on the first window). Deterministic given the seed.
    """
    train = train or TrainConfig()
    tokens = np.asarray(corpus_tokens, dtype=np.int64)
    if tokens.size < 2:
        raise DataError("corpus too small to form a single training pair")
    seq = min(train.seq_len, config.max_seq_len, tokens.size - 1)
    n_windows = tokens.size // (seq + 1)
    if n_windows == 0:
        windows = [tokens[: seq + 1]]
    else:
        windows = [tokens[i * (seq + 1) : (i + 1) * (seq + 1)] for i in range(n_windows)]
    rng = np.random.default_rng(train.seed)
    weights = init_base_weights(config, seed=train.seed)
    params = weights.trainable()
    state = ad.AdamWState()
    losses: list[float] = []
    step = 0
    for _ in range(train.epochs):
        order = rng.permutation(len(windows))
        for w_idx in order:
            window = windows[w_idx]
            inp, tgt = window[:-1], window[1:]
            with ad.fast_matmul(), Tape() as tape:
                h = embed(weights, inp)
                spec = AttentionSpec(causal_mask(len(inp)), np.arange(len(inp)))
                h = forward_layers(weights, h, 0, config.n_layers, spec)
                loss = ad.cross_entropy(logits(weights, h), tgt)
                if not np.isfinite(loss.data):
                    raise TrainingError(f"non-finite training loss at step {step}")
                backward(tape, loss)
            grads = {n: t.grad for n, t in params.items()}
            ad.adamw_step(params, grads, state, train.lr, train.betas, train.weight_decay)
            zero_grads(params.values())
            losses.append(loss.item())
            step += 1
            if train.max_steps is not None and step >= train.max_steps:
                return weights, losses
    return weights, losses
