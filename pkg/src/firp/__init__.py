"""Desk-scale transformer inference engine with pseudo-hidden-state
speculative decoding.

Linear projections predict intermediate-layer hidden states of future tokens;
the frozen model refines them through its remaining layers to decode draft
tokens, and a tree-attention verifier keeps the output identical to plain
greedy decoding.
"""

from .autodiff import Tape, Tensor, backward
from .corpus import Corpus, corpus_from_text, ingest_corpus
from .checkpoint import load_checkpoint, save_checkpoint
from .decode import (
    AcceptedPath,
    DecodeMetrics,
    DraftTree,
    TreeNode,
    TreeTemplate,
    compact_cache,
    instantiate_tree,
    speculative_decode,
    step_distributions,
    tree_attention_mask,
    verify_and_extend,
)
from .errors import FirpError
from .model import (
    AttentionSpec,
    HiddenMatrix,
    KvCache,
    ModelConfig,
    ModelWeights,
    TrainConfig,
    autoregressive_generate,
    embed,
    forward_layers,
    greedy_next,
    init_base_weights,
    logits,
    train_base_model,
)
from .projections import (
    Projection,
    ProjectionSet,
    ProjectionTrainConfig,
    build_training_sequence,
    firp_kl_loss,
    init_projection,
    predict_pseudo,
    train_projection,
    training_attention_mask,
)
from .tree_search import (
    AccuracyTable,
    calibrate_accuracies,
    expected_acceptance,
    greedy_tree_search,
)

__version__ = "0.1.0"
