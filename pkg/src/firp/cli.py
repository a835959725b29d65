"""Command-line interface.

Subcommands cover the full pipeline: pretraining the toy model, training the
pseudo-state projections, decoding, acceptance evaluation, draft calibration,
tree search, and the analytical experiment drivers. All file formats are the
checkpoint and JSON formats defined by the library. ``FIRP_SEED`` provides
the default seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Corpus, corpus_from_text, encode, ingest_corpus
from .decode import TreeTemplate, speculative_decode
from .errors import DependencyError, FirpError, ParameterError
from .experiments import (
    ablate_mask,
    baseline,
    eval_accept,
    probe_refine,
    sweep_layers,
)
from .model import ModelConfig, TrainConfig, train_base_model
from .projections import (
    ProjectionSet,
    ProjectionTrainConfig,
    default_injection_layers,
    init_projection,
    train_projection,
)
from .tree_search import AccuracyTable, calibrate_accuracies, expected_acceptance, greedy_tree_search

__all__ = ["cli_dispatch", "main"]


def _default_seed() -> int:
    return int(os.environ.get("FIRP_SEED", "0"))


def _add_corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", help="path to a UTF-8 text corpus")
    p.add_argument(
        "--synthetic",
        choices=["periodic", "template"],
        help="use a built-in synthetic corpus instead of --corpus",
    )
    p.add_argument("--copies", type=int, default=600, help="periodic corpus size")
    p.add_argument("--lines", type=int, default=800, help="template corpus size")


def _load_corpus(args) -> Corpus:
    if args.corpus:
        return ingest_corpus(args.corpus, seed=args.seed)
    if args.synthetic == "template":
        return corpus_from_text(corpus_mod.make_template_text(args.lines, seed=args.seed), seed=args.seed)
    return corpus_from_text(corpus_mod.make_periodic_text(args.copies), seed=args.seed)


def _read_prompts(path: str) -> list[list[int]]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
    if not lines:
        raise ParameterError(f"prompt file {path} has no non-empty lines")
    return [encode(ln) for ln in lines]


def _load_template(path: str) -> TreeTemplate:
    return TreeTemplate.from_json(Path(path).read_text(encoding="utf-8"))


def _require_projections(projections: ProjectionSet | None) -> ProjectionSet:
    if projections is None:
        raise DependencyError("checkpoint has no trained projections; run train-firp first")
    return projections


def _emit(obj: dict) -> None:
    print(json.dumps(obj))


def _cmd_train_base(args) -> int:
    corpus = _load_corpus(args)
    config = ModelConfig(
        vocab_size=corpus.vocab_size,
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
        max_seq_len=args.max_seq_len,
        position_encoding=args.positions,
    )
    train = TrainConfig(
        lr=args.lr, epochs=args.epochs, seq_len=args.seq_len, seed=args.seed,
        max_steps=args.max_steps,
    )
    weights, losses = train_base_model(corpus.train_tokens, config, train)
    save_checkpoint(args.out, weights)
    _emit({
        "command": "train-base",
        "out": str(args.out),
        "steps": len(losses),
        "initial_loss": losses[0],
        "final_loss": float(np.mean(losses[-10:])),
    })
    return 0


def _cmd_train_firp(args) -> int:
    weights, existing = load_checkpoint(args.model)
    corpus = _load_corpus(args)
    trained = list(existing) if existing is not None else []
    have_steps = [p.step for p in trained]
    if have_steps != list(range(1, args.step)):
        raise DependencyError(
            f"training step {args.step} requires steps {list(range(1, args.step))} "
            f"already trained, checkpoint has {have_steps}"
        )
    layer = args.layer
    if layer is None:
        layer = default_injection_layers(weights.config, max(args.step, 3))[args.step - 1]
    train = ProjectionTrainConfig(
        lr=args.lr, epochs=args.epochs, seq_len=args.seq_len, seed=args.seed,
        max_steps=args.max_steps,
    )
    proj = init_projection(weights.config, args.step, layer, seed=args.seed)
    earlier = [] if args.masked else trained
    proj, losses = train_projection(weights, corpus.train_tokens, proj, earlier=earlier, train=train)
    out = args.out or args.model
    save_checkpoint(out, weights, ProjectionSet(trained + [proj]))
    _emit({
        "command": "train-firp",
        "out": str(out),
        "step": args.step,
        "layer": layer,
        "masked": bool(args.masked),
        "steps": len(losses),
        "initial_loss": losses[0],
        "final_loss": float(np.mean(losses[-10:])),
    })
    return 0


def _cmd_decode(args) -> int:
    weights, projections = load_checkpoint(args.model)
    projections = _require_projections(projections)
    template = _load_template(args.template)
    for prompt in _read_prompts(args.prompt_file):
        tokens, metrics = speculative_decode(
            weights, projections, prompt, args.max_new, template, two_pass=args.two_pass
        )
        _emit({
            "prompt": corpus_mod.decode(prompt),
            "text": corpus_mod.decode(tokens[len(prompt):]),
            "metrics": metrics.to_dict(),
        })
    return 0


def _cmd_eval_accept(args) -> int:
    weights, projections = load_checkpoint(args.model)
    projections = _require_projections(projections)
    template = TreeTemplate([]) if args.autoregressive else _load_template(args.template)
    prompts = _read_prompts(args.prompt_file)
    summary = eval_accept(weights, projections, template, prompts, args.max_new)
    if not args.per_prompt:
        summary.pop("per_prompt")
    _emit(summary)
    return 0


def _cmd_calibrate(args) -> int:
    weights, projections = load_checkpoint(args.model)
    projections = _require_projections(projections)
    corpus = _load_corpus(args)
    table = calibrate_accuracies(
        weights, projections, corpus.split(args.split),
        j_max=args.j_max, n_probes=args.probes, seed=args.seed,
    )
    Path(args.out).write_text(table.to_json())
    _emit({"command": "calibrate", "out": args.out, "sample_count": table.sample_count,
           "top1_by_step": {str(i + 1): float(table.a[i, 0]) for i in range(table.k)}})
    return 0


def _cmd_search_tree(args) -> int:
    table = AccuracyTable.from_json(Path(args.table).read_text())
    template = greedy_tree_search(table, args.budget)
    Path(args.out).write_text(template.to_json())
    _emit({
        "command": "search-tree",
        "out": args.out,
        "budget": args.budget,
        "node_count": template.node_count,
        "expected_acceptance": expected_acceptance(template, table),
    })
    return 0


def _cmd_probe_refine(args) -> int:
    weights, projections = load_checkpoint(args.model)
    projections = _require_projections(projections)
    corpus = _load_corpus(args)
    report = probe_refine(
        weights, projections, corpus.split(args.split),
        n_probes=args.probes, seed=args.seed,
    )
    _emit(report.to_dict())
    return 0


def _cmd_sweep_layers(args) -> int:
    weights, _ = load_checkpoint(args.model)
    corpus = _load_corpus(args)
    layers = [int(x) for x in args.layers.split(",")]
    train = ProjectionTrainConfig(lr=args.lr, epochs=args.epochs, seq_len=args.seq_len,
                                  seed=args.seed, max_steps=args.max_steps)
    report = sweep_layers(
        weights, corpus.train_tokens, corpus.val_tokens, layers, args.step,
        step1_layer=args.step1_layer, train=train, n_probes=args.probes, seed=args.seed,
    )
    _emit(report.to_dict())
    return 0


def _cmd_ablate_mask(args) -> int:
    weights, _ = load_checkpoint(args.model)
    corpus = _load_corpus(args)
    train = ProjectionTrainConfig(lr=args.lr, epochs=args.epochs, seq_len=args.seq_len,
                                  seed=args.seed, max_steps=args.max_steps)
    report = ablate_mask(
        weights, corpus.train_tokens, corpus.val_tokens,
        args.step1_layer, args.step2_layer, train=train, n_probes=args.probes, seed=args.seed,
    )
    _emit(report.to_dict())
    return 0


def _cmd_baseline(args) -> int:
    weights, _ = load_checkpoint(args.model)
    corpus = _load_corpus(args)
    layers = default_injection_layers(weights.config, args.k)
    train = ProjectionTrainConfig(lr=args.lr, epochs=args.epochs, seq_len=args.seq_len,
                                  seed=args.seed, max_steps=args.max_steps)
    _, report = baseline(
        args.kind, weights, corpus.train_tokens, corpus.val_tokens, args.k, layers,
        train=train, n_probes=args.probes, seed=args.seed,
    )
    _emit(report.to_dict())
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="firp",
        description="Desk-scale speculative decoding via pseudo hidden states",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=False, training=False):
        p.add_argument("--seed", type=int, default=_default_seed())
        if corpus:
            _add_corpus_args(p)
        if training:
            p.add_argument("--lr", type=float, default=1e-3)
            p.add_argument("--epochs", type=int, default=2)
            p.add_argument("--seq-len", type=int, default=192)
            p.add_argument("--max-steps", type=int, default=None)

    p = sub.add_parser("train-base", help="pretrain the toy transformer")
    common(p, corpus=True, training=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--n-layers", type=int, default=8)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=512)
    p.add_argument("--max-seq-len", type=int, default=512)
    p.add_argument("--positions", choices=["rotary", "learned"], default="rotary")
    p.set_defaults(fn=_cmd_train_base)

    p = sub.add_parser("train-firp", help="train one pseudo-state projection step")
    common(p, corpus=True, training=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="output checkpoint (default: overwrite --model)")
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--masked", action="store_true",
                   help="train without earlier-step pseudo rows (ablation arm)")
    p.set_defaults(fn=_cmd_train_firp)

    p = sub.add_parser("decode", help="speculative decoding over prompt lines")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--template", required=True)
    p.add_argument("--two-pass", action="store_true")
    p.set_defaults(fn=_cmd_decode)

    p = sub.add_parser("eval-accept", help="acceptance-length summary over prompts")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--template")
    p.add_argument("--autoregressive", action="store_true",
                   help="evaluate the one-token-per-forward baseline")
    p.add_argument("--per-prompt", action="store_true")
    p.set_defaults(fn=_cmd_eval_accept)

    p = sub.add_parser("calibrate", help="measure per-step per-rank draft accuracy")
    common(p, corpus=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="val")
    p.add_argument("--j-max", type=int, default=10)
    p.add_argument("--probes", type=int, default=100)
    p.set_defaults(fn=_cmd_calibrate)

    p = sub.add_parser("search-tree", help="search a draft-tree template under a node budget")
    common(p)
    p.add_argument("--table", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_search_tree)

    p = sub.add_parser("probe-refine", help="pseudo-vs-real hidden state similarity by layer")
    common(p, corpus=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="val")
    p.add_argument("--probes", type=int, default=10)
    p.set_defaults(fn=_cmd_probe_refine)

    p = sub.add_parser("sweep-layers", help="draft accuracy as the injection layer varies")
    common(p, corpus=True, training=True)
    p.add_argument("--model", required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--layers", required=True, help="comma-separated candidate layers")
    p.add_argument("--step1-layer", type=int, default=None)
    p.add_argument("--probes", type=int, default=60)
    p.set_defaults(fn=_cmd_sweep_layers)

    p = sub.add_parser("ablate-mask", help="step-2 accuracy with vs without step-1 visibility")
    common(p, corpus=True, training=True)
    p.add_argument("--model", required=True)
    p.add_argument("--step1-layer", type=int, required=True)
    p.add_argument("--step2-layer", type=int, required=True)
    p.add_argument("--probes", type=int, default=60)
    p.set_defaults(fn=_cmd_ablate_mask)

    p = sub.add_parser("baseline", help="train and evaluate a linear-head draft baseline")
    common(p, corpus=True, training=True)
    p.add_argument("--model", required=True)
    p.add_argument("--kind", choices=["medusa_head", "early_exit"], required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--probes", type=int, default=100)
    p.set_defaults(fn=_cmd_baseline)

    return parser


def cli_dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except FirpError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))
