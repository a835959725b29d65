"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

A session-scoped fixture trains the desk-scale artifacts once: the default
transformer on the periodic corpus, three pseudo-state projections at layers
4/5/6, a calibrated accuracy table, and the searched 16-node template.
"""

import time

import numpy as np
import pytest

import firp.autodiff as ad
from firp.autodiff import Tape, Tensor, backward
from firp.corpus import corpus_from_text, make_periodic_text
from firp.decode import (
    PrefixState,
    TreeBatch,
    TreeTemplate,
    _plain_forward_with_retention,
    _prefill,
    instantiate_tree,
    speculative_decode,
    step_distributions,
    tree_attention_mask,
    verify_and_extend,
)
from firp.experiments import ablate_mask, eval_accept, probe_refine
from firp.model import (
    AttentionSpec,
    HiddenMatrix,
    KvCache,
    ModelConfig,
    TrainConfig,
    autoregressive_generate,
    causal_mask,
    embed,
    forward_layers,
    greedy_next,
    init_base_weights,
    logits,
    train_base_model,
)
from firp.projections import (
    ProjectionSet,
    ProjectionTrainConfig,
    build_training_sequence,
    evaluate_projection_loss,
    firp_kl_loss,
    init_projection,
    predict_pseudo,
    train_projection,
)
from firp.tree_search import AccuracyTable, calibrate_accuracies, expected_acceptance, greedy_tree_search

from conftest import TINY_CONFIG
from test_autodiff import fd_check
from test_decode import random_projections, random_template
from test_tree_search import enumerate_templates


def report(criterion: str, passed: bool, detail: str) -> None:
    print(f"\n[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


DESK_CONFIG = ModelConfig()  # vocab 128, d 128, 8 layers, 4 heads, ff 512
INJECTION_LAYERS = (4, 5, 6)
PROJ_TRAIN = ProjectionTrainConfig(seq_len=192, epochs=2, seed=0, lr=3e-3)


@pytest.fixture(scope="session")
def desk():
    """Desk-scale artifacts shared by the acceptance criteria."""
    corpus = corpus_from_text(make_periodic_text(1280), seed=0)
    config = ModelConfig(vocab_size=corpus.vocab_size)
    weights, base_losses = train_base_model(
        corpus.train_tokens, config, TrainConfig(seq_len=192, epochs=2, seed=1)
    )
    projections = []
    proj_losses = {}
    for step, layer in enumerate(INJECTION_LAYERS, start=1):
        proj = init_projection(config, step, layer, seed=step - 1)
        proj, losses = train_projection(
            weights, corpus.train_tokens, proj, earlier=list(projections), train=PROJ_TRAIN
        )
        projections.append(proj)
        proj_losses[step] = losses
    projection_set = ProjectionSet(projections)
    table = calibrate_accuracies(
        weights, projection_set, corpus.val_tokens,
        j_max=10, n_probes=400, min_prefix=48, max_prefix=120, seed=0,
    )
    searched_t16 = greedy_tree_search(table, 16)
    return {
        "corpus": corpus,
        "config": config,
        "weights": weights,
        "projections": projection_set,
        "base_losses": base_losses,
        "proj_losses": proj_losses,
        "table": table,
        "t16": searched_t16,
    }


def test_criterion_1_losslessness(desk):
    """Speculative output is token-for-token identical to greedy decoding over
    200 prompts x 64 new tokens, for the K=3 chain and the searched template."""
    weights = desk["weights"]
    projections = desk["projections"]
    test_tokens = desk["corpus"].test_tokens
    rng = np.random.default_rng(11)
    templates = {"chain_k3": TreeTemplate.chain(3), "searched_t16": desk["t16"]}
    n_prompts = 200
    max_new = 64
    start = time.perf_counter()
    mismatches = 0
    for i in range(n_prompts):
        s = int(rng.integers(0, test_tokens.size - 80))
        prompt = test_tokens[s : s + 64].tolist()
        reference = autoregressive_generate(weights, prompt, max_new)
        for name, template in templates.items():
            out, _ = speculative_decode(weights, projections, prompt, max_new, template)
            if out != reference:
                mismatches += 1
    elapsed = time.perf_counter() - start
    passed = mismatches == 0 and elapsed < 300.0
    report(
        "criterion 1 (losslessness)",
        passed,
        f"{n_prompts} prompts x {max_new} tokens x 2 templates, "
        f"{mismatches} mismatches, {elapsed:.0f}s (< 300s)",
    )
    assert mismatches == 0
    assert elapsed < 300.0


def test_criterion_2_gradient_correctness():
    """Every trainable parameter class passes central finite differences
    (delta 1e-3, max relative error < 1e-3) on a d=8, 2-layer config, 10 seeds."""
    config = ModelConfig(vocab_size=12, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=32)
    checked = set()
    for seed in range(10):
        r = np.random.default_rng(seed)
        weights = init_base_weights(config, seed=seed)
        # generic weights: every parameter class gets gradients well above the
        # float32 finite-difference measurement floor
        for name, t in weights.tensors.items():
            t.data += r.normal(0, 0.3, t.data.shape).astype(np.float32)
        tokens = r.integers(0, 12, size=10)
        targets = r.integers(0, 12, size=10)

        def pretrain_loss():
            spec = AttentionSpec(causal_mask(10), np.arange(10))
            h = forward_layers(weights, embed(weights, tokens), 0, 2, spec)
            return ad.cross_entropy(logits(weights, h), targets)

        for name, tensor in weights.tensors.items():
            # atol 5e-6: float32 forward noise floor of the FD oracle
            fd_check(pretrain_loss, tensor, top_k=2, atol=5e-6)
            checked.add(name.split(".")[-1])

        weights.freeze()
        proj = init_projection(config, 1, 1, seed=seed)
        proj.w.data += r.normal(0, 0.3, proj.w.data.shape).astype(np.float32)
        proj.b.data += r.normal(0, 0.3, proj.b.data.shape).astype(np.float32)
        proj.w.requires_grad = proj.b.requires_grad = True
        batch = build_training_sequence(tokens, proj)

        def projection_loss():
            n = len(tokens)
            cache = KvCache(config, capacity=batch.total_rows)
            spec = AttentionSpec(causal_mask(n), np.arange(n))
            h, kv = forward_layers(weights, embed(weights, tokens), 0, 2, spec, collect_kv=True)
            cache.append_block(kv, np.arange(n))
            h1 = forward_layers(weights, embed(weights, tokens), 0, 1, spec)
            hp = predict_pseudo(
                HiddenMatrix(Tensor.wrap(h1.values.data.copy()), layer_index=1), proj
            )
            off = batch.blocks[-1][1]
            mask = batch.mask[off : off + n, : off + n]
            pos = batch.position_ids[off : off + n]
            hf = forward_layers(weights, hp, 1, 2, AttentionSpec(mask, pos), cache)
            batch_logits = ad.concat_rows(
                Tensor.wrap(logits(weights, h).data), logits(weights, hf)
            )
            return firp_kl_loss(batch_logits, batch.alignment)

        fd_check(projection_loss, proj.w, top_k=2)
        fd_check(projection_loss, proj.b, top_k=2)
        checked.update({"proj.W", "proj.b"})
    report(
        "criterion 2 (gradient correctness)",
        True,
        f"10 seeds, parameter classes: {sorted(checked)}",
    )


def test_criterion_3_training_efficacy(desk):
    """Step-1 distillation loss on held-out text drops by at least half within
    two epochs."""
    config = desk["config"]
    weights = desk["weights"]
    val = desk["corpus"].val_tokens
    fresh = init_projection(config, 1, INJECTION_LAYERS[0], seed=0)
    initial = evaluate_projection_loss(weights, val, fresh, seq_len=192)
    trained = evaluate_projection_loss(
        weights, val, desk["projections"].by_step(1), seq_len=192
    )
    drop = 1.0 - trained / initial
    passed = drop >= 0.5
    report(
        "criterion 3 (training efficacy)",
        passed,
        f"held-out step-1 loss {initial:.3f} -> {trained:.3f} ({drop:.0%} drop, need >= 50%)",
    )
    assert passed


def test_criterion_4_step_monotonicity(desk):
    """Per-step top-1 draft accuracy decreases with step, within slack:
    step1 >= step2 - 0.02 >= step3 - 0.04."""
    a = desk["table"].a[:, 0]
    passed = a[0] >= a[1] - 0.02 and a[1] - 0.02 >= a[2] - 0.04
    report(
        "criterion 4 (step monotonicity)",
        passed,
        f"top-1 by step: {np.round(a, 4).tolist()} (400 held-out probes)",
    )
    assert passed


def test_criterion_5_refinement_trend(desk):
    """Pseudo states get closer (cosine) to the true future hidden states as
    they move up the stack: final-layer similarity beats injection-layer
    similarity by at least 0.02, per step."""
    rep = probe_refine(
        desk["weights"], desk["projections"], desk["corpus"].val_tokens,
        n_probes=10, min_prefix=48, max_prefix=120, seed=0,
    )
    gains = {}
    for step_name, series in rep.series.items():
        layers = sorted(series, key=int)
        gains[step_name] = series[layers[-1]] - series[layers[0]]
    passed = all(g >= 0.02 for g in gains.values())
    report(
        "criterion 5 (refinement trend)",
        passed,
        "cosine gain by step: "
        + ", ".join(f"{k}={v:+.3f}" for k, v in sorted(gains.items()))
        + " (need >= +0.02)",
    )
    assert passed


def test_criterion_6_ablation_direction(desk):
    """Letting the step-2 rows see step-1 pseudo rows never hurts: no-masked
    top-1 accuracy >= masked, on paired probes."""
    corpus = desk["corpus"]
    rep = ablate_mask(
        desk["weights"], corpus.train_tokens, corpus.val_tokens,
        INJECTION_LAYERS[0], INJECTION_LAYERS[1],
        train=PROJ_TRAIN, n_probes=200, seed=0, step1=desk["projections"].by_step(1),
    )
    series = rep.series["step2_top1"]
    passed = series["no_masked"] >= series["masked"]
    report(
        "criterion 6 (ablation direction)",
        passed,
        f"no_masked {series['no_masked']:.3f} vs masked {series['masked']:.3f}",
    )
    assert passed


def test_criterion_7_tree_machinery_oracles(rng):
    """Tree masks equal the path-walk oracle; greedy search is within 5% of
    the exhaustive optimum for small budgets; and the worked two-node example
    scores exactly 0.9 vs 0.8."""
    # (a) 100 random templates against the parent-pointer walk
    for _ in range(100):
        tpl = random_template(rng, k=4, max_nodes=12, j_max=3)
        prefix = int(rng.integers(0, 5))
        mask = tree_attention_mask(tpl, prefix)
        for q in range(tpl.node_count):
            ancestors = set()
            p = tpl.nodes[q].parent
            while p != -1:
                ancestors.add(p)
                p = tpl.nodes[p].parent
            for c in range(prefix + tpl.node_count):
                expect = c < prefix or (c - prefix) == q or (c - prefix) in ancestors
                assert mask[q, c] == expect

    # (b) worked example: sibling pair 0.8 vs rank-1 chain 0.9
    from firp.decode import TreeNode

    table = AccuracyTable(np.array([[0.6, 0.2], [0.5, 0.0]]), 100)
    siblings = TreeTemplate([TreeNode(1, 1, -1), TreeNode(1, 2, -1)])
    chain = TreeTemplate([TreeNode(1, 1, -1), TreeNode(2, 1, 0)])
    assert expected_acceptance(siblings, table) == pytest.approx(0.8)
    assert expected_acceptance(chain, table) == pytest.approx(0.9)

    # (c) greedy within 5% of exhaustive optimum, budgets <= 4, 10 tables
    worst = 1.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        a = np.sort(r.random((3, 3)), axis=1)[:, ::-1]
        a = a / np.maximum(a.sum(axis=1, keepdims=True), 1.0) * r.uniform(0.5, 1.0)
        acc = AccuracyTable(a, 100)
        for budget in (1, 2, 3, 4):
            greedy_score = expected_acceptance(greedy_tree_search(acc, budget), acc)
            best = max(expected_acceptance(t, acc) for t in enumerate_templates(3, 3, budget))
            if best > 0:
                worst = min(worst, greedy_score / best)
            assert greedy_score >= 0.95 * best - 1e-12
    report(
        "criterion 7 (tree machinery oracles)",
        True,
        f"100 mask oracles exact; worked example 0.9/0.8 exact; "
        f"greedy/optimum >= {worst:.3f} (need >= 0.95)",
    )


def test_criterion_8_throughput_proxy(desk):
    """Tokens per forward beats 1.3 on the periodic corpus with the searched
    16-node-budget template (the large-model reference numbers are context)."""
    test_tokens = desk["corpus"].test_tokens
    rng = np.random.default_rng(11)
    prompts = [
        test_tokens[int(s) : int(s) + 64].tolist()
        for s in rng.integers(0, test_tokens.size - 200, size=30)
    ]
    summary = eval_accept(desk["weights"], desk["projections"], desk["t16"], prompts, 64)
    tpf = summary["tokens_per_forward"]
    passed = tpf > 1.3
    report(
        "criterion 8 (throughput proxy)",
        passed,
        f"tokens-per-forward {tpf:.3f} (need > 1.3), mean accepted "
        f"{summary['mean_accepted']:.3f}, elapsed {summary['elapsed_seconds']:.1f}s; "
        f"13B reference context: {summary['reference_context_13b']}",
    )
    assert passed


def test_criterion_9_fused_two_pass_equivalence(rng):
    """Next-round draft distributions from fused drafting match the two-pass
    reference within 1e-5, over 50 random decode states."""
    weights, losses = train_base_model(
        (list(range(10)) * 120), TINY_CONFIG, TrainConfig(seq_len=48, epochs=1, seed=5)
    )
    worst = 0.0
    for trial in range(50):
        ps = random_projections(TINY_CONFIG, rng)
        template = random_template(rng)
        prompt = list(rng.integers(0, 10, size=rng.integers(2, 14)))
        cache_f = KvCache(TINY_CONFIG, capacity=96)
        pending_f, dists_f = _prefill(weights, ps, cache_f, prompt, True, True)
        cache_t = KvCache(TINY_CONFIG, capacity=96)
        pending_t, dists_t = _prefill(weights, ps, cache_t, prompt, False, True)
        assert pending_f == pending_t
        worst = max(worst, float(np.abs(dists_f - dists_t).max()))
        # one verification round in each mode
        batch_f = TreeBatch.build(instantiate_tree(template, dists_f), pending_f, len(prompt), cache_f)
        acc_f, next_f, _ = verify_and_extend(weights, ps, batch_f, cache_f, fused=True)
        batch_t = TreeBatch.build(instantiate_tree(template, dists_t), pending_t, len(prompt), cache_t)
        acc_t, next_t, _ = verify_and_extend(weights, ps, batch_t, cache_t, fused=False)
        assert acc_f.node_indices == acc_t.node_indices
        assert acc_f.bonus_token == acc_t.bonus_token
        worst = max(worst, float(np.abs(next_f - next_t).max()))
        assert worst <= 1e-5
    report(
        "criterion 9 (fused/two-pass equivalence)",
        True,
        f"50 random decode states, max distribution difference {worst:.2e} (<= 1e-5)",
    )


def test_criterion_10_cache_integrity(rng):
    """After every round's compaction in 50 randomized traces, continuing from
    the live cache matches full recomputation: logits within 1e-5, greedy
    tokens exactly."""
    weights, _ = train_base_model(
        (list(range(10)) * 120), TINY_CONFIG, TrainConfig(seq_len=48, epochs=1, seed=5)
    )
    worst = 0.0
    for trial in range(50):
        ps = random_projections(TINY_CONFIG, rng)
        template = random_template(rng)
        prompt = list(rng.integers(0, 10, size=rng.integers(2, 10)))
        max_new = int(rng.integers(4, 16))
        cache = KvCache(TINY_CONFIG, capacity=128)
        pending, dists = _prefill(weights, ps, cache, prompt, True, True)
        committed = prompt + [pending]
        for _ in range(3):
            if len(committed) - len(prompt) >= max_new:
                break
            batch = TreeBatch.build(
                instantiate_tree(template, dists), pending, len(committed) - 1, cache
            )
            accepted, dists, _ = verify_and_extend(weights, ps, batch, cache)
            committed += [batch.tree.tokens[v] for v in accepted.node_indices]
            committed += [accepted.bonus_token]
            pending = accepted.bonus_token
            # the cache now holds everything committed except the pending token
            assert cache.slot_count == len(committed) - 1
            np.testing.assert_array_equal(
                cache.positions[: cache.slot_count], np.arange(len(committed) - 1)
            )
            # continue one row from the live cache vs a fresh recompute
            pos = np.array([len(committed) - 1])
            mask = np.ones((1, cache.slot_count + 1), dtype=bool)
            live = forward_layers(
                weights, embed(weights, [pending], pos), 0, TINY_CONFIG.n_layers,
                AttentionSpec(mask, pos), cache,
            )
            live_logits = logits(weights, live).data[0]
            fresh_cache = KvCache(TINY_CONFIG, capacity=128)
            n = len(committed) - 1
            _, _, kv = _plain_forward_with_retention(
                weights, fresh_cache, committed[:-1], np.arange(n), causal_mask(n)
            )
            fresh_cache.append_block(kv, np.arange(n))
            fresh = forward_layers(
                weights, embed(weights, [pending], pos), 0, TINY_CONFIG.n_layers,
                AttentionSpec(mask, pos), fresh_cache,
            )
            fresh_logits = logits(weights, fresh).data[0]
            worst = max(worst, float(np.abs(live_logits - fresh_logits).max()))
            assert greedy_next(live_logits) == greedy_next(fresh_logits)
            assert worst <= 1e-5
    report(
        "criterion 10 (cache integrity)",
        True,
        f"50 randomized traces, max logit difference {worst:.2e} (<= 1e-5), greedy exact",
    )
