"""Acceptance criteria, one test each; every test appends a PASS/FAIL line to the run summary."""
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from gems import checkpoint
from gems.decoder import choice_distribution, cross_entropy_loss, predict_edges
from gems.encoder import EncoderConfig, load_params, save_params
from gems.evalreport import random_baseline, random_baseline_exact
from gems.graph import HeteroGraph, build_graph
from gems.optim import clip_gradients, cosine_lr, global_norm
from gems.projection import DEFAULT_ALPHA_GRID, alpha_scores, fit_ridge, select_alpha
from gems.split import (bucket_sizes, draw_mask_edge_level, draw_mask_individual_level, split_individuals,
                        split_questions)
from gems.trainer import (Stage1Result, TrainConfig, TrainReport, embed, evaluate, predict_targets, train_setting1,
                          train_setting2, train_setting3_stage1)

from conftest import ACCEPTANCE_LINES, random_graph
from fd import fixture as fd_fixture, max_relative_error
from oracles import layer_oracle_error, ridge_oracle
from planted import low_rank_population, majority_baseline, subgroup_population

ARCHS = ("rgcn", "gat", "sage")


def record(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_01_gradient_oracle():
    start = time.perf_counter()
    worst, where = 0.0, ""
    for arch in ARCHS:
        for seed in range(3):
            graph, params, plan = fd_fixture(seed, arch)
            err, at = max_relative_error(graph, params, plan, train=True, seed=seed)
            if err > worst:
                worst, where = err, f"{arch} seed {seed} {at}"
    elapsed = time.perf_counter() - start
    record(1, worst < 1e-4 and elapsed < 60,
           f"max relative error {worst:.2e} (< 1e-4) in {elapsed:.1f}s (< 60s); worst at {where}")


def test_criterion_02_layer_oracles():
    worst = max(layer_oracle_error(seed, arch, layer) for arch in ARCHS for layer in (0, 1) for seed in range(20))
    record(2, worst < 1e-10, f"max abs deviation from dense reference {worst:.2e} (< 1e-10) over 20 fixtures "
                             f"x 3 architectures x 2 layers")


def test_criterion_03_ridge_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    monotone = True
    for _ in range(20):
        n, d, k = int(rng.integers(5, 120)), int(rng.integers(2, 48)), int(rng.integers(1, 9))
        H, Z = rng.normal(size=(n, d)) * rng.uniform(0.1, 10), rng.normal(size=(n, k))
        alpha = float(10 ** rng.uniform(-2, 3))
        W, ref = fit_ridge(H, Z, alpha).W, ridge_oracle(H, Z, alpha)
        worst = max(worst, np.linalg.norm(W - ref) / np.linalg.norm(ref))
        norms = [np.linalg.norm(fit_ridge(H, Z, a).W) for a in (0.01, 0.1, 1, 10, 100, 1000, 1e4)]
        monotone &= all(b <= a for a, b in zip(norms, norms[1:]))
    record(3, worst < 1e-8 and monotone,
           f"max relative Frobenius error {worst:.2e} (< 1e-8) on 20 systems; norm non-increasing in alpha: {monotone}")


def test_criterion_04_decoder_analytics():
    rng = np.random.default_rng(4)
    norm_err = shift_err = 0.0
    for _ in range(200):
        k = int(rng.integers(2, 9))
        z_u, embs, tau = rng.normal(size=6), rng.normal(size=(k, 6)) * 4, float(rng.uniform(0.05, 10))
        p = choice_distribution(z_u, embs, tau).probabilities
        q = choice_distribution(z_u, embs + rng.normal(size=6), tau).probabilities
        norm_err = max(norm_err, abs(p.sum() - 1.0))
        shift_err = max(shift_err, float(np.abs(p - q).max()))
    exact = True
    for seed in range(5):
        r = np.random.default_rng(seed)
        counts = r.integers(2, 7, size=6)
        catalog = [(f"q{q}", f"o{i}", i) for q, k in enumerate(counts) for i in range(k)]
        responses = [(f"u{u}", f"q{q}", f"o{r.integers(counts[q])}") for u in range(4) for q in range(6)]
        graph, _ = build_graph(responses, [], catalog)
        emb = {"U": np.zeros((4, 3)), "C": r.normal(size=(graph.n_choices, 3))}
        loss, logp = cross_entropy_loss(emb, np.arange(graph.n_responses), graph.responses, graph.catalog, 1.3)
        ks = graph.catalog.option_counts[graph.edge_question]
        exact &= all(lp == -math.log(k) for lp, k in zip(logp, ks))
        exact &= loss == -float(np.sum(-np.log(ks.astype(np.float64))))
    record(4, norm_err <= 1e-9 and shift_err <= 1e-12 and exact,
           f"|sum p - 1| max {norm_err:.1e} (<= 1e-9); shift deviation {shift_err:.1e} (<= 1e-12); "
           f"uniform-score loss equals sum ln k exactly: {exact}")


def test_criterion_05_protocol_counting():
    violations = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        graph, _ = random_graph(rng, n_individuals=int(rng.integers(2, 25)), n_questions=int(rng.integers(1, 6)))
        observed = np.flatnonzero(rng.random(graph.n_responses) < 0.8)
        if observed.size == 0:
            observed = np.arange(graph.n_responses)
        ratio = float(rng.uniform(0.05, 0.95))
        for plan in (draw_mask_edge_level(observed, ratio, seed), draw_mask_individual_level(observed, graph, ratio,
                                                                                           seed)):
            both = np.concatenate([plan.message_edges, plan.supervision_edges])
            violations += int(not np.array_equal(np.sort(both), observed))
        sup_owners = set(graph.responses[plan.supervision_edges, 0].tolist())
        msg_owners = set(graph.responses[plan.message_edges, 0].tolist())
        violations += int(bool(sup_owners & msg_owners))
        all_of = graph.responses[observed, 0]
        for u in sup_owners:
            violations += int(not np.isin(observed[all_of == u], plan.supervision_edges).all())
    sizes = (bucket_sizes(100, (0.35, 0.05, 0.60)), bucket_sizes(1000, (0.35, 0.05, 0.60)),
             bucket_sizes(50, (0.70, 0.10, 0.20)), bucket_sizes(30, (0.70, 0.10, 0.20)))
    graph = subgroup_population(n_individuals=100, n_subgroups=2, n_questions=10, seed=0)[0]
    s1 = split_individuals(graph, seed=0)
    s3 = split_questions(graph, seed=0)
    realised = ((s1.train_individuals.size, s1.val_individuals.size, s1.test_individuals.size),
                (s3.train_questions.size, s3.val_questions.size, s3.test_questions.size))
    ok_sizes = sizes == ((35, 5, 60), (350, 50, 600), (35, 5, 10), (21, 3, 6)) and realised == ((35, 5, 60), (7, 1, 2))
    record(5, violations == 0 and ok_sizes,
           f"{violations} violations over 1000 mask plans; bucket sizes {sizes}, realised splits {realised}")


def test_criterion_06_planted_recovery_new_individuals():
    results = []
    for seed in range(3):
        graph, _ = subgroup_population(n_individuals=2000, n_subgroups=8, n_questions=30, n_options=4,
                                       p_favored=0.85, seed=seed)
        split = split_individuals(graph, within_individual_observed_fraction=0.0, seed=seed)
        cfg = TrainConfig(setting="new-individuals", encoder=EncoderConfig(), epochs=60, patience=10, seed=seed)
        start = time.perf_counter()
        params, _ = train_setting2(graph, split, cfg)
        elapsed = time.perf_counter() - start
        acc = evaluate(params, graph, split.observed_response_edges, split.test_target_edges)
        results.append((acc, elapsed))
    ok = all(acc >= 0.80 and t < 300 for acc, t in results)
    record(6, ok, "RGCN new-individual accuracy per seed "
                  + ", ".join(f"{a:.4f} in {t:.0f}s" for a, t in results) + " (>= 0.80, < 300s; Bayes 0.85)")


def test_criterion_07_planted_recovery_imputation():
    rows = []
    leak_free = True
    for seed in range(3):
        graph, _ = low_rank_population(n_individuals=500, n_questions=40, n_options=4, rank=4, seed=seed)
        split = split_individuals(graph, seed=seed)
        cfg = TrainConfig(encoder=EncoderConfig(), epochs=80, patience=10, seed=seed)
        params, _ = train_setting1(graph, split, cfg)
        targets = split.test_target_edges
        pred, _, _ = predict_targets(params, graph, split.observed_response_edges, targets)
        acc = float(np.mean(pred == graph.responses[targets, 1]))
        rnd = random_baseline(targets, graph)
        maj = majority_baseline(graph, split.observed_response_edges, targets)
        rows.append((acc, rnd, maj))
        # resample every target answer; predictions must not change
        rng = np.random.default_rng(seed)
        responses = graph.responses.copy()
        for e in targets:
            opts = graph.catalog.questions[graph.edge_question[e]].choice_node_indices
            responses[e, 1] = opts[rng.integers(len(opts))]
        shuffled = HeteroGraph(graph.n_subgroups, graph.n_individuals, graph.n_choices, graph.membership.copy(),
                               responses, graph.catalog)
        again, _, _ = predict_targets(params, shuffled, split.observed_response_edges, targets)
        leak_free &= bool(np.array_equal(pred, again))
    ok = leak_free and all(a >= r + 0.10 and a >= m + 0.10 for a, r, m in rows)
    record(7, ok, "accuracy / random / majority per seed "
                  + ", ".join(f"{a:.4f}/{r:.4f}/{m:.4f}" for a, r, m in rows)
                  + f" (>= +10 points over both); target labels unused: {leak_free}")


def _teacher_recovery(seed):
    """Projected vs true-embedding accuracy on new questions, with H an invertible map of true z^O plus noise."""
    graph, _ = subgroup_population(n_individuals=600, n_subgroups=6, n_questions=30, seed=seed)
    enc = EncoderConfig(d_choice=32)
    teacher, _ = train_setting1(graph, split_individuals(graph, seed=seed),
                                TrainConfig(encoder=enc, epochs=40, patience=8, seed=seed))
    z_true = embed(teacher, graph, np.arange(graph.n_responses)).C
    split = split_questions(graph, seed=seed)
    rng = np.random.default_rng(seed)
    d = z_true.shape[1]
    # hidden-state magnitudes comparable to language-model residual streams (row norms around 50)
    M = 10.0 * (np.eye(d) + rng.normal(size=(d, d)) / np.sqrt(d))
    clean = z_true @ M.T
    noise = rng.normal(size=clean.shape)
    H = clean + noise * (0.05 * np.linalg.norm(clean) / np.linalg.norm(noise))
    params = teacher.copy()
    params.meta["seen_questions"] = [int(q) for q in split.train_questions]
    choices = np.array(sorted(c for q in split.train_questions for c in graph.catalog.questions[q].choice_node_indices))
    stage1 = Stage1Result(params, TrainReport(), choices, z_true[choices], split.observed_response_edges,
                          np.zeros(0, np.int64))
    scored = alpha_scores(DEFAULT_ALPHA_GRID, stage1, graph, split, H)
    alpha = select_alpha(DEFAULT_ALPHA_GRID, stage1, graph, split, H)
    model = next(m for a, _, m in scored if a == alpha)
    targets = split.test_target_edges
    projected = evaluate(params, graph, split.observed_response_edges, targets, model, H)
    U = np.asarray(embed(params, graph, split.observed_response_edges).U, dtype=np.float64)
    truth = predict_edges(U, z_true, graph.responses[targets, 0], graph.edge_question[targets], graph.catalog)
    return projected, float(np.mean(truth == graph.responses[targets, 1])), alpha, (graph, split, H, enc)


def test_criterion_08_linear_recovery_new_questions():
    rows = [_teacher_recovery(seed) for seed in range(3)]
    ok = all(abs(p - t) <= 0.03 and a in DEFAULT_ALPHA_GRID for p, t, a, _ in rows)
    record(8, ok, "projected / true-embedding accuracy, alpha per seed "
                  + ", ".join(f"{p:.4f}/{t:.4f}, {a:g}" for p, t, a, _ in rows)
                  + f" (within 3 points; alpha in {list(DEFAULT_ALPHA_GRID)})")


def test_stage1_pipeline_on_linear_hidden_states():
    # the full stage-1 -> ridge -> new-question path with the same synthetic hidden states
    _, _, _, (graph, split, H, enc) = _teacher_recovery(0)
    result = train_setting3_stage1(graph, split, TrainConfig(setting="new-questions", encoder=enc, epochs=40,
                                                             patience=8, seed=0))
    alpha = select_alpha(DEFAULT_ALPHA_GRID, result, graph, split, H)
    model = fit_ridge(H[result.choices], result.choice_embeddings, alpha)
    acc = evaluate(result.params, graph, split.observed_response_edges, split.test_target_edges, model, H)
    assert acc >= random_baseline(split.test_target_edges, graph) + 0.30


def test_criterion_09_closed_forms():
    catalog = [(f"q{q}", f"o{i}", i) for q in range(9) for i in range(5)]
    graph, _ = build_graph([(f"u{u}", f"q{q}", "o1") for u in range(7) for q in range(9)], [], catalog)
    base = random_baseline_exact(np.arange(graph.n_responses), graph)
    ends = (cosine_lr(0, 50_000), cosine_lr(50_000, 50_000), cosine_lr(25_000, 50_000))
    rng = np.random.default_rng(9)
    clip_err = 0.0
    for _ in range(500):
        grads = {f"g{i}": rng.normal(size=rng.integers(1, 6, size=2)) * 10 ** rng.uniform(-4, 2) for i in range(3)}
        g = global_norm(grads)
        clip_err = max(clip_err, abs(global_norm(clip_gradients(grads, 0.1)) - min(g, 0.1)))
    ok = base == Fraction(1, 5) and float(base) == 0.2 and ends == (5e-4, 0.0, 2.5e-4) and clip_err <= 1e-12
    record(9, ok, f"5-option baseline {float(base):.4f}; cosine (start, end, mid) {ends}; "
                  f"clip deviation {clip_err:.1e} (<= 1e-12)")


def test_criterion_10_determinism_and_roundtrip(tmp_path):
    graph, _ = subgroup_population(n_individuals=200, n_subgroups=4, n_questions=8, seed=10)
    split = split_individuals(graph, seed=0)
    cfg = TrainConfig(encoder=EncoderConfig(d_subgroup=4, d_choice=16), epochs=4, patience=3, seed=7)
    a, ra = train_setting1(graph, split, cfg)
    b, rb = train_setting1(graph, split, cfg)
    same_curve = ra.train_losses == rb.train_losses and ra.val_accuracies == rb.val_accuracies
    save_params(tmp_path / "m.gems", a)
    back = load_params(tmp_path / "m.gems")
    acc = evaluate(a, graph, split.observed_response_edges, split.test_target_edges)
    acc_back = evaluate(back, graph, split.observed_response_edges, split.test_target_edges)
    same_bytes = checkpoint.dumps(*_flat(a)) == checkpoint.dumps(*_flat(b))
    record(10, same_curve and acc == acc_back and same_bytes,
           f"loss curves bit-identical: {same_curve}; accuracy {acc!r} vs reloaded {acc_back!r}; "
           f"parameters byte-identical: {same_bytes}")


def _flat(params):
    return {"meta": params.meta}, params.tensors


def test_criterion_11_real_data_stretch():
    line = "CRITERION 11: SKIP  stretch goal; needs licensed survey data and externally computed hidden states"
    ACCEPTANCE_LINES.append(line)
    pytest.skip(line)
