"""Synthetic populations with known structure, used by the recovery tests."""
from __future__ import annotations

import numpy as np

from gems.graph import build_graph


def _catalog(n_questions: int, n_options) -> list[tuple]:
    sizes = [n_options] * n_questions if np.isscalar(n_options) else list(n_options)
    return [(f"q{q}", f"q{q}o{k}", k) for q in range(n_questions) for k in range(sizes[q])]


def subgroup_population(n_individuals=2000, n_subgroups=8, n_questions=30, n_options=4, p_favored=0.85,
                        seed=0, answer_fraction=1.0):
    """Each individual joins one subgroup; each subgroup favours one option per question.

    The favoured option is chosen with probability ``p_favored`` and the rest
    share the remainder uniformly, so the Bayes accuracy is ``p_favored`` when
    p_favored >= 1 / n_options.
    """
    rng = np.random.default_rng(seed)
    group = rng.integers(n_subgroups, size=n_individuals)
    favored = rng.integers(n_options, size=(n_subgroups, n_questions))
    responses = []
    for u in range(n_individuals):
        for q in range(n_questions):
            if answer_fraction < 1.0 and rng.random() >= answer_fraction:
                continue
            f = favored[group[u], q]
            if rng.random() < p_favored:
                k = f
            else:
                k = rng.choice([o for o in range(n_options) if o != f])
            responses.append((f"u{u}", f"q{q}", f"q{q}o{k}"))
    memberships = [(f"u{u}", f"g{group[u]}") for u in range(n_individuals)]
    graph, ids = build_graph(responses, memberships, _catalog(n_questions, n_options))
    return graph, ids


def low_rank_population(n_individuals=500, n_questions=40, n_options=4, rank=4, n_subgroups=4,
                        temperature=0.25, seed=0):
    """Choice ~ softmax(<a_u, b_c> / temperature) with rank-``rank`` factors.

    Subgroups are assigned at random and carry no signal, so accuracy above the
    per-question majority must come from the individual's own observed edges.
    """
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_individuals, rank)) / np.sqrt(rank)
    b = rng.normal(size=(n_questions, n_options, rank))
    group = rng.integers(n_subgroups, size=n_individuals)
    responses = []
    for u in range(n_individuals):
        for q in range(n_questions):
            s = b[q] @ a[u] / temperature
            p = np.exp(s - s.max())
            p /= p.sum()
            k = rng.choice(n_options, p=p)
            responses.append((f"u{u}", f"q{q}", f"q{q}o{k}"))
    memberships = [(f"u{u}", f"g{group[u]}") for u in range(n_individuals)]
    return build_graph(responses, memberships, _catalog(n_questions, n_options))


def majority_baseline(graph, train_edges, target_edges) -> float:
    """Accuracy of predicting each question's most common choice among ``train_edges``."""
    counts = np.zeros(graph.n_choices)
    np.add.at(counts, graph.responses[train_edges, 1], 1)
    hits = 0
    for e in target_edges:
        opts = np.asarray(graph.catalog.questions[graph.edge_question[e]].choice_node_indices)
        hits += int(opts[np.argmax(counts[opts])] == graph.responses[e, 1])
    return hits / len(target_edges)


def write_csvs(directory, graph, ids) -> dict:
    """Write the three ingestion CSVs for ``graph``; returns their paths."""
    import csv
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"responses": d / "responses.csv", "memberships": d / "memberships.csv", "catalog": d / "catalog.csv"}
    with paths["responses"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["individual_id", "question_id", "choice_id"])
        for u, c in graph.responses:
            qid, cid = ids.choice_ids[c]
            w.writerow([ids.individual_ids[u], qid, cid])
    with paths["memberships"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["individual_id", "subgroup_id"])
        for u, s in graph.membership:
            w.writerow([ids.individual_ids[u], ids.subgroup_ids[s]])
    with paths["catalog"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["question_id", "choice_id", "option_position"])
        for q in graph.catalog.questions:
            for k, c in enumerate(q.choice_node_indices):
                w.writerow([q.question_id, ids.choice_ids[c][1], k])
    return {k: str(v) for k, v in paths.items()}
