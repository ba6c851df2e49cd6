"""Train/validation/test splits and per-step message/supervision masks.

Edges are identified by their row in ``HeteroGraph.responses``. Every edge
list returned here is a sorted int64 array.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import EmptyEdgeSet, InsufficientIndividuals, InsufficientQuestions, MalformedInput, ValidationError
from .graph import HeteroGraph
from .rng import round_half_up, stream

SPLIT_FORMAT = "gems-split v1"


class Setting(str, Enum):
    IMPUTATION = "impute"
    NEW_INDIVIDUALS = "new-individuals"
    NEW_QUESTIONS = "new-questions"


def _idx(a) -> np.ndarray:
    return np.sort(np.asarray(a, dtype=np.int64).reshape(-1))


@dataclass(frozen=True, eq=False)
class Split:
    setting: Setting
    seed: int
    observed_response_edges: np.ndarray
    val_target_edges: np.ndarray
    test_target_edges: np.ndarray
    train_individuals: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    val_individuals: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_individuals: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    train_questions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    val_questions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_questions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_dict(self, question_ids=None) -> dict:
        doc = {
            "format": SPLIT_FORMAT,
            "setting": self.setting.value,
            "seed": int(self.seed),
            "observed_response_edges": self.observed_response_edges.tolist(),
            "val_target_edges": self.val_target_edges.tolist(),
            "test_target_edges": self.test_target_edges.tolist(),
            "train_individuals": self.train_individuals.tolist(),
            "val_individuals": self.val_individuals.tolist(),
            "test_individuals": self.test_individuals.tolist(),
            "train_questions": self.train_questions.tolist(),
            "val_questions": self.val_questions.tolist(),
            "test_questions": self.test_questions.tolist(),
        }
        if question_ids is not None:
            for bucket in ("train", "val", "test"):
                doc[f"{bucket}_question_ids"] = [question_ids[q] for q in doc[f"{bucket}_questions"]]
        return doc

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, doc: dict) -> "Split":
        if doc.get("format") != SPLIT_FORMAT:
            raise MalformedInput(f"not a {SPLIT_FORMAT} document")
        kw = {k: _idx(doc.get(k, [])) for k in (
            "observed_response_edges", "val_target_edges", "test_target_edges",
            "train_individuals", "val_individuals", "test_individuals",
            "train_questions", "val_questions", "test_questions")}
        return cls(setting=Setting(doc["setting"]), seed=int(doc["seed"]), **kw)

    def save(self, path, question_ids=None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(question_ids), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "Split":
        return cls.from_dict(json.loads(Path(path).read_text()))


def bucket_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """(train, val, test) counts; val/test rounded half-up, train takes the rest."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions {fractions} do not sum to 1")
    n_val = round_half_up(fractions[1] * n)
    n_test = round_half_up(fractions[2] * n)
    return n - n_val - n_test, n_val, n_test


def observed_count(n_responses: int, fraction: float) -> int:
    """Edges kept as observed for a held-out individual (floor, at least one)."""
    if n_responses == 0 or fraction <= 0:
        return 0
    return max(1, math.floor(fraction * n_responses + 1e-9))


def split_individuals(
    graph: HeteroGraph,
    fractions: tuple[float, float, float] = (0.35, 0.05, 0.60),
    within_individual_observed_fraction: float = 0.40,
    seed: int = 0,
) -> Split:
    """Individual-level split for imputation (fraction > 0) or new individuals (fraction 0)."""
    if graph.n_individuals < 3:
        raise InsufficientIndividuals(f"need at least 3 individuals, have {graph.n_individuals}")
    n_train, n_val, n_test = bucket_sizes(graph.n_individuals, fractions)
    if min(n_train, n_val, n_test) <= 0:
        raise InsufficientIndividuals(
            f"{graph.n_individuals} individuals give bucket sizes {(n_train, n_val, n_test)}")
    perm = stream(seed, "split-individuals").permutation(graph.n_individuals)
    val_u = np.sort(perm[:n_val])
    test_u = np.sort(perm[n_val:n_val + n_test])
    train_u = np.sort(perm[n_val + n_test:])

    owner = graph.responses[:, 0]
    order = np.argsort(owner, kind="stable")
    starts = np.searchsorted(owner[order], np.arange(graph.n_individuals + 1))
    bucket = np.zeros(graph.n_individuals, dtype=np.int8)
    bucket[val_u] = 1
    bucket[test_u] = 2

    observed = [order[starts[u]:starts[u + 1]] for u in train_u]
    targets: dict[int, list] = {1: [], 2: []}
    for u in np.concatenate([val_u, test_u]):
        edges = np.sort(order[starts[u]:starts[u + 1]])
        k = observed_count(edges.size, within_individual_observed_fraction)
        chosen = stream(seed, "observe-within-individual", int(u)).permutation(edges.size)
        observed.append(edges[chosen[:k]])
        targets[int(bucket[u])].append(edges[chosen[k:]])

    setting = Setting.IMPUTATION if within_individual_observed_fraction > 0 else Setting.NEW_INDIVIDUALS
    cat = lambda parts: _idx(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return Split(
        setting=setting,
        seed=int(seed),
        observed_response_edges=cat(observed),
        val_target_edges=cat(targets[1]),
        test_target_edges=cat(targets[2]),
        train_individuals=train_u.astype(np.int64),
        val_individuals=val_u.astype(np.int64),
        test_individuals=test_u.astype(np.int64),
    )


def split_questions(
    graph: HeteroGraph,
    fractions: tuple[float, float, float] = (0.70, 0.10, 0.20),
    seed: int = 0,
) -> Split:
    """Question-level split; choice nodes move with their question."""
    n_q = graph.n_questions
    if n_q < 5:
        raise InsufficientQuestions(f"need at least 5 questions, have {n_q}")
    n_train, n_val, n_test = bucket_sizes(n_q, fractions)
    if min(n_train, n_val, n_test) <= 0:
        raise InsufficientQuestions(f"{n_q} questions give bucket sizes {(n_train, n_val, n_test)}")
    perm = stream(seed, "split-questions").permutation(n_q)
    val_q = np.sort(perm[:n_val])
    test_q = np.sort(perm[n_val:n_val + n_test])
    train_q = np.sort(perm[n_val + n_test:])
    eq = graph.edge_question
    return Split(
        setting=Setting.NEW_QUESTIONS,
        seed=int(seed),
        observed_response_edges=np.flatnonzero(np.isin(eq, train_q)).astype(np.int64),
        val_target_edges=np.flatnonzero(np.isin(eq, val_q)).astype(np.int64),
        test_target_edges=np.flatnonzero(np.isin(eq, test_q)).astype(np.int64),
        train_questions=train_q.astype(np.int64),
        val_questions=val_q.astype(np.int64),
        test_questions=test_q.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# per-step masks


@dataclass(frozen=True, eq=False)
class MaskPlan:
    message_edges: np.ndarray
    supervision_edges: np.ndarray
    step_seed: int

    def canonical_bytes(self) -> bytes:
        return json.dumps({"message": self.message_edges.tolist(),
                           "supervision": self.supervision_edges.tolist(),
                           "step_seed": int(self.step_seed)}, separators=(",", ":")).encode()


def _check_ratio(ratio: float) -> None:
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"mask ratio must lie in (0, 1), got {ratio}")


def draw_mask_edge_level(observed_edges, ratio: float = 0.5, step_seed: int = 0) -> MaskPlan:
    """Mask round(ratio * |observed|) uniformly chosen edges as supervision."""
    _check_ratio(ratio)
    edges = _idx(observed_edges)
    if edges.size == 0:
        raise EmptyEdgeSet("no observed edges to mask")
    n_sup = round_half_up(ratio * edges.size)
    pick = stream(step_seed, "mask-edges").permutation(edges.size)
    sup = np.zeros(edges.size, dtype=bool)
    sup[pick[:n_sup]] = True
    return MaskPlan(edges[~sup], edges[sup], int(step_seed))


def mask_for_individuals(observed_edges, graph: HeteroGraph, selected, step_seed: int = 0) -> MaskPlan:
    """All observed edges of ``selected`` individuals become supervision."""
    edges = _idx(observed_edges)
    sup = np.isin(graph.responses[edges, 0], np.asarray(selected, dtype=np.int64))
    return MaskPlan(edges[~sup], edges[sup], int(step_seed))


def draw_mask_individual_level(observed_edges, graph: HeteroGraph, individual_ratio: float = 0.5,
                               step_seed: int = 0) -> MaskPlan:
    """Select round(ratio * k) of the k individuals owning observed edges; mask all their edges."""
    _check_ratio(individual_ratio)
    edges = _idx(observed_edges)
    if edges.size == 0:
        raise EmptyEdgeSet("no observed edges to mask")
    owners = np.unique(graph.responses[edges, 0])
    n_sel = round_half_up(individual_ratio * owners.size)
    pick = stream(step_seed, "mask-individuals").permutation(owners.size)[:n_sel]
    return mask_for_individuals(edges, graph, owners[pick], step_seed)
