"""Heterogeneous subgroup/individual/choice graph and its ingestion.

Node kinds are stored densely per kind. Choice nodes are laid out question by
question, in option-position order, so every question owns a contiguous block
of choice indices.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DuplicateResponse, MalformedInput, SingleOptionQuestion, UnknownChoice

GRAPH_FORMAT = "gems-graph v1"


class NodeKind(str, Enum):
    SUBGROUP = "S"
    INDIVIDUAL = "U"
    CHOICE = "C"


NODE_KINDS = (NodeKind.SUBGROUP, NodeKind.INDIVIDUAL, NodeKind.CHOICE)


@dataclass(frozen=True)
class NodeRef:
    kind: NodeKind
    index: int


@dataclass(frozen=True)
class Relation:
    name: str
    src: NodeKind
    dst: NodeKind
    membership: bool


# N_r(w) for w of kind ``dst`` are its ``src``-kind neighbours
RELATIONS = (
    Relation("U->S", NodeKind.INDIVIDUAL, NodeKind.SUBGROUP, True),
    Relation("S->U", NodeKind.SUBGROUP, NodeKind.INDIVIDUAL, True),
    Relation("U->C", NodeKind.INDIVIDUAL, NodeKind.CHOICE, False),
    Relation("C->U", NodeKind.CHOICE, NodeKind.INDIVIDUAL, False),
)
RELATION_BY_NAME = {r.name: r for r in RELATIONS}
INVERSE = {"U->S": "S->U", "S->U": "U->S", "U->C": "C->U", "C->U": "U->C"}


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Csr:
    """Row-major sparse pattern; row = target node, entries = sorted sources."""

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_pairs(cls, rows: np.ndarray, cols: np.ndarray, n_rows: int, n_cols: int) -> "Csr":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        order = np.lexsort((cols, rows))
        counts = np.bincount(rows, minlength=n_rows)
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(n_rows, n_cols, _frozen(indptr), _frozen(np.ascontiguousarray(cols[order])))

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    @cached_property
    def degree(self) -> np.ndarray:
        return _frozen(np.diff(self.indptr))

    @cached_property
    def row_of_entry(self) -> np.ndarray:
        return _frozen(np.repeat(np.arange(self.n_rows, dtype=np.int64), self.degree))

    @cached_property
    def mean_weights(self) -> np.ndarray:
        """1/|N(w)| per entry, shaped (nnz, 1) for the single-head kernels."""
        deg = self.degree[self.row_of_entry].astype(np.float64)
        return _frozen((1.0 / deg).reshape(-1, 1)) if deg.size else np.zeros((0, 1))

    @cached_property
    def transposed(self) -> tuple["Csr", np.ndarray]:
        """(transpose, perm) with perm[j] = original entry of transposed entry j."""
        order = np.lexsort((self.row_of_entry, self.indices))
        counts = np.bincount(self.indices, minlength=self.n_cols)
        indptr = np.zeros(self.n_cols + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        t = Csr(self.n_cols, self.n_rows, _frozen(indptr),
                _frozen(np.ascontiguousarray(self.row_of_entry[order])))
        return t, _frozen(order.astype(np.int64))

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]


@dataclass(frozen=True)
class QuestionEntry:
    question_id: str
    choice_node_indices: tuple[int, ...]
    question_text: Optional[str] = None
    option_texts: tuple[Optional[str], ...] = ()


@dataclass(frozen=True)
class QuestionCatalog:
    questions: tuple[QuestionEntry, ...]

    def __post_init__(self):
        seen: list[int] = []
        for q in self.questions:
            if len(q.choice_node_indices) < 2:
                raise SingleOptionQuestion(f"question {q.question_id!r} has fewer than 2 options")
            seen.extend(q.choice_node_indices)
        if sorted(seen) != list(range(len(seen))):
            raise MalformedInput("question choice sets must partition the choice indices")

    @property
    def n_questions(self) -> int:
        return len(self.questions)

    @cached_property
    def n_choices(self) -> int:
        return sum(len(q.choice_node_indices) for q in self.questions)

    @cached_property
    def choice_question(self) -> np.ndarray:
        out = np.empty(self.n_choices, dtype=np.int64)
        for qi, q in enumerate(self.questions):
            out[list(q.choice_node_indices)] = qi
        return _frozen(out)

    @cached_property
    def choice_position(self) -> np.ndarray:
        """Rank of each choice within its question (0 = lowest option position)."""
        out = np.empty(self.n_choices, dtype=np.int64)
        for q in self.questions:
            out[list(q.choice_node_indices)] = np.arange(len(q.choice_node_indices))
        return _frozen(out)

    @cached_property
    def option_counts(self) -> np.ndarray:
        return _frozen(np.array([len(q.choice_node_indices) for q in self.questions], dtype=np.int64))

    @cached_property
    def padded_options(self) -> np.ndarray:
        k = int(self.option_counts.max()) if self.questions else 0
        out = np.full((self.n_questions, k), -1, dtype=np.int64)
        for qi, q in enumerate(self.questions):
            out[qi, :len(q.choice_node_indices)] = q.choice_node_indices
        return _frozen(out)


@dataclass(frozen=True)
class IdMaps:
    subgroup_ids: tuple[str, ...]
    individual_ids: tuple[str, ...]
    question_ids: tuple[str, ...]
    choice_ids: tuple[tuple[str, str], ...]  # (question_id, choice_id) per choice node

    @cached_property
    def individual_index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.individual_ids)}

    @cached_property
    def subgroup_index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.subgroup_ids)}

    @cached_property
    def question_index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.question_ids)}

    @cached_property
    def choice_index(self) -> dict[tuple[str, str], int]:
        return {k: i for i, k in enumerate(self.choice_ids)}

    @cached_property
    def _bare_choice_ids_unique(self) -> bool:
        bare = [c for _, c in self.choice_ids]
        return len(set(bare)) == len(bare)

    def choice_keys(self, c: int) -> tuple[str, ...]:
        """Lookup keys for external per-choice tables, most specific first."""
        qid, cid = self.choice_ids[c]
        if self._bare_choice_ids_unique:
            return (f"{qid}::{cid}", cid)
        return (f"{qid}::{cid}",)


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    n_subgroups: int
    n_individuals: int
    n_choices: int
    membership: np.ndarray  # (m, 2) rows of (individual, subgroup), sorted
    responses: np.ndarray  # (E, 2) rows of (individual, choice); row position = edge id
    catalog: QuestionCatalog

    def __post_init__(self):
        m, r = self.membership, self.responses
        if m.size and (m[:, 0].max() >= self.n_individuals or m[:, 1].max() >= self.n_subgroups or m.min() < 0):
            raise MalformedInput("membership edge endpoint out of range")
        if r.size and (r[:, 0].max() >= self.n_individuals or r[:, 1].max() >= self.n_choices or r.min() < 0):
            raise MalformedInput("response edge endpoint out of range")
        if self.catalog.n_choices != self.n_choices:
            raise MalformedInput("catalog choice count differs from n_choices")
        if r.size:
            q = self.catalog.choice_question[r[:, 1]]
            key = r[:, 0] * self.catalog.n_questions + q
            if np.unique(key).size != key.size:
                raise DuplicateResponse("an individual has two responses to one question")
        _frozen(m)
        _frozen(r)

    @property
    def n_responses(self) -> int:
        return int(self.responses.shape[0])

    @property
    def n_questions(self) -> int:
        return self.catalog.n_questions

    def count(self, kind: NodeKind) -> int:
        return {NodeKind.SUBGROUP: self.n_subgroups, NodeKind.INDIVIDUAL: self.n_individuals,
                NodeKind.CHOICE: self.n_choices}[NodeKind(kind)]

    @cached_property
    def edge_question(self) -> np.ndarray:
        return _frozen(self.catalog.choice_question[self.responses[:, 1]])

    @cached_property
    def membership_csr(self) -> dict[str, Csr]:
        u, s = self.membership[:, 0], self.membership[:, 1]
        return {
            "U->S": Csr.from_pairs(s, u, self.n_subgroups, self.n_individuals),
            "S->U": Csr.from_pairs(u, s, self.n_individuals, self.n_subgroups),
        }

    @cached_property
    def full_adjacency(self) -> dict[str, Csr]:
        return message_index(self, None)

    def neighbors(self, relation: str, node: int) -> np.ndarray:
        """Nodes reached from ``node`` (of the relation's source kind) along ``relation``, sorted.

        ``neighbors("S->U", s)`` lists the members of subgroup s. The message
        CSRs in ``full_adjacency`` are indexed the other way, by target node.
        """
        return self.full_adjacency[INVERSE[relation]].row(node)

    def summary(self) -> dict:
        return {
            "subgroup_nodes": self.n_subgroups,
            "individual_nodes": self.n_individuals,
            "choice_nodes": self.n_choices,
            "questions": self.n_questions,
            "membership_edges": int(self.membership.shape[0]),
            "response_edges": self.n_responses,
            "mean_options_per_question": (self.n_choices / self.n_questions) if self.n_questions else 0.0,
        }


def message_index(graph: HeteroGraph, message_edges: Optional[np.ndarray]) -> dict[str, Csr]:
    """Per-relation CSR patterns; response relations use only ``message_edges``.

    ``None`` means every response edge; membership edges are always active.
    """
    if message_edges is None:
        resp = graph.responses
    else:
        resp = graph.responses[np.asarray(message_edges, dtype=np.int64)]
    u, c = resp[:, 0], resp[:, 1]
    out = dict(graph.membership_csr)
    out["U->C"] = Csr.from_pairs(c, u, graph.n_choices, graph.n_individuals)
    out["C->U"] = Csr.from_pairs(u, c, graph.n_individuals, graph.n_choices)
    return out


# ---------------------------------------------------------------------------
# construction


@dataclass(frozen=True)
class CatalogRow:
    question_id: str
    choice_id: str
    option_position: int
    question_text: Optional[str] = None
    option_text: Optional[str] = None


def _tag(exc_type, msg: str, source: str, record: int):
    err = exc_type(msg)
    err.source = source
    err.record = record
    return err


def build_graph(
    responses: Iterable[tuple[str, str, str]],
    memberships: Iterable[tuple[str, str]],
    catalog_source: Iterable[CatalogRow | tuple],
) -> tuple[HeteroGraph, IdMaps]:
    """Build the graph from id-level records.

    Indices are dense per kind in first-appearance order: questions and
    subgroups by their first listing, individuals by first appearance in
    ``responses`` and then ``memberships``. Raised ingestion errors carry
    ``source`` ("responses", "memberships", "catalog") and ``record`` (0-based
    record number) attributes.
    """
    by_question: dict[str, list[CatalogRow]] = {}
    question_text: dict[str, Optional[str]] = {}
    seen_choice: set[tuple[str, str]] = set()
    for i, row in enumerate(catalog_source):
        if not isinstance(row, CatalogRow):
            row = CatalogRow(*row)
        qid, cid = str(row.question_id), str(row.choice_id)
        if (qid, cid) in seen_choice:
            raise _tag(MalformedInput, f"duplicate catalog entry ({qid!r}, {cid!r})", "catalog", i)
        seen_choice.add((qid, cid))
        by_question.setdefault(qid, []).append(row)
        if row.question_text and not question_text.get(qid):
            question_text[qid] = row.question_text

    questions: list[QuestionEntry] = []
    choice_ids: list[tuple[str, str]] = []
    for qid, rows in by_question.items():
        if len(rows) < 2:
            raise SingleOptionQuestion(f"question {qid!r} lists {len(rows)} option(s); at least 2 required")
        rows = sorted(rows, key=lambda r: int(r.option_position))
        positions = [int(r.option_position) for r in rows]
        if len(set(positions)) != len(positions):
            raise MalformedInput(f"question {qid!r} repeats an option_position")
        start = len(choice_ids)
        choice_ids.extend((qid, str(r.choice_id)) for r in rows)
        questions.append(QuestionEntry(
            question_id=qid,
            choice_node_indices=tuple(range(start, len(choice_ids))),
            question_text=question_text.get(qid),
            option_texts=tuple(r.option_text or None for r in rows),
        ))
    choice_index = {k: i for i, k in enumerate(choice_ids)}
    catalog = QuestionCatalog(tuple(questions))

    individuals: dict[str, int] = {}
    subgroups: dict[str, int] = {}
    resp_rows: list[tuple[int, int]] = []
    answered: set[tuple[int, str]] = set()
    for i, (uid, qid, cid) in enumerate(responses):
        uid, qid, cid = str(uid), str(qid), str(cid)
        c = choice_index.get((qid, cid))
        if c is None:
            raise _tag(UnknownChoice, f"response references unknown choice ({qid!r}, {cid!r})", "responses", i)
        u = individuals.setdefault(uid, len(individuals))
        if (u, qid) in answered:
            raise _tag(DuplicateResponse, f"individual {uid!r} answers question {qid!r} twice", "responses", i)
        answered.add((u, qid))
        resp_rows.append((u, c))

    mem: set[tuple[int, int]] = set()
    for uid, sid in memberships:
        u = individuals.setdefault(str(uid), len(individuals))
        s = subgroups.setdefault(str(sid), len(subgroups))
        mem.add((u, s))

    membership = np.array(sorted(mem), dtype=np.int64).reshape(-1, 2)
    resp = np.array(resp_rows, dtype=np.int64).reshape(-1, 2)
    graph = HeteroGraph(
        n_subgroups=len(subgroups),
        n_individuals=len(individuals),
        n_choices=len(choice_ids),
        membership=membership,
        responses=resp,
        catalog=catalog,
    )
    ids = IdMaps(tuple(subgroups), tuple(individuals), tuple(by_question), tuple(choice_ids))
    return graph, ids


# ---------------------------------------------------------------------------
# CSV ingestion

RESPONSE_COLUMNS = ("individual_id", "question_id", "choice_id")
MEMBERSHIP_COLUMNS = ("individual_id", "subgroup_id")
CATALOG_COLUMNS = ("question_id", "choice_id", "option_position")


def _read_csv(path: Path, required: Sequence[str]) -> list[dict]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header or any(col not in header for col in required):
            raise MalformedInput(f"{path}: missing header row or required columns {list(required)}")
        rows = []
        for row in reader:
            if any(row.get(col) in (None, "") for col in required):
                raise MalformedInput(f"{path}:{reader.line_num}: empty required field")
            rows.append(row)
        return rows


def read_dataset(responses_csv, memberships_csv, catalog_csv) -> tuple[HeteroGraph, IdMaps]:
    paths = {"responses": Path(responses_csv), "memberships": Path(memberships_csv), "catalog": Path(catalog_csv)}
    resp = _read_csv(paths["responses"], RESPONSE_COLUMNS)
    mem = _read_csv(paths["memberships"], MEMBERSHIP_COLUMNS)
    cat = _read_csv(paths["catalog"], CATALOG_COLUMNS)
    catalog_rows = []
    for i, row in enumerate(cat):
        try:
            pos = int(row["option_position"])
        except ValueError:
            raise MalformedInput(f"{paths['catalog']}:{i + 2}: option_position is not an integer") from None
        catalog_rows.append(CatalogRow(row["question_id"], row["choice_id"], pos,
                                       row.get("question_text") or None, row.get("option_text") or None))
    try:
        return build_graph(
            ((r["individual_id"], r["question_id"], r["choice_id"]) for r in resp),
            ((r["individual_id"], r["subgroup_id"]) for r in mem),
            catalog_rows,
        )
    except (DuplicateResponse, UnknownChoice, MalformedInput) as err:
        source = getattr(err, "source", None)
        if source is None:
            raise
        # line numbers assume one physical line per record after the header
        raise type(err)(f"{paths[source]}:{err.record + 2}: {err}") from None


# ---------------------------------------------------------------------------
# serialization


def graph_to_dict(graph: HeteroGraph, ids: IdMaps) -> dict:
    questions = []
    for q in graph.catalog.questions:
        questions.append({
            "question_id": q.question_id,
            "question_text": q.question_text,
            "choices": [
                {"choice_id": ids.choice_ids[c][1], "option_text": t}
                for c, t in zip(q.choice_node_indices, q.option_texts or [None] * len(q.choice_node_indices))
            ],
        })
    return {
        "format": GRAPH_FORMAT,
        "subgroups": list(ids.subgroup_ids),
        "individuals": list(ids.individual_ids),
        "questions": questions,
        "memberships": graph.membership.tolist(),
        "responses": graph.responses.tolist(),
    }


def graph_from_dict(doc: dict) -> tuple[HeteroGraph, IdMaps]:
    if doc.get("format") != GRAPH_FORMAT:
        raise MalformedInput(f"not a {GRAPH_FORMAT} document")
    questions, choice_ids = [], []
    for q in doc["questions"]:
        start = len(choice_ids)
        choice_ids.extend((q["question_id"], ch["choice_id"]) for ch in q["choices"])
        questions.append(QuestionEntry(q["question_id"], tuple(range(start, len(choice_ids))),
                                       q.get("question_text"),
                                       tuple(ch.get("option_text") for ch in q["choices"])))
    graph = HeteroGraph(
        n_subgroups=len(doc["subgroups"]),
        n_individuals=len(doc["individuals"]),
        n_choices=len(choice_ids),
        membership=np.array(doc["memberships"], dtype=np.int64).reshape(-1, 2),
        responses=np.array(doc["responses"], dtype=np.int64).reshape(-1, 2),
        catalog=QuestionCatalog(tuple(questions)),
    )
    ids = IdMaps(tuple(doc["subgroups"]), tuple(doc["individuals"]),
                 tuple(q["question_id"] for q in doc["questions"]), tuple(choice_ids))
    return graph, ids


def save_graph(path, graph: HeteroGraph, ids: IdMaps) -> None:
    text = json.dumps(graph_to_dict(graph, ids), separators=(",", ":"), ensure_ascii=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_graph(path) -> tuple[HeteroGraph, IdMaps]:
    return graph_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
