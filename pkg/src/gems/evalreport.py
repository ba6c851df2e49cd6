"""Accuracy, closed-form baselines, PCA exports and metric reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateData, EmptyTargets, LengthMismatch, ValidationError
from .graph import HeteroGraph, QuestionCatalog


def random_baseline(target_edges, graph: HeteroGraph) -> float:
    """Expected accuracy of guessing uniformly among each target question's options."""
    return float(random_baseline_exact(target_edges, graph))


def random_baseline_exact(target_edges, graph: HeteroGraph) -> Fraction:
    target_edges = np.asarray(target_edges, dtype=np.int64)
    if target_edges.size == 0:
        raise EmptyTargets("no target edges")
    k = graph.catalog.option_counts[graph.edge_question[target_edges]]
    values, counts = np.unique(k, return_counts=True)
    return sum((Fraction(int(c), int(v)) for v, c in zip(values, counts)), Fraction(0)) / int(target_edges.size)


def random_baseline_for_questions(questions, catalog: QuestionCatalog) -> float:
    """Same closed form from a list of question indices, one per target edge."""
    questions = np.asarray(questions, dtype=np.int64)
    if questions.size == 0:
        raise EmptyTargets("no target edges")
    return float(np.mean(1.0 / catalog.option_counts[questions]))


def accuracy(predictions: Sequence, truths: Sequence) -> tuple[float, Fraction]:
    """(float, exact fraction) of positions where prediction equals truth."""
    if len(predictions) != len(truths):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truths)} truths")
    if len(truths) == 0:
        raise EmptyTargets("nothing to score")
    hits = int(np.sum(np.asarray(predictions) == np.asarray(truths)))
    frac = Fraction(hits, len(truths))
    return float(frac), frac


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("no values")
    return float(arr.mean()), float(arr.std())


def format_mean_std(values: Sequence[float], scale: float = 100.0, digits: int = 2) -> str:
    m, s = mean_std(values)
    return f"{m * scale:.{digits}f} ± {s * scale:.{digits}f}"


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaResult:
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance_ratio: np.ndarray  # (k,)
    projected: np.ndarray  # (n, k)
    mean: np.ndarray  # (d,)

    def reconstruct(self) -> np.ndarray:
        return self.projected @ self.components + self.mean


def pca(embeddings: np.ndarray, k: int = 2) -> PcaResult:
    """Mean-centred PCA from the covariance eigendecomposition.

    Each component is flipped so its largest-magnitude entry is positive.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("embeddings must be a 2-D matrix")
    n, d = X.shape
    if not 1 <= k <= min(n, d):
        raise ValidationError(f"k={k} needs 1 <= k <= min(n={n}, d={d})")
    mean = X.mean(axis=0)
    centred = X - mean
    cov = centred.T @ centred / max(n - 1, 1)
    total = float(np.trace(cov))
    if not total > 0:
        raise DegenerateData("embeddings have zero variance")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:k]
    comps = evecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ratios = np.clip(evals[order], 0.0, None) / total
    return PcaResult(comps, ratios, centred @ comps.T, mean)


def write_pca_csv(path, result: PcaResult, row_ids: Optional[Sequence[str]] = None,
                  labels: Optional[Sequence[str]] = None) -> None:
    n, k = result.projected.shape
    row_ids = list(row_ids) if row_ids is not None else [str(i) for i in range(n)]
    labels = list(labels) if labels is not None else [""] * n
    if len(row_ids) != n or len(labels) != n:
        raise LengthMismatch("row ids and labels must match the number of rows")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "label"] + [f"pc{i + 1}" for i in range(k)])
        for rid, lab, coords in zip(row_ids, labels, result.projected):
            w.writerow([rid, lab] + [repr(float(x)) for x in coords])


def pca_export(embeddings: np.ndarray, k: int = 2, labels: Optional[Sequence[str]] = None,
               path=None, row_ids: Optional[Sequence[str]] = None) -> PcaResult:
    result = pca(embeddings, k)
    if path is not None:
        write_pca_csv(path, result, row_ids, labels)
    return result


# ---------------------------------------------------------------------------
# reports


def metrics_report(setting: str, architecture: str, seed: int, accuracy_value: float, random_value: float,
                   n_targets: int, **extra) -> dict:
    doc = {"setting": setting, "architecture": architecture, "seed": int(seed),
           "accuracy": float(accuracy_value), "random_baseline": float(random_value), "n_targets": int(n_targets)}
    doc.update(extra)
    return doc


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def write_json(path, doc: dict) -> None:
    text = json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False, default=_plain)
    Path(path).write_text(text + "\n", encoding="utf-8")
