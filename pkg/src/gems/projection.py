"""Ridge map from frozen language-model hidden states to GNN output embeddings.

Hidden states are computed elsewhere and read from files::

    gems-hidden-states v1 <d_llm>
    <choice_id>\t<base64 of d_llm little-endian float32>
    ...

``choice_id`` may be the bare catalog choice id (when unique across the
catalog) or ``question_id::choice_id``.
"""
from __future__ import annotations

import base64
import binascii
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg

from . import checkpoint
from .errors import (DimensionMismatch, InconsistentDimension, MalformedFile, MissingEmbedding,
                     NoValidationQuestions, SingularSystem, ValidationError)
from .graph import IdMaps

HEADER = "gems-hidden-states v1"
DEFAULT_ALPHA_GRID = (10.0, 50.0, 100.0, 200.0, 500.0, 1000.0)


@dataclass
class HiddenStateTable:
    d_llm: int
    entries: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def lookup(self, keys) -> Optional[np.ndarray]:
        for k in keys:
            v = self.entries.get(k)
            if v is not None:
                return v
        return None

    def matrix(self, ids: IdMaps, choices) -> np.ndarray:
        """Rows for the given choice nodes; raises MissingEmbedding for any absent choice."""
        out = np.empty((len(choices), self.d_llm))
        for i, c in enumerate(choices):
            v = self.lookup(ids.choice_keys(int(c)))
            if v is None:
                raise MissingEmbedding(f"no hidden state for choice {ids.choice_ids[int(c)]}")
            out[i] = v
        return out

    def feature_matrix(self, ids: IdMaps) -> np.ndarray:
        """(n_choices, d_llm) matrix with NaN rows where a choice has no hidden state."""
        out = np.full((len(ids.choice_ids), self.d_llm), np.nan)
        for c in range(len(ids.choice_ids)):
            v = self.lookup(ids.choice_keys(c))
            if v is not None:
                out[c] = v
        return out


def load_hidden_states(path) -> HiddenStateTable:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from None
    if not lines or not lines[0].startswith(HEADER):
        raise MalformedFile(f"{path}: missing '{HEADER} <d_llm>' header")
    head = lines[0][len(HEADER):].split()
    try:
        d_llm = int(head[0])
    except (IndexError, ValueError):
        raise MalformedFile(f"{path}: header lacks an integer d_llm") from None
    provenance = dict(item.split("=", 1) for item in head[1:] if "=" in item)
    entries: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedFile(f"{path}:{lineno}: expected choice_id<TAB>base64")
        cid, payload = parts
        if cid in entries:
            raise MalformedFile(f"{path}:{lineno}: duplicate choice_id {cid!r}")
        try:
            raw = base64.b64decode(payload.strip(), validate=True)
        except binascii.Error:
            raise MalformedFile(f"{path}:{lineno}: invalid base64") from None
        if len(raw) != 4 * d_llm:
            raise InconsistentDimension(f"{path}:{lineno}: {len(raw) // 4} floats, header says {d_llm}")
        vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if not np.isfinite(vec).all():
            raise MalformedFile(f"{path}:{lineno}: non-finite value for {cid!r}")
        entries[cid] = vec
    if not entries:
        raise MalformedFile(f"{path}: no hidden-state records")
    return HiddenStateTable(d_llm, entries, provenance)


def save_hidden_states(path, table: HiddenStateTable) -> None:
    head = f"{HEADER} {table.d_llm}"
    extra = " ".join(f"{k}={v}" for k, v in sorted(table.provenance.items()) if " " not in f"{k}{v}")
    lines = [head + (" " + extra if extra else "")]
    for cid, vec in table.entries.items():
        if "\t" in cid or "\n" in cid:
            raise ValidationError(f"choice id {cid!r} contains a tab or newline")
        lines.append(cid + "\t" + base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii"))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def convert_csv(csv_path, out_path, model: str = "", layer: str = "") -> HiddenStateTable:
    """CSV rows ``choice_id,v1,...,vd`` (header optional) to the hidden-state format."""
    entries: dict[str, np.ndarray] = {}
    d = None
    with Path(csv_path).open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                vec = np.array([float(x) for x in row[1:]])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise MalformedFile(f"{csv_path}:{lineno}: non-numeric value") from None
            if d is None:
                d = vec.size
            elif vec.size != d:
                raise InconsistentDimension(f"{csv_path}:{lineno}: {vec.size} values, expected {d}")
            if row[0] in entries:
                raise MalformedFile(f"{csv_path}:{lineno}: duplicate choice_id {row[0]!r}")
            entries[row[0]] = vec
    if not entries:
        raise MalformedFile(f"{csv_path}: no rows")
    provenance = {k: v for k, v in (("model", model), ("layer", layer)) if v}
    table = HiddenStateTable(d, entries, provenance)
    save_hidden_states(out_path, table)
    return load_hidden_states(out_path)


# ---------------------------------------------------------------------------
# ridge fit


@dataclass
class ProjectionModel:
    W: np.ndarray  # (d_gnn, d_llm)
    alpha: float
    residual: float = 0.0
    layer_tag: str = ""

    @property
    def d_llm(self) -> int:
        return self.W.shape[1]

    def save(self, path) -> None:
        checkpoint.save(path, {"kind": "projection", "alpha": self.alpha, "residual": self.residual,
                               "layer_tag": self.layer_tag}, {"W_proj": self.W})

    @classmethod
    def load(cls, path) -> "ProjectionModel":
        cfg, tensors = checkpoint.load(path)
        if cfg.get("kind") != "projection" or "W_proj" not in tensors:
            raise MalformedFile(f"{path}: not a projection checkpoint")
        return cls(tensors["W_proj"], float(cfg["alpha"]), float(cfg.get("residual", 0.0)),
                   cfg.get("layer_tag", ""))


def fit_ridge(H: np.ndarray, Z: np.ndarray, alpha: float, layer_tag: str = "") -> ProjectionModel:
    """Minimise sum_c ||W h_c - z_c||^2 + alpha ||W||_F^2 via the normal equations.

    Solves (H^T H + alpha I) W^T = H^T Z by Cholesky. No intercept.
    """
    H = np.asarray(H, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if H.ndim != 2 or Z.ndim != 2 or H.shape[0] != Z.shape[0] or H.shape[0] < 1:
        raise DimensionMismatch(f"incompatible shapes H{H.shape} and Z{Z.shape}")
    if alpha < 0:
        raise ValidationError("alpha must be nonnegative")
    gram = H.T @ H
    gram[np.diag_indices_from(gram)] += alpha
    if alpha == 0 and np.linalg.matrix_rank(H) < H.shape[1]:
        raise SingularSystem("H is rank deficient and alpha = 0")
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        raise SingularSystem("normal-equation matrix is not positive definite") from None
    Wt = scipy.linalg.cho_solve(factor, H.T @ Z)
    W = Wt.T
    resid = float(((H @ Wt - Z) ** 2).sum())
    return ProjectionModel(W, float(alpha), resid, layer_tag)


def project(model: ProjectionModel, h: np.ndarray) -> np.ndarray:
    """z' = W h for a vector, or row-wise for a matrix of hidden states."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != model.d_llm:
        raise DimensionMismatch(f"hidden state has dim {h.shape[-1]}, projection expects {model.d_llm}")
    return h @ model.W.T


# ---------------------------------------------------------------------------
# selection on validation questions


def _features(hidden, ids: Optional[IdMaps]) -> np.ndarray:
    if isinstance(hidden, HiddenStateTable):
        if ids is None:
            raise ValidationError("id maps are required to look up hidden states by choice id")
        return hidden.feature_matrix(ids)
    return np.asarray(hidden, dtype=np.float64)


def alpha_scores(candidates, stage1, graph, split, hidden_states, ids: Optional[IdMaps] = None,
                 layer_tag: str = "") -> list[tuple[float, float, ProjectionModel]]:
    """(alpha, validation-question accuracy, fitted model) for each candidate, in ascending alpha."""
    from .trainer import evaluate

    candidates = sorted(float(a) for a in candidates)
    if not candidates:
        raise ValidationError("no alpha candidates")
    if np.asarray(split.val_questions).size == 0 or np.asarray(split.val_target_edges).size == 0:
        raise NoValidationQuestions("split has no validation questions")
    features = _features(hidden_states, ids)
    H = features[stage1.choices]
    if not np.isfinite(H).all():
        raise MissingEmbedding("a train-question choice has no hidden state")
    out = []
    for a in candidates:
        model = fit_ridge(H, stage1.choice_embeddings, a, layer_tag)
        acc = evaluate(stage1.params, graph, stage1.message_edges, split.val_target_edges, model, features)
        out.append((a, acc, model))
    return out


def select_alpha(candidates, stage1, graph, split, hidden_states, ids: Optional[IdMaps] = None) -> float:
    """Alpha with the best validation-question accuracy; ties go to the smaller alpha."""
    return _best(alpha_scores(candidates, stage1, graph, split, hidden_states, ids))[0]


def _best(scored):
    best = scored[0]
    for entry in scored[1:]:
        if entry[1] > best[1]:
            best = entry
    return best


def select_hidden_states(tables: dict, candidates, stage1, graph, split, ids: IdMaps):
    """Choose among several hidden-state tables (e.g. different layers) and alphas.

    Returns (tag, alpha, accuracy, model); ties keep the first tag in the
    given order and then the smaller alpha.
    """
    if not tables:
        raise ValidationError("no hidden-state tables")
    best = None
    for tag, table in tables.items():
        alpha, acc, model = _best(alpha_scores(candidates, stage1, graph, split, table, ids, str(tag)))
        if best is None or acc > best[2]:
            best = (tag, alpha, acc, model)
    return best
