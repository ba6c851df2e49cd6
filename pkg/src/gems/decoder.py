"""Dot-product decoder: temperature softmax over a question's options and its loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .errors import DimensionMismatch, MissingEmbedding, NonPositiveTemperature, ValidationError
from .graph import QuestionCatalog


@dataclass(frozen=True)
class ChoiceDistribution:
    question_id: str
    probabilities: np.ndarray


def _softmax(scores: np.ndarray) -> np.ndarray:
    s = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def choice_distribution(z_u, choice_embs, tau: float, question_id: str = "") -> ChoiceDistribution:
    """p_c proportional to exp(z_u . z_c / tau) over the given options."""
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    z_u = np.asarray(z_u, dtype=float)
    embs = np.asarray(choice_embs, dtype=float)
    if embs.ndim != 2 or embs.shape[0] < 2:
        raise ValidationError("need at least two choice embeddings")
    if embs.shape[1] != z_u.shape[-1]:
        raise DimensionMismatch(f"individual dim {z_u.shape[-1]} vs choice dim {embs.shape[1]}")
    return ChoiceDistribution(question_id, _softmax(embs @ z_u / tau))


def predict(z_u, question: int, choice_embeddings: np.ndarray, catalog: QuestionCatalog) -> int:
    """Argmax choice node of ``question``; ties go to the lowest option position."""
    options = np.asarray(catalog.questions[question].choice_node_indices)
    embs = choice_embeddings[options]
    if not np.isfinite(embs).all():
        raise MissingEmbedding(f"question {catalog.questions[question].question_id!r} lacks choice embeddings")
    return int(options[np.argmax(embs @ np.asarray(z_u))])


def predict_edges(z_users: np.ndarray, z_choices: np.ndarray, users: np.ndarray, questions: np.ndarray,
                  catalog: QuestionCatalog) -> np.ndarray:
    """Vectorised ``predict`` for many (individual, question) pairs; returns choice indices."""
    out = np.empty(len(users), dtype=np.int64)
    for q in np.unique(questions):
        rows = np.flatnonzero(questions == q)
        options = np.asarray(catalog.questions[q].choice_node_indices)
        embs = z_choices[options]
        if not np.isfinite(embs).all():
            raise MissingEmbedding(f"question {catalog.questions[q].question_id!r} lacks choice embeddings")
        out[rows] = options[np.argmax(z_users[users[rows]] @ embs.T, axis=1)]
    return out


def question_probabilities(z_users, z_choices, users, questions, catalog: QuestionCatalog, tau: float) -> list:
    """Probability vectors (catalog order) per pair; used for prediction dumps."""
    out: list = [None] * len(users)
    for q in np.unique(questions):
        rows = np.flatnonzero(questions == q)
        options = np.asarray(catalog.questions[q].choice_node_indices)
        probs = _softmax(z_users[users[rows]] @ z_choices[options].T / tau)
        for r, p in zip(rows, probs):
            out[r] = p
    return out


def _grouped(choices: np.ndarray, catalog: QuestionCatalog):
    q_of = catalog.choice_question[choices]
    order = np.argsort(q_of, kind="stable")
    qs, starts = np.unique(q_of[order], return_index=True)
    bounds = np.append(starts, order.size)
    for i, q in enumerate(qs):
        yield int(q), order[bounds[i]:bounds[i + 1]]


def cross_entropy(z_users: T.Tensor, z_choices: T.Tensor, log_tau: T.Tensor, users, choices,
                  catalog: QuestionCatalog, reduction: str = "sum") -> tuple[T.Tensor, np.ndarray]:
    """-sum log p(c | u, q(c)) over the given (u, c) edges, and per-edge log-probabilities.

    Sibling options of q(c) act as the implicit negatives. ``reduction`` is
    "sum" or "mean".
    """
    users = np.asarray(users, dtype=np.int64)
    choices = np.asarray(choices, dtype=np.int64)
    if reduction not in ("sum", "mean"):
        raise ValidationError(f"unknown reduction {reduction!r}")
    if users.size == 0:
        raise ValidationError("no supervision edges")
    zu, zc = z_users.value, z_choices.value
    if not np.isfinite(zc[choices]).all():
        raise MissingEmbedding("a supervision edge's choice has no embedding")
    inv_tau = float(np.exp(-log_tau.value))
    pos = catalog.choice_position[choices]
    logp = np.empty(users.size, dtype=zu.dtype)
    cache = []
    for q, rows in _grouped(choices, catalog):
        options = np.asarray(catalog.questions[q].choice_node_indices)
        u = users[rows]
        scores = (zu[u] @ zc[options].T) * inv_tau
        shifted = scores - scores.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        logp[rows] = shifted[np.arange(rows.size), pos[rows]] - lse
        cache.append((rows, options, u, scores, np.exp(shifted - lse[:, None])))
    weight = 1.0 / users.size if reduction == "mean" else 1.0
    loss = -logp.sum() * weight

    def adjoint(g):
        g = float(g) * weight
        d_zu = np.zeros_like(zu)
        d_zc = np.zeros_like(zc)
        d_rho = 0.0
        for rows, options, u, scores, probs in cache:
            d_scores = probs.copy()
            d_scores[np.arange(rows.size), pos[rows]] -= 1.0
            d_scores *= g
            # scores = dots * exp(-rho)  =>  d scores / d rho = -scores
            d_rho -= float((d_scores * scores).sum())
            d_dots = d_scores * inv_tau
            d_zu[u] += d_dots @ zc[options]  # an individual answers a question at most once
            d_zc[options] += d_dots.T @ zu[u]
        return d_zu, d_zc, np.asarray(d_rho, dtype=log_tau.value.dtype)

    out = z_users.tape.op(np.asarray(loss), (z_users, z_choices, log_tau), adjoint)
    return out, logp


def cross_entropy_loss(embeddings, supervision_edges, responses: np.ndarray, catalog: QuestionCatalog,
                       tau: float, reduction: str = "sum") -> tuple[float, np.ndarray]:
    """Loss value for plain arrays: ``embeddings`` has ``U`` and ``C``; edges index ``responses``."""
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    tp = T.GradientTape(record=False)
    edges = responses[np.asarray(supervision_edges, dtype=np.int64)]
    loss, logp = cross_entropy(tp.const(np.asarray(embeddings["U"])), tp.const(np.asarray(embeddings["C"])),
                               tp.const(np.log(tau)), edges[:, 0], edges[:, 1], catalog, reduction)
    return float(loss.value), logp
