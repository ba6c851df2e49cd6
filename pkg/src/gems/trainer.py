"""Training loops for imputation, new individuals and new questions (stage 1)."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint
from . import tape as T
from .decoder import cross_entropy, cross_entropy_loss, predict_edges
from .encoder import EVAL, EncoderConfig, Mode, ModelParams, NodeEmbeddings, forward, init_params
from .errors import (ConfigConflict, EmptyEdgeSet, MalformedFile, MissingEmbedding, NonFiniteActivation,
                     ValidationError)
from .graph import HeteroGraph, message_index
from .optim import OptimState, adamw_step, clip_gradients
from .rng import derive_seed, round_half_up, stream
from .split import MaskPlan, Setting, Split, draw_mask_edge_level, draw_mask_individual_level


@dataclass
class TrainConfig:
    setting: Setting = Setting.IMPUTATION
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lr: float = 5e-4
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_max_norm: float = 0.1
    min_lr: float = 0.0
    epochs: int = 1000
    patience: int = 30
    steps_per_epoch_factor: int = 50
    n_graphs: int = 1
    mask_ratio: float = 0.5
    seed: int = 0
    checkpoint_path: Optional[str] = None
    transductive_val_fraction: float = 0.05
    loss_reduction: str = "sum"
    monitor: str = "accuracy"  # or "loss"
    check_disjoint: bool = True

    def __post_init__(self):
        self.setting = Setting(self.setting)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig.from_dict(self.encoder)
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.steps_per_epoch_factor < 1 or self.n_graphs < 1:
            raise ValidationError("epochs, steps_per_epoch_factor and n_graphs must be positive")
        if not 0 < self.patience < self.epochs:
            raise ValidationError(f"patience {self.patience} must lie in (0, epochs={self.epochs})")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValidationError("mask_ratio must lie in (0, 1)")
        if not 0.0 < self.transductive_val_fraction < 1.0:
            raise ValidationError("transductive_val_fraction must lie in (0, 1)")
        if self.monitor not in ("accuracy", "loss"):
            raise ValidationError(f"unknown monitor {self.monitor!r}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValidationError(f"unknown loss_reduction {self.loss_reduction!r}")
        if self.lr <= 0 or self.weight_decay < 0 or self.clip_max_norm <= 0:
            raise ValidationError("lr and clip_max_norm must be positive, weight_decay nonnegative")

    @property
    def steps_per_epoch(self) -> int:
        return self.steps_per_epoch_factor * self.n_graphs

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def new_optimizer(self) -> OptimState:
        return OptimState(lr=self.lr, weight_decay=self.weight_decay, betas=self.betas, eps=self.eps,
                          clip_max_norm=self.clip_max_norm, min_lr=self.min_lr, total_steps=self.total_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["setting"] = self.setting.value
        d["encoder"] = self.encoder.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_loss: float
    lr: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = float("-inf")
    stop_reason: str = ""
    wall_clock_seconds: float = 0.0

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def val_accuracies(self) -> list[float]:
        return [r.val_accuracy for r in self.records]

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        lines.append(json.dumps({"best_epoch": self.best_epoch, "best_val_accuracy": self.best_val_accuracy,
                                 "stop_reason": self.stop_reason,
                                 "wall_clock_seconds": self.wall_clock_seconds}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainReport":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        report = cls([EpochRecord(**r) for r in rows[:-1]])
        tail = rows[-1] if rows else {}
        report.best_epoch = tail.get("best_epoch", -1)
        report.best_val_accuracy = tail.get("best_val_accuracy", float("-inf"))
        report.stop_reason = tail.get("stop_reason", "")
        report.wall_clock_seconds = tail.get("wall_clock_seconds", 0.0)
        return report


class EarlyStopping:
    """Counts epochs without improvement of the monitored quantity."""

    def __init__(self, patience: int, mode: str = "max"):
        self.patience = patience
        self.mode = mode
        self.best: Optional[float] = None
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        better = self.best is None or (value > self.best if self.mode == "max" else value < self.best)
        if better:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return better

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience

    def state(self) -> dict:
        return {"best": self.best, "bad_epochs": self.bad_epochs}

    def restore(self, d: dict) -> None:
        self.best = d["best"]
        self.bad_epochs = d["bad_epochs"]


# ---------------------------------------------------------------------------
# evaluation


def embed(params: ModelParams, graph: HeteroGraph, message_edges) -> NodeEmbeddings:
    return forward(params, graph, message_edges, EVAL)


def _choice_table(params: ModelParams, graph: HeteroGraph, emb: NodeEmbeddings, questions,
                  projection=None, choice_features: Optional[np.ndarray] = None) -> np.ndarray:
    """Choice embeddings with projected rows for questions the model never trained on."""
    z_c = np.array(emb.C, dtype=np.float64)
    seen = set(params.meta.get("seen_questions", range(graph.n_questions)))
    unseen = sorted({int(q) for q in questions} - seen)
    if not unseen:
        return z_c
    if projection is None or choice_features is None:
        raise MissingEmbedding(f"{len(unseen)} target question(s) unseen in training and no projection given")
    for q in unseen:
        options = list(graph.catalog.questions[q].choice_node_indices)
        h = choice_features[options]
        if not np.isfinite(h).all():
            raise MissingEmbedding(f"question {graph.catalog.questions[q].question_id!r} lacks hidden states")
        z_c[options] = h @ projection.W.T
    return z_c


def predict_targets(params: ModelParams, graph: HeteroGraph, message_edges, target_edges,
                    projection=None, choice_features=None, embeddings: Optional[NodeEmbeddings] = None):
    """Predicted choice node per target edge, plus the embeddings used."""
    target_edges = np.asarray(target_edges, dtype=np.int64)
    if target_edges.size == 0:
        raise EmptyEdgeSet("no target edges")
    if message_edges is not None and np.intersect1d(target_edges, message_edges).size:
        raise ValidationError("target edges overlap message edges")
    emb = embeddings if embeddings is not None else embed(params, graph, message_edges)
    questions = graph.edge_question[target_edges]
    z_c = _choice_table(params, graph, emb, questions, projection, choice_features)
    users = graph.responses[target_edges, 0]
    pred = predict_edges(np.asarray(emb.U, dtype=np.float64), z_c, users, questions, graph.catalog)
    return pred, emb, z_c


def evaluate(params: ModelParams, graph: HeteroGraph, message_edges, target_edges,
             projection=None, choice_features: Optional[np.ndarray] = None) -> float:
    """Fraction of target edges whose argmax prediction is the recorded choice."""
    pred, _, _ = predict_targets(params, graph, message_edges, target_edges, projection, choice_features)
    truth = graph.responses[np.asarray(target_edges, dtype=np.int64), 1]
    return float(np.mean(pred == truth))


# ---------------------------------------------------------------------------
# training loop


def step_loss(params: ModelParams, graph: HeteroGraph, plan: MaskPlan, mode: Mode,
              reduction: str = "sum", tape: Optional[T.GradientTape] = None):
    """Loss tensor of one step: message-pass over plan.message_edges, score supervision edges."""
    tape = tape if tape is not None else T.GradientTape()
    emb = forward(params, graph, plan.message_edges, mode, tape)
    edges = graph.responses[plan.supervision_edges]
    loss, _ = cross_entropy(emb.tensors["U"], emb.tensors["C"], emb.tensors["log_tau"],
                            edges[:, 0], edges[:, 1], graph.catalog, reduction)
    return loss, tape


def _save_state(path, config: TrainConfig, params: ModelParams, best: ModelParams, state: OptimState,
                stopper: EarlyStopping, report: TrainReport, next_epoch: int) -> None:
    tensors = {}
    for prefix, d in (("param.", params.tensors), ("best.", best.tensors), ("m.", state.m), ("v.", state.v)):
        tensors.update({prefix + k: v for k, v in d.items()})
    cfg = {"kind": "train-state", "train": config.to_dict(), "meta": params.meta, "optim": state.hyper(),
           "stopper": stopper.state(), "report": report.to_jsonl(), "next_epoch": next_epoch}
    checkpoint.save(path, cfg, tensors)


def _load_state(path, config: TrainConfig):
    cfg, tensors = checkpoint.load(path)
    if cfg.get("kind") != "train-state":
        raise MalformedFile(f"{path}: not a training-state checkpoint")
    stored = cfg["train"]
    mine = config.to_dict()
    for key in ("setting", "encoder", "seed", "epochs", "steps_per_epoch_factor", "n_graphs", "lr"):
        if stored.get(key) != mine.get(key):
            raise ConfigConflict(f"resume state has {key}={stored.get(key)!r}, config has {mine.get(key)!r}")
    dtype = np.dtype(config.encoder.dtype)
    pick = lambda prefix: {k[len(prefix):]: v.astype(dtype) for k, v in tensors.items() if k.startswith(prefix)}
    meta = cfg["meta"]
    params = ModelParams(config.encoder, pick("param."), meta)
    best = ModelParams(config.encoder, pick("best."), dict(meta))
    state = OptimState.from_hyper(cfg["optim"])
    state.m, state.v = pick("m."), pick("v.")
    stopper = EarlyStopping(config.patience, "max" if config.monitor == "accuracy" else "min")
    stopper.restore(cfg["stopper"])
    return params, best, state, stopper, TrainReport.from_jsonl(cfg["report"]), int(cfg["next_epoch"])


def _train_loop(graph: HeteroGraph, config: TrainConfig, draw: Callable[[int, int], MaskPlan],
                val_message, val_targets, seen_questions=None, resume_from=None,
                state_path=None, log: Optional[Callable[[EpochRecord], None]] = None):
    """Shared step/epoch loop. ``draw(step, attempt)`` returns the step's MaskPlan or None to redraw."""
    t0 = time.perf_counter()
    val_message = np.asarray(val_message, dtype=np.int64)
    val_targets = np.asarray(val_targets, dtype=np.int64)
    if val_targets.size == 0:
        raise EmptyEdgeSet("no validation target edges")
    if resume_from is not None:
        params, best, state, stopper, report, start = _load_state(resume_from, config)
    else:
        params = init_params(config.encoder, graph, config.seed)
        if seen_questions is not None:
            params.meta["seen_questions"] = [int(q) for q in seen_questions]
        best = params.copy()
        state = config.new_optimizer()
        stopper = EarlyStopping(config.patience, "max" if config.monitor == "accuracy" else "min")
        report = TrainReport()
        start = 0
    val_adjacency = message_index(graph, val_message)
    spe = config.steps_per_epoch
    for epoch in range(start, config.epochs):
        if stopper.should_stop:
            break
        losses = []
        for s in range(spe):
            step = epoch * spe + s
            attempt = 0
            plan = draw(step, attempt)
            while plan is None:
                attempt += 1
                if attempt > 100:
                    raise EmptyEdgeSet(f"step {step}: could not draw a usable mask")
                plan = draw(step, attempt)
            if config.check_disjoint:
                assert np.intersect1d(plan.message_edges, plan.supervision_edges).size == 0
            lr = state.current_lr()
            loss, tape = step_loss(params, graph, plan, Mode.Train(plan.step_seed), config.loss_reduction)
            grads = clip_gradients(T.backward(tape, loss), config.clip_max_norm)
            new, state = adamw_step(params.tensors, grads, state)
            params = ModelParams(params.config, new, params.meta)
            if not np.isfinite(loss.value):
                raise NonFiniteActivation(f"non-finite loss at step {step}")
            losses.append(float(loss.value))
        emb = forward(params, graph, None, EVAL, adjacency=val_adjacency)
        pred, _, z_c = predict_targets(params, graph, val_message, val_targets, embeddings=emb)
        acc = float(np.mean(pred == graph.responses[val_targets, 1]))
        vloss, _ = cross_entropy_loss({"U": emb.U, "C": z_c}, val_targets, graph.responses, graph.catalog,
                                      params.tau, "mean")
        record = EpochRecord(epoch, float(np.mean(losses)), acc, float(vloss), lr)
        report.records.append(record)
        if acc > report.best_val_accuracy:
            report.best_val_accuracy = acc
            report.best_epoch = epoch
            best = params.copy()
        stopper.update(acc if config.monitor == "accuracy" else vloss)
        if log is not None:
            log(record)
        if state_path is not None:
            _save_state(state_path, config, params, best, state, stopper, report, epoch + 1)
    report.stop_reason = "patience" if stopper.should_stop else "budget"
    report.wall_clock_seconds = time.perf_counter() - t0
    return best, report


def _require(split: Split, setting: Setting, config: TrainConfig) -> None:
    if split.setting is not setting:
        raise ConfigConflict(f"split is for setting {split.setting.value!r}, expected {setting.value!r}")
    if config.setting is not setting:
        raise ConfigConflict(f"config is for setting {config.setting.value!r}, expected {setting.value!r}")


def train_setting1(graph: HeteroGraph, split: Split, config: TrainConfig, resume_from=None, state_path=None,
                   log=None) -> tuple[ModelParams, TrainReport]:
    """Edge-level masking over observed edges; validation message-passes all observed edges."""
    _require(split, Setting.IMPUTATION, config)
    observed = split.observed_response_edges

    def draw(step, attempt):
        return draw_mask_edge_level(observed, config.mask_ratio, derive_seed(config.seed, "step", step, attempt))

    return _train_loop(graph, config, draw, observed, split.val_target_edges, resume_from=resume_from,
                       state_path=state_path, log=log)


def train_setting2(graph: HeteroGraph, split: Split, config: TrainConfig, resume_from=None, state_path=None,
                   log=None) -> tuple[ModelParams, TrainReport]:
    """Individual-level masking; held-out individuals are embedded from membership edges only."""
    _require(split, Setting.NEW_INDIVIDUALS, config)
    observed = split.observed_response_edges

    def draw(step, attempt):
        plan = draw_mask_individual_level(observed, graph, config.mask_ratio,
                                          derive_seed(config.seed, "step", step, attempt))
        if plan.message_edges.size == 0 or plan.supervision_edges.size == 0:
            return None
        return plan

    return _train_loop(graph, config, draw, observed, split.val_target_edges, resume_from=resume_from,
                       state_path=state_path, log=log)


@dataclass
class Stage1Result:
    params: ModelParams
    report: TrainReport
    choices: np.ndarray  # train-question choice nodes, ascending
    choice_embeddings: np.ndarray  # (len(choices), d_gnn)
    message_edges: np.ndarray  # every observed edge, used for export
    transductive_val_edges: np.ndarray


def transductive_holdout(observed, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(remaining, held-out) split of observed edges; held-out count rounded half-up."""
    observed = np.sort(np.asarray(observed, dtype=np.int64))
    n_val = round_half_up(fraction * observed.size)
    if n_val < 1 or n_val >= observed.size:
        raise EmptyEdgeSet(f"{observed.size} observed edges cannot give a {fraction:.0%} hold-out")
    pick = stream(seed, "transductive-val").permutation(observed.size)
    held = np.zeros(observed.size, dtype=bool)
    held[pick[:n_val]] = True
    return observed[~held], observed[held]


def train_setting3_stage1(graph: HeteroGraph, split: Split, config: TrainConfig, resume_from=None,
                          state_path=None, log=None) -> Stage1Result:
    """Train on train-question edges and export their choice embeddings at the best checkpoint."""
    _require(split, Setting.NEW_QUESTIONS, config)
    remaining, held = transductive_holdout(split.observed_response_edges, config.transductive_val_fraction,
                                           config.seed)

    def draw(step, attempt):
        return draw_mask_edge_level(remaining, config.mask_ratio, derive_seed(config.seed, "step", step, attempt))

    params, report = _train_loop(graph, config, draw, remaining, held, seen_questions=split.train_questions,
                                 resume_from=resume_from, state_path=state_path, log=log)
    observed = split.observed_response_edges
    emb = embed(params, graph, observed)
    choices = np.sort(np.concatenate([np.asarray(graph.catalog.questions[q].choice_node_indices, dtype=np.int64)
                                      for q in split.train_questions]))
    return Stage1Result(params, report, choices, np.asarray(emb.C[choices], dtype=np.float64), observed, held)

