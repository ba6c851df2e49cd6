"""Relation-aware graph encoders (RGCN, GAT, GraphSAGE) and their parameters.

Node kinds: S (subgroup), U (individual), C (choice). Input features are the
learnable tables ``Z_S`` and ``Z_C`` and a constant 1 for individuals. Every
layer maps all kinds to ``hidden_dim``; the final per-kind linear projection
produces the output embeddings used by the decoder.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import checkpoint
from . import tape as T
from .errors import DimensionMismatch, EmptyGraph, MalformedFile, NonFiniteActivation, ValidationError
from .graph import Csr, HeteroGraph, RELATIONS, message_index
from .rng import stream

KINDS = ("S", "U", "C")


class Architecture(str, Enum):
    RGCN = "rgcn"
    GAT = "gat"
    SAGE = "sage"


@dataclass
class EncoderConfig:
    architecture: Architecture = Architecture.RGCN
    layers: int = 2
    d_subgroup: int = 8
    d_choice: int = 64
    hidden_dim: Optional[int] = None  # defaults to d_choice
    d_gnn: Optional[int] = None  # defaults to hidden_dim
    gat_heads: tuple[int, ...] = (4, 1)
    dropout_embed: float = 0.5
    dropout_attention: float = 0.4
    leaky_relu_slope: float = 0.2
    layer_norm_epsilon: float = 1e-5
    normalize_epsilon: float = 1e-12
    dtype: str = "float64"

    def __post_init__(self):
        self.architecture = Architecture(self.architecture)
        self.gat_heads = tuple(int(h) for h in self.gat_heads)
        if self.hidden_dim is None:
            self.hidden_dim = self.d_choice
        if self.d_gnn is None:
            self.d_gnn = self.hidden_dim
        self.validate()

    @property
    def d_individual(self) -> int:
        return 1

    def heads(self, layer: int) -> int:
        if self.architecture is not Architecture.GAT:
            return 1
        return self.gat_heads[min(layer, len(self.gat_heads) - 1)]

    def input_dims(self, layer: int) -> dict[str, int]:
        if layer == 0:
            return {"S": self.d_subgroup, "U": 1, "C": self.d_choice}
        return {k: self.hidden_dim for k in KINDS}

    def validate(self) -> None:
        if self.layers < 1:
            raise ValidationError("layers must be >= 1")
        for name in ("d_subgroup", "d_choice", "hidden_dim", "d_gnn"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        for name in ("dropout_embed", "dropout_attention"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must lie in [0, 1)")
        if self.architecture is Architecture.GAT:
            for layer in range(self.layers):
                if self.hidden_dim % self.heads(layer):
                    raise ValidationError(
                        f"hidden_dim {self.hidden_dim} not divisible by {self.heads(layer)} heads")
        if self.dtype not in ("float64", "float32"):
            raise ValidationError("dtype must be float64 or float32")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["architecture"] = self.architecture.value
        d["gat_heads"] = list(self.gat_heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    @classmethod
    def opinionqa_scale(cls, architecture="rgcn", **kw) -> "EncoderConfig":
        return cls(architecture=architecture, d_subgroup=16, d_choice=128, **kw)


def param_shapes(config: EncoderConfig, n_subgroups: int, n_choices: int) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape for every learnable tensor."""
    hid = config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "Z_S": (n_subgroups, config.d_subgroup),
        "Z_C": (n_choices, config.d_choice),
    }
    arch = config.architecture
    for layer in range(config.layers):
        dims = config.input_dims(layer)
        p = f"l{layer}"
        for rel in RELATIONS:
            src, dst = rel.src.value, rel.dst.value
            if arch is Architecture.GAT:
                heads = config.heads(layer)
                shapes[f"{p}.{rel.name}.lin_src"] = (hid, dims[src])
                shapes[f"{p}.{rel.name}.lin_dst"] = (hid, dims[dst])
                shapes[f"{p}.{rel.name}.att_src"] = (heads, hid // heads)
                shapes[f"{p}.{rel.name}.att_dst"] = (heads, hid // heads)
            else:
                shapes[f"{p}.{rel.name}.W"] = (hid, dims[src])
        if arch is not Architecture.GAT:
            for k in KINDS:
                shapes[f"{p}.self.{k}"] = (hid, dims[k])
        for k in KINDS:
            shapes[f"{p}.ln.{k}.gamma"] = (hid,)
            shapes[f"{p}.ln.{k}.beta"] = (hid,)
    for k in KINDS:
        shapes[f"proj.{k}.W"] = (config.d_gnn, hid)
        shapes[f"proj.{k}.b"] = (config.d_gnn,)
    shapes["log_tau"] = ()
    return shapes


def count_parameters(config: EncoderConfig, n_subgroups: int, n_choices: int) -> int:
    return sum(math.prod(s) for s in param_shapes(config, n_subgroups, n_choices).values())


@dataclass
class ModelParams:
    config: EncoderConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def tau(self) -> float:
        return float(np.exp(self.tensors["log_tau"]))

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta))

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def init_params(config: EncoderConfig, graph: HeteroGraph, seed: int) -> ModelParams:
    """Glorot-uniform weights, N(0, 1/d) feature tables, unit LayerNorm scale, tau = 1."""
    dtype = np.dtype(config.dtype)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config, graph.n_subgroups, graph.n_choices).items():
        rng = stream(seed, "init:" + name)
        if name in ("Z_S", "Z_C"):
            value = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), size=shape)
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        elif name.endswith((".beta", ".b")) or name == "log_tau":
            value = np.zeros(shape)
        else:
            fan_out, fan_in = shape if not name.endswith(("att_src", "att_dst")) else (1, shape[1])
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, size=shape)
        tensors[name] = np.asarray(value, dtype=dtype)
    meta = {"n_subgroups": graph.n_subgroups, "n_choices": graph.n_choices,
            "seen_questions": list(range(graph.n_questions))}
    return ModelParams(config, tensors, meta)


# ---------------------------------------------------------------------------
# forward


@dataclass(frozen=True)
class Mode:
    train: bool = False
    step_seed: int = 0

    @classmethod
    def Train(cls, step_seed: int) -> "Mode":
        return cls(True, int(step_seed))


EVAL = Mode()


@dataclass
class NodeEmbeddings:
    S: np.ndarray
    U: np.ndarray
    C: np.ndarray
    tensors: dict = field(default_factory=dict, repr=False)
    attention: dict = field(default_factory=dict, repr=False)

    def __getitem__(self, kind: str) -> np.ndarray:
        return getattr(self, kind)


def _keep_mask(mode: Mode, rate: float, shape, tag: str, *keys) -> Optional[np.ndarray]:
    if not mode.train or rate == 0.0:
        return None
    return stream(mode.step_seed, tag, *keys).random(shape) >= rate


def _finish(pre: dict, lp: dict, config: EncoderConfig, mode: Mode, layer: int, normalize: bool) -> dict:
    """Shared tail: [L2-normalize], ReLU, LayerNorm, then dropout unless this is the last layer."""
    between = layer < config.layers - 1
    out = {}
    for i, k in enumerate(KINDS):
        x = pre[k]
        if normalize:
            x = T.l2_normalize(x, config.normalize_epsilon)
        x = T.relu(x)
        x = T.layer_norm(x, lp[f"ln.{k}.gamma"], lp[f"ln.{k}.beta"], config.layer_norm_epsilon)
        if between:
            mask = _keep_mask(mode, config.dropout_embed, x.value.shape, "dropout-embed", layer, i)
            x = T.dropout(x, mask, config.dropout_embed)
        out[k] = x
    return out


def _mean_messages(h: dict, adjacency: dict[str, Csr], lp: dict, self_key: str) -> dict:
    pre = {k: [T.linear(h[k], lp[f"{self_key}.{k}"])] for k in KINDS}
    for rel in RELATIONS:
        agg = T.mean_aggregate(adjacency[rel.name], h[rel.src.value])
        pre[rel.dst.value].append(T.linear(agg, lp[f"{rel.name}.W"]))
    return {k: T.add(*terms) for k, terms in pre.items()}


def rgcn_layer(h: dict, adjacency: dict[str, Csr], lp: dict, config: EncoderConfig,
               mode: Mode = EVAL, layer: int = 0) -> dict:
    """W_self,t z_w + sum_r mean_{v in N_r(w)} W_r z_v, then ReLU, LayerNorm, dropout."""
    pre = _mean_messages(h, adjacency, lp, "self")
    return _finish(pre, lp, config, mode, layer, normalize=False)


def sage_layer(h: dict, adjacency: dict[str, Csr], lp: dict, config: EncoderConfig,
               mode: Mode = EVAL, layer: int = 0) -> dict:
    """Normalize(Theta_root z_w + sum_r mean Theta_r z_v), then ReLU, LayerNorm, dropout."""
    pre = _mean_messages(h, adjacency, lp, "self")
    return _finish(pre, lp, config, mode, layer, normalize=True)


def with_self_loops(csr: Csr, n_src: int) -> Csr:
    """Append entry ``n_src + w`` to each row w, addressing the row's own node."""
    n = csr.n_rows
    indptr = csr.indptr + np.arange(n + 1, dtype=np.int64)
    indices = np.empty(csr.nnz + n, dtype=np.int64)
    indices[np.arange(csr.nnz) + csr.row_of_entry] = csr.indices
    indices[indptr[1:] - 1] = n_src + np.arange(n, dtype=np.int64)
    return Csr(n, n_src + n, indptr, indices)


def gat_layer(h: dict, adjacency: dict[str, Csr], lp: dict, config: EncoderConfig,
              mode: Mode = EVAL, layer: int = 0, attention: Optional[dict] = None) -> dict:
    """Multi-head attention per relation over N_r(w) plus w itself; heads concatenated, relations summed.

    The self entry is transformed with the target-side matrix (the node lives
    in the target's feature space) and scored with the source vector.
    """
    heads = config.heads(layer)
    width = config.hidden_dim // heads
    pre: dict[str, list] = {k: [] for k in KINDS}
    for ri, rel in enumerate(RELATIONS):
        src, dst = rel.src.value, rel.dst.value
        n_src, n_dst = h[src].value.shape[0], h[dst].value.shape[0]
        aug = with_self_loops(adjacency[rel.name], n_src)
        xs = T.reshape(T.linear(h[src], lp[f"{rel.name}.lin_src"]), (n_src, heads, width))
        xd = T.reshape(T.linear(h[dst], lp[f"{rel.name}.lin_dst"]), (n_dst, heads, width))
        att_src, att_dst = lp[f"{rel.name}.att_src"], lp[f"{rel.name}.att_dst"]
        values = T.concat_rows(xs, xd)
        src_score = T.concat_rows(T.head_dot(xs, att_src), T.head_dot(xd, att_src))
        logits = T.leaky_relu(T.edge_logits(aug, T.head_dot(xd, att_dst), src_score), config.leaky_relu_slope)
        alpha = T.segment_softmax(aug, logits)
        if attention is not None:
            attention[(layer, rel.name)] = (aug, alpha.value)
        mask = _keep_mask(mode, config.dropout_attention, alpha.value.shape, "dropout-attention", layer, ri)
        alpha = T.dropout(alpha, mask, config.dropout_attention)
        out = T.spmm(aug, alpha, values)
        pre[dst].append(T.reshape(out, (n_dst, heads * width)))
    summed = {k: T.add(*terms) for k, terms in pre.items()}
    return _finish(summed, lp, config, mode, layer, normalize=False)


_LAYERS = {Architecture.RGCN: rgcn_layer, Architecture.SAGE: sage_layer, Architecture.GAT: gat_layer}


def forward(params: ModelParams, graph: HeteroGraph, message_edges=None, mode: Mode = EVAL,
            tape: Optional[T.GradientTape] = None, adjacency: Optional[dict[str, Csr]] = None) -> NodeEmbeddings:
    """Output embeddings for every node.

    Response relations see only ``message_edges`` (None = all response
    edges); membership edges are always active. Pass a recording ``tape`` to
    differentiate; the returned ``tensors`` then hold the tape outputs.
    """
    config = params.config
    if graph.n_individuals == 0 or graph.n_choices == 0:
        raise EmptyGraph("graph has no individuals or no choices")
    if params.tensors["Z_S"].shape[0] != graph.n_subgroups or params.tensors["Z_C"].shape[0] != graph.n_choices:
        raise DimensionMismatch("parameter tables do not match the graph's node counts")
    if tape is None:
        tape = T.GradientTape(record=False)
    if adjacency is None:
        adjacency = message_index(graph, message_edges)
    leaves = {name: tape.param(name, value) for name, value in params.tensors.items()}
    dtype = np.dtype(config.dtype)
    h = {"S": leaves["Z_S"], "U": tape.const(np.ones((graph.n_individuals, 1), dtype=dtype)), "C": leaves["Z_C"]}
    layer_fn = _LAYERS[config.architecture]
    attention: dict = {}
    for layer in range(config.layers):
        prefix = f"l{layer}."
        lp = {name[len(prefix):]: t for name, t in leaves.items() if name.startswith(prefix)}
        if config.architecture is Architecture.GAT:
            h = gat_layer(h, adjacency, lp, config, mode, layer, attention)
        else:
            h = layer_fn(h, adjacency, lp, config, mode, layer)
        for k in KINDS:
            if not np.isfinite(h[k].value).all():
                raise NonFiniteActivation(f"non-finite activation in layer {layer} for kind {k}")
    out = {k: T.linear(h[k], leaves[f"proj.{k}.W"], leaves[f"proj.{k}.b"]) for k in KINDS}
    out["log_tau"] = leaves["log_tau"]
    return NodeEmbeddings(S=out["S"].value, U=out["U"].value, C=out["C"].value, tensors=out, attention=attention)


def save_params(path, params: ModelParams, extra: Optional[dict] = None) -> None:
    cfg = {"kind": "model", "encoder": params.config.to_dict(), "meta": params.meta}
    cfg.update(extra or {})
    checkpoint.save(path, cfg, params.tensors)


def load_params(path) -> ModelParams:
    cfg, tensors = checkpoint.load(path)
    if cfg.get("kind") != "model":
        raise MalformedFile(f"{path}: not a model checkpoint")
    config = EncoderConfig.from_dict(cfg["encoder"])
    meta = cfg.get("meta", {})
    expected = param_shapes(config, meta.get("n_subgroups", 0), meta.get("n_choices", 0))
    if set(expected) != set(tensors) or any(tuple(tensors[k].shape) != expected[k] for k in expected):
        raise MalformedFile(f"{path}: tensors do not match the stored encoder configuration")
    dtype = np.dtype(config.dtype)
    return ModelParams(config, {k: tensors[k].astype(dtype) for k in expected}, meta)
