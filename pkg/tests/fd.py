"""Central finite differences of the full training loss, for checking tape gradients."""
from __future__ import annotations

import numpy as np

from gems import tape as T
from gems.encoder import EVAL, EncoderConfig, Mode
from gems.split import draw_mask_edge_level
from gems.trainer import step_loss

from conftest import jittered_params, random_graph


def small_config(arch: str) -> EncoderConfig:
    return EncoderConfig(architecture=arch, d_subgroup=3, d_choice=6, hidden_dim=8, d_gnn=5, gat_heads=(2, 1))


def fixture(seed: int, arch: str):
    """A random graph under 30 nodes, generic parameters and a 50/50 edge mask."""
    rng = np.random.default_rng(seed)
    graph, _ = random_graph(rng, n_subgroups=3, n_individuals=10, n_questions=4, max_options=3)
    assert graph.n_subgroups + graph.n_individuals + graph.n_choices <= 30
    params = jittered_params(small_config(arch), graph, seed)
    plan = draw_mask_edge_level(np.arange(graph.n_responses), 0.5, step_seed=seed)
    return graph, params, plan


def loss_value(params, graph, plan, mode) -> float:
    loss, _ = step_loss(params, graph, plan, mode, tape=T.GradientTape(record=False))
    return float(loss.value)


def max_relative_error(graph, params, plan, train: bool, per_tensor: int = 6, h: float = 1e-5,
                       floor: float = 1e-4, seed: int = 0) -> tuple[float, str]:
    """Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over sampled entries.

    Train mode replays the same dropout masks in every evaluation because
    they derive from the plan's step seed.
    """
    mode = Mode.Train(plan.step_seed) if train else EVAL
    loss, tape = step_loss(params, graph, plan, mode)
    grads = T.backward(tape, loss)
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for name, value in params.tensors.items():
        flat = value.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            up = loss_value(params, graph, plan, mode)
            flat[i] = old - h
            down = loss_value(params, graph, plan, mode)
            flat[i] = old
            numeric = (up - down) / (2 * h)
            analytic = grads[name].reshape(-1)[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            if err > worst:
                worst, where = err, f"{name}[{i}] analytic={analytic:.6g} numeric={numeric:.6g}"
    return worst, where
