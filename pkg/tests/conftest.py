import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gems.encoder import EncoderConfig, init_params  # noqa: E402
from gems.graph import build_graph  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def random_graph(rng, n_subgroups=3, n_individuals=8, n_questions=3, max_options=3, p_answer=0.8,
                 p_member=0.4, min_options=2):
    """Small random graph; every individual answers at least one question."""
    catalog = []
    sizes = rng.integers(min_options, max_options + 1, size=n_questions)
    for q in range(n_questions):
        for k in range(sizes[q]):
            catalog.append((f"q{q}", f"c{k}", k))
    responses = []
    for u in range(n_individuals):
        answered = [q for q in range(n_questions) if rng.random() < p_answer] or [int(rng.integers(n_questions))]
        for q in answered:
            responses.append((f"u{u}", f"q{q}", f"c{int(rng.integers(sizes[q]))}"))
    memberships = [(f"u{u}", f"s{s}") for u in range(n_individuals) for s in range(n_subgroups)
                   if rng.random() < p_member]
    memberships.append(("u0", "s0"))  # at least one subgroup exists
    return build_graph(responses, memberships, catalog)


def jittered_params(config: EncoderConfig, graph, seed: int, scale: float = 0.3):
    """Initial parameters moved to a generic point (no zero biases or unit LayerNorm scales)."""
    params = init_params(config, graph, seed)
    rng = np.random.default_rng(seed + 1000)
    for name, value in params.tensors.items():
        params.tensors[name] = np.asarray(value + scale * rng.normal(size=value.shape))
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
