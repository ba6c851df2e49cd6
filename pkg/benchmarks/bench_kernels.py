"""Compiled vs numpy-fallback sparse kernels, plus one full forward/backward step.

    python benchmarks/bench_kernels.py [--edges 200000] [--width 64] [--repeat 5]
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

from gems import kernels
from gems import tape as T
from gems.encoder import EVAL, EncoderConfig, init_params
from gems.split import draw_mask_edge_level
from gems.trainer import step_loss

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from planted import subgroup_population  # noqa: E402


def random_csr(rng, n_rows, n_cols, nnz):
    rows = np.sort(rng.integers(n_rows, size=nnz))
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    return np.cumsum(indptr), rng.integers(n_cols, size=nnz).astype(np.int64)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--edges", type=int, default=200_000)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n_rows = n_cols = args.edges // 20
    indptr, indices = random_csr(rng, n_rows, n_cols, args.edges)
    heads = 4
    x = rng.normal(size=(n_cols, heads, args.width // heads))
    a = rng.normal(size=(n_rows, heads, args.width // heads))
    w = rng.random((args.edges, heads))
    logits = rng.normal(size=(args.edges, heads))
    rows_values = rng.normal(size=(args.edges, args.width))
    alpha = kernels.segment_softmax(indptr, logits)
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))

    cases = {
        "spmm": lambda: kernels.spmm(indptr, indices, w, x, n_rows),
        "sddmm": lambda: kernels.sddmm(indptr, indices, a, x),
        "segment_softmax": lambda: kernels.segment_softmax(indptr, logits),
        "segment_softmax_backward": lambda: kernels.segment_softmax_backward(indptr, alpha, logits),
        "scatter_add_rows": lambda: kernels.scatter_add_rows(rows, rows_values, n_rows),
    }

    graph, _ = subgroup_population(n_individuals=2000, n_questions=30, seed=0)
    plan = draw_mask_edge_level(np.arange(graph.n_responses), 0.5, step_seed=0)
    for arch in ("rgcn", "gat", "sage"):
        params = init_params(EncoderConfig(architecture=arch), graph, 0)

        def step(params=params):
            loss, tape = step_loss(params, graph, plan, EVAL)
            T.backward(tape, loss)

        cases[f"train step ({arch}, {graph.n_responses} edges)"] = step

    print(f"backends available: {', '.join(kernels.AVAILABLE)}")
    print(f"{'case':<40}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in cases.items():
        timing = {}
        for b in kernels.AVAILABLE:
            with kernels.backend(b):
                fn()
                timing[b] = best_of(fn, args.repeat)
        py = timing["python"] * 1e3
        if "compiled" in timing:
            c = timing["compiled"] * 1e3
            print(f"{name:<40}{py:>12.2f}{c:>14.2f}{py / c:>9.1f}x")
        else:
            print(f"{name:<40}{py:>12.2f}{'n/a':>14}")


if __name__ == "__main__":
    main()
