"""``gems`` command line: build, train, eval, project, export-embeddings.

Each run is driven by one YAML/JSON config file plus a few flag overrides.
Commands exchange on-disk artifacts inside the output directory::

    graph.json  summary.json  resolved_config.json
    seed-<n>/split.json  model.gems  train_report.jsonl  train_state.gems
    seed-<n>/stage1.gems  projection.gems  projection.json        (new-questions)
    seed-<n>/metrics.json  predictions.csv  embeddings.gems  pca.csv
    metrics.json                                                   (across seeds)

Exit status: 0 success, 2 invalid input or configuration, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import checkpoint
from .decoder import question_probabilities
from .encoder import EncoderConfig, forward, load_params, save_params
from .errors import ConfigConflict, GemsError, MalformedInput, MissingArtifact, ValidationError
from .evalreport import (format_mean_std, mean_std, metrics_report, pca_export, random_baseline, write_json)
from .graph import load_graph, read_dataset, save_graph
from .projection import (DEFAULT_ALPHA_GRID, ProjectionModel, convert_csv, load_hidden_states,
                         select_hidden_states)
from .split import Setting, Split, split_individuals, split_questions
from .trainer import (Stage1Result, TrainConfig, TrainReport, predict_targets, train_setting1, train_setting2,
                      train_setting3_stage1)

log = logging.getLogger("gems")

DEFAULTS: dict[str, Any] = {
    "data.responses": None,
    "data.memberships": None,
    "data.catalog": None,
    "setting": "impute",
    "architecture": "rgcn",
    "seeds": [0],
    "out": "gems-run",
    "encoder.layers": 2,
    "encoder.d_subgroup": 8,
    "encoder.d_choice": 64,
    "encoder.hidden_dim": None,
    "encoder.d_gnn": None,
    "encoder.gat_heads": [4, 1],
    "encoder.dropout_embed": 0.5,
    "encoder.dropout_attention": 0.4,
    "encoder.leaky_relu_slope": 0.2,
    "encoder.dtype": "float32",
    "train.lr": 5e-4,
    "train.weight_decay": 1e-3,
    "train.betas": [0.9, 0.999],
    "train.eps": 1e-8,
    "train.clip_max_norm": 0.1,
    "train.min_lr": 0.0,
    "train.epochs": 1000,
    "train.patience": 30,
    "train.steps_per_epoch_factor": 50,
    "train.mask_ratio": 0.5,
    "train.transductive_val_fraction": 0.05,
    "train.loss_reduction": "sum",
    "train.monitor": "accuracy",
    "split.individual_fractions": [0.35, 0.05, 0.60],
    "split.within_individual_observed_fraction": 0.40,
    "split.question_fractions": [0.70, 0.10, 0.20],
    "projection.hidden_states": [],
    "projection.alphas": list(DEFAULT_ALPHA_GRID),
    "export.pca_components": 2,
}

SETTINGS = [s.value for s in Setting]
ARCHITECTURES = ["rgcn", "gat", "sage"]


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and any(d.startswith(name + ".") for d in DEFAULTS):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


class RunConfig:
    """Resolved run configuration; ``sources`` records where each value came from."""

    def __init__(self, values: dict, sources: dict, config_path: Optional[str] = None):
        self.values = values
        self.sources = sources
        self.config_path = config_path

    @classmethod
    def resolve(cls, config_path: Optional[str] = None, overrides: Optional[dict] = None) -> "RunConfig":
        values = copy.deepcopy(DEFAULTS)
        sources = {k: "default" for k in DEFAULTS}
        if config_path is not None:
            path = Path(config_path)
            if not path.exists():
                raise MissingArtifact(f"config file {path} not found")
            try:
                doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            except yaml.YAMLError as exc:
                raise MalformedInput(f"{path}: {exc}") from None
            if not isinstance(doc, dict):
                raise MalformedInput(f"{path}: top level must be a mapping")
            flat = _flatten(doc)
            unknown = sorted(set(flat) - set(DEFAULTS))
            if unknown:
                raise MalformedInput(f"{path}: unknown config key(s): {', '.join(unknown)}")
            base = path.parent
            for key, value in flat.items():
                if key.startswith("data.") and value is not None:
                    value = str((base / value) if not Path(value).is_absolute() else value)
                if key == "projection.hidden_states":
                    value = [str(base / v) if not Path(v).is_absolute() else v for v in _as_list(value)]
                if key == "seeds" and isinstance(value, int):
                    value = [value]
                values[key] = value
                sources[key] = "file"
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in DEFAULTS:
                raise MalformedInput(f"unknown override {key!r}")
            values[key] = value
            sources[key] = "flag"
        cfg = cls(values, sources, config_path)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        if self["setting"] not in SETTINGS:
            raise ValidationError(f"setting must be one of {SETTINGS}")
        if self["architecture"] not in ARCHITECTURES:
            raise ValidationError(f"architecture must be one of {ARCHITECTURES}")
        seeds = self["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ValidationError("seeds must be a nonempty list of integers")
        try:
            self.train_config(seeds[0])  # field-level checks
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"invalid configuration value: {exc}") from None

    @property
    def setting(self) -> Setting:
        return Setting(self["setting"])

    @property
    def out(self) -> Path:
        return Path(self["out"])

    def encoder_config(self) -> EncoderConfig:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("encoder.")}
        return EncoderConfig(architecture=self["architecture"], **kw)

    def train_config(self, seed: int) -> TrainConfig:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("train.")}
        return TrainConfig(setting=self.setting, encoder=self.encoder_config(), seed=int(seed), **kw)

    def nested(self) -> dict:
        out: dict = {}
        for key in sorted(self.values):
            node = out
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = self.values[key]
        return out

    def write_resolved(self, path: Path) -> None:
        write_json(path, {"config": self.nested(), "sources": dict(sorted(self.sources.items()))})


def _as_list(v) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


# ---------------------------------------------------------------------------
# artifacts


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}")
    return path


def _seed_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.out / f"seed-{seed}"


def _load_graph(cfg: RunConfig):
    return load_graph(_need(cfg.out / "graph.json", "graph artifact (run `gems build` first)"))


def _make_split(cfg: RunConfig, graph, seed: int) -> Split:
    if cfg.setting is Setting.NEW_QUESTIONS:
        return split_questions(graph, tuple(cfg["split.question_fractions"]), seed)
    fraction = cfg["split.within_individual_observed_fraction"] if cfg.setting is Setting.IMPUTATION else 0.0
    return split_individuals(graph, tuple(cfg["split.individual_fractions"]), fraction, seed)


def _save_stage1(path: Path, result: Stage1Result) -> None:
    checkpoint.save(path, {"kind": "stage1", "choices": result.choices.tolist(),
                           "transductive_val_edges": result.transductive_val_edges.tolist()},
                    {"z_o": result.choice_embeddings})


def _load_stage1(seed_dir: Path, split: Split) -> Stage1Result:
    cfg, tensors = checkpoint.load(_need(seed_dir / "stage1.gems", "stage-1 choice embeddings"))
    params = load_params(_need(seed_dir / "model.gems", "stage-1 model"))
    report_path = seed_dir / "train_report.jsonl"
    report = TrainReport.from_jsonl(report_path.read_text()) if report_path.exists() else TrainReport()
    return Stage1Result(params, report, np.asarray(cfg["choices"], dtype=np.int64), tensors["z_o"],
                        split.observed_response_edges,
                        np.asarray(cfg["transductive_val_edges"], dtype=np.int64))


# ---------------------------------------------------------------------------
# commands


def cmd_build(cfg: RunConfig) -> dict:
    paths = [cfg["data.responses"], cfg["data.memberships"], cfg["data.catalog"]]
    if any(p is None for p in paths):
        raise ValidationError("data.responses, data.memberships and data.catalog must all be set")
    graph, ids = read_dataset(*paths)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_graph(cfg.out / "graph.json", graph, ids)
    summary = graph.summary()
    write_json(cfg.out / "summary.json", summary)
    return summary


def cmd_train(cfg: RunConfig, resume: bool = False) -> dict:
    graph, ids = _load_graph(cfg)
    results = {}
    for seed in cfg["seeds"]:
        d = _seed_dir(cfg, seed)
        d.mkdir(parents=True, exist_ok=True)
        split = _make_split(cfg, graph, seed)
        split.save(d / "split.json", list(ids.question_ids))
        tcfg = cfg.train_config(seed)
        state_path = d / "train_state.gems"
        resume_from = _need(state_path, "training state") if resume else None
        logger = lambda r, s=seed: log.info("seed %d epoch %d loss %.4f val_acc %.4f", s, r.epoch,
                                            r.train_loss, r.val_accuracy)
        kw = dict(resume_from=resume_from, state_path=state_path, log=logger)
        if cfg.setting is Setting.IMPUTATION:
            params, report = train_setting1(graph, split, tcfg, **kw)
        elif cfg.setting is Setting.NEW_INDIVIDUALS:
            params, report = train_setting2(graph, split, tcfg, **kw)
        else:
            stage1 = train_setting3_stage1(graph, split, tcfg, **kw)
            params, report = stage1.params, stage1.report
            _save_stage1(d / "stage1.gems", stage1)
        save_params(d / "model.gems", params, {"seed": int(seed), "setting": cfg.setting.value})
        report.write(d / "train_report.jsonl")
        results[seed] = {"best_epoch": report.best_epoch, "best_val_accuracy": report.best_val_accuracy,
                         "stop_reason": report.stop_reason}
    return results


def _hidden_tables(cfg: RunConfig) -> dict:
    paths = cfg["projection.hidden_states"]
    if not paths:
        raise MissingArtifact("projection.hidden_states lists no hidden-state files")
    return {Path(p).name: load_hidden_states(_need(Path(p), "hidden-state file")) for p in paths}


def cmd_project(cfg: RunConfig) -> dict:
    if cfg.setting is not Setting.NEW_QUESTIONS:
        raise ConfigConflict(f"projection applies to new-questions runs, not {cfg.setting.value!r}")
    graph, ids = _load_graph(cfg)
    out = {}
    for seed in cfg["seeds"]:
        d = _seed_dir(cfg, seed)
        split = Split.load(_need(d / "split.json", "split"))
        stage1 = _load_stage1(d, split)
        tables = _hidden_tables(cfg)
        tag, alpha, acc, model = select_hidden_states(tables, cfg["projection.alphas"], stage1, graph, split, ids)
        model.save(d / "projection.gems")
        doc = {"hidden_states": tag, "alpha": alpha, "val_accuracy": acc, "residual": model.residual}
        write_json(d / "projection.json", doc)
        out[seed] = doc
    return out


def _write_predictions(path: Path, graph, ids, targets, pred, probs) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["individual_id", "question_id", "choice_id", "predicted_choice_id", "probabilities"])
        for e, p, pr in zip(targets, pred, probs):
            u, c = graph.responses[e]
            qid, cid = ids.choice_ids[c]
            w.writerow([ids.individual_ids[u], qid, cid, ids.choice_ids[p][1],
                        json.dumps([round(float(x), 6) for x in pr])])


def cmd_eval(cfg: RunConfig) -> dict:
    graph, ids = _load_graph(cfg)
    per_seed = []
    for seed in cfg["seeds"]:
        d = _seed_dir(cfg, seed)
        split = Split.load(_need(d / "split.json", "split (run `gems train` first)"))
        params = load_params(_need(d / "model.gems", "model checkpoint"))
        projection = features = None
        if cfg.setting is Setting.NEW_QUESTIONS:
            projection = ProjectionModel.load(_need(d / "projection.gems", "projection (run `gems project`)"))
            tables = _hidden_tables(cfg)
            table = tables.get(projection.layer_tag) or next(iter(tables.values()))
            features = table.feature_matrix(ids)
        targets = split.test_target_edges
        pred, emb, z_c = predict_targets(params, graph, split.observed_response_edges, targets, projection,
                                         features)
        acc = float(np.mean(pred == graph.responses[targets, 1]))
        probs = question_probabilities(np.asarray(emb.U, dtype=np.float64), z_c, graph.responses[targets, 0],
                                       graph.edge_question[targets], graph.catalog, params.tau)
        doc = metrics_report(cfg.setting.value, cfg["architecture"], seed, acc,
                             random_baseline(targets, graph), targets.size)
        write_json(d / "metrics.json", doc)
        _write_predictions(d / "predictions.csv", graph, ids, targets, pred, probs)
        per_seed.append(doc)
    accs = [m["accuracy"] for m in per_seed]
    mean, std = mean_std(accs)
    summary = {"setting": cfg.setting.value, "architecture": cfg["architecture"], "seeds": cfg["seeds"],
               "accuracy_mean": mean, "accuracy_std": std, "accuracy": format_mean_std(accs),
               "random_baseline": per_seed[0]["random_baseline"], "per_seed": per_seed}
    write_json(cfg.out / "metrics.json", summary)
    return summary


def cmd_export(cfg: RunConfig) -> dict:
    graph, ids = _load_graph(cfg)
    out = {}
    for seed in cfg["seeds"]:
        d = _seed_dir(cfg, seed)
        split = Split.load(_need(d / "split.json", "split"))
        params = load_params(_need(d / "model.gems", "model checkpoint"))
        emb = forward(params, graph, split.observed_response_edges)
        checkpoint.save(d / "embeddings.gems", {"kind": "embeddings", "individuals": list(ids.individual_ids),
                                                "subgroups": list(ids.subgroup_ids),
                                                "choices": ["::".join(c) for c in ids.choice_ids]},
                        {"U": emb.U, "S": emb.S, "C": emb.C})
        groups: dict[int, list[str]] = {}
        for u, s in graph.membership:
            groups.setdefault(int(u), []).append(ids.subgroup_ids[s])
        labels = ["|".join(sorted(groups.get(u, []))) for u in range(graph.n_individuals)]
        k = int(cfg["export.pca_components"])
        result = pca_export(np.asarray(emb.U, dtype=np.float64), k, labels, d / "pca.csv", list(ids.individual_ids))
        out[seed] = {"explained_variance_ratio": result.explained_variance_ratio.tolist()}
    return out


def cmd_convert(csv_path: str, out_path: str, model: str = "", layer: str = "") -> dict:
    table = convert_csv(csv_path, out_path, model, layer)
    return {"d_llm": table.d_llm, "n": len(table.entries)}


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gems", description="Graph-based prediction of individual survey responses.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("build", "train", "eval", "project", "export-embeddings"):
        sp = sub.add_parser(name)
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int, action="append", help="repeatable; replaces the configured seeds")
        sp.add_argument("--setting", choices=SETTINGS)
        sp.add_argument("--arch", choices=ARCHITECTURES)
        sp.add_argument("--out")
        if name == "train":
            sp.add_argument("--resume", action="store_true", help="continue from seed-*/train_state.gems")
    conv = sub.add_parser("convert-hidden-states", help="CSV of choice_id,v1..vd to the hidden-state format")
    conv.add_argument("csv")
    conv.add_argument("output")
    conv.add_argument("--model", default="")
    conv.add_argument("--layer", default="")
    return p


def _thread_limit():
    n = os.environ.get("GEMS_THREADS")
    if not n:
        return nullcontext()
    try:
        limit = int(n)
    except ValueError:
        raise ValidationError(f"GEMS_THREADS must be an integer, got {n!r}") from None
    if limit < 1:
        raise ValidationError("GEMS_THREADS must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def run(argv=None) -> dict:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    with _thread_limit():
        if args.command == "convert-hidden-states":
            return cmd_convert(args.csv, args.output, args.model, args.layer)
        cfg = RunConfig.resolve(args.config, {"seeds": args.seed, "setting": args.setting,
                                              "architecture": args.arch, "out": args.out})
        cfg.out.mkdir(parents=True, exist_ok=True)
        cfg.write_resolved(cfg.out / "resolved_config.json")
        if args.command == "build":
            return cmd_build(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "project":
            return cmd_project(cfg)
        return cmd_export(cfg)


def main(argv=None) -> int:
    try:
        result = run(argv)
    except ValidationError as exc:
        print(f"gems: error: {exc}", file=sys.stderr)
        return 2
    except GemsError as exc:
        print(f"gems: failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"gems: failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, indent=2, ensure_ascii=False, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
