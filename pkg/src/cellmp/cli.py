"""Command-line entry point: lift, invariants, simulate, train, eval, check.

One JSON config document drives every command; any key can be overridden on
the command line with repeatable --set dotted.key=value flags. Outputs embed
the fully resolved config and the package version so runs can be audited.
Exit codes: 0 success (all checks passed), 1 check failure, 2 usage or IO
errors.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cells import build_complex
from .checks import CheckSettings, check_hull_oracle, run_standard_checks
from .datagen import (
    GeometricGraph,
    SchemaError,
    canonical_json,
    load_graph,
    make_nbody_dataset,
    save_graph,
)
from .invariants import compute_invariants
from .lifting import LiftConfig, apply_lift, decouple
from .model import Batch, CellNetwork, ModelConfig, Sample, TrainConfig, train
from .autodiff import Params

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "paths": {"input": None, "output": None, "dataset": None, "checkpoint": None},
    "lift": {},
    "model": {},
    "train": {},
    "data": {"n_train": 50, "n_val": 10, "n_test": 10, "n_particles": 5, "steps": 1000, "dt": 1e-3},
    "check": {"include_hull_oracle": False, "hull_clouds": 20, "hull_samples": 1_000_000},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ValueError(f"--set expects dotted.key=value, got {assignment!r}")
    dotted, _, raw = assignment.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"--set path {dotted!r} crosses a non-object value")
    node[parts[-1]] = value


def resolve_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
        config = _deep_merge(config, doc)
    for assignment in args.set or []:
        _apply_set(config, assignment)
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def _out_dir(args) -> Path:
    out = Path(args.out or "cellmp-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(canonical_json(doc))


def _model_bits(config: dict):
    model_cfg = ModelConfig.from_dict(config["model"]) if config["model"] else ModelConfig()
    lift_cfg = LiftConfig.from_dict(config["lift"]) if config["lift"] else LiftConfig()
    train_cfg = TrainConfig.from_dict(config["train"]) if config["train"] else TrainConfig()
    return model_cfg, lift_cfg, train_cfg


def _prepare_sample(graph: GeometricGraph, model_cfg: ModelConfig, lift_cfg: LiftConfig) -> Sample:
    if model_cfg.decoupled:
        dense, lifted = decouple(graph, lift_cfg)
        return Sample(graph=graph, complex=lifted, dense_edges=dense.edges)
    lifted_graph, cycles = apply_lift(graph, lift_cfg)
    lifted_graph.target = graph.target
    return Sample(graph=lifted_graph, complex=build_complex(lifted_graph, cycles))


def _feature_dim(samples: list[Sample]) -> int:
    f = samples[0].graph.node_features
    return f.shape[1] if f is not None else 1


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_lift(args) -> int:
    config = resolve_config(args)
    _, lift_cfg, _ = _model_bits(config)
    path = config["paths"]["input"]
    if not path:
        raise ValueError("lift needs paths.input pointing at a graph file")
    graph = load_graph(path)
    lifted, cycles = apply_lift(graph, lift_cfg)
    lifted.two_cells = [list(c) for c in cycles]
    out = _out_dir(args)
    target = Path(config["paths"]["output"] or out / "lifted.json")
    save_graph(lifted, target)
    cx = build_complex(lifted, cycles)
    counts = cx.counts() + (0,) * (3 - len(cx.counts()))
    print(f"cells per rank: {counts[0]} nodes, {counts[1]} edges, {counts[2]} rings -> {target}")
    return 0


_TABLE_KINDS = ("boundary", "coboundary", "lower", "upper", "point")


def cmd_invariants(args) -> int:
    config = resolve_config(args)
    model_cfg, _, _ = _model_bits(config)
    inv_cfg = model_cfg.invariants
    path = config["paths"]["input"]
    if not path:
        raise ValueError("invariants needs paths.input pointing at a lifted graph file")
    graph = load_graph(path)
    cx = build_complex(graph, graph.two_cells or [])
    rows = []
    for kind in _TABLE_KINDS:
        for rank in range(3):
            for cell in cx.cells(rank):
                if kind == "boundary":
                    senders = [(tau, None) for tau in cx.boundaries(cell.id)]
                elif kind == "coboundary":
                    senders = [(tau, None) for tau in cx.coboundaries(cell.id)]
                elif kind == "lower":
                    senders = [(tau, w) for tau, w in cx.lower_adjacent(cell.id)]
                elif kind == "upper":
                    senders = [(tau, w) for tau, w in cx.upper_adjacent(cell.id)]
                else:
                    if rank != 0:
                        continue
                    senders = [
                        (ring.id, None)
                        for ring in cx.cells(2)
                        if cell.id in cx.point_adjacency(ring.id)
                    ]
                for tau, _w in senders:
                    vec = compute_invariants(kind, cell.id, tau, cx, graph.positions, inv_cfg)
                    rows.append(
                        (
                            kind,
                            tau.rank,
                            tau.index,
                            cell.id.rank,
                            cell.id.index,
                            ";".join(vec.schema),
                            ";".join(format(v, ".17g") for v in vec.values),
                        )
                    )
    out = _out_dir(args)
    target = Path(config["paths"]["output"] or out / "invariants.csv")
    header = "kind,sender_rank,sender_index,receiver_rank,receiver_index,schema,values"
    lines = [header] + [",".join(str(x) for x in row) for row in rows]
    target.write_text("\n".join(lines) + "\n")
    print(f"{len(rows)} rows -> {target}")
    return 0


def cmd_simulate(args) -> int:
    config = resolve_config(args)
    data = config["data"]
    out = _out_dir(args)
    root = Path(config["paths"]["output"] or out / "dataset")
    root.mkdir(parents=True, exist_ok=True)
    splits = make_nbody_dataset(
        data["n_train"],
        data["n_val"],
        data["n_test"],
        seed=config["seed"],
        n_particles=data["n_particles"],
        steps=data["steps"],
        dt=data["dt"],
    )
    manifest: dict = {"schema_version": 1, "seed": config["seed"], "data": data, "splits": {}}
    for name, trajectories in zip(("train", "val", "test"), splits):
        split_dir = root / name
        split_dir.mkdir(exist_ok=True)
        files = []
        for i, tr in enumerate(trajectories):
            rel = f"{name}/sample_{i:05d}.json"
            save_graph(tr.initial, root / rel)
            files.append(rel)
        manifest["splits"][name] = files
    _write_json(root / "manifest.json", manifest)
    print(
        f"dataset: {data['n_train']} train / {data['n_val']} val / {data['n_test']} test -> {root}"
    )
    return 0


def _load_split(root: Path, manifest: dict, split: str, model_cfg, lift_cfg) -> list[Sample]:
    return [
        _prepare_sample(load_graph(root / rel), model_cfg, lift_cfg)
        for rel in manifest["splits"][split]
    ]


def cmd_train(args) -> int:
    config = resolve_config(args)
    model_cfg, lift_cfg, train_cfg = _model_bits(config)
    dataset = config["paths"]["dataset"]
    if not dataset:
        raise ValueError("train needs paths.dataset pointing at a simulated dataset directory")
    root = Path(dataset)
    manifest = json.loads((root / "manifest.json").read_text())
    train_samples = _load_split(root, manifest, "train", model_cfg, lift_cfg)
    val_samples = _load_split(root, manifest, "val", model_cfg, lift_cfg)
    model = CellNetwork(model_cfg, _feature_dim(train_samples), train_samples[0].graph.dim)
    if model_cfg.decoupled:
        node_p, ring_p = model.parameter_split()
        print(
            f"decoupled widths: node {model.widths[0]}, ring {model.widths[2]}"
            f" ({node_p}/{ring_p} parameters, ring share {ring_p / (node_p + ring_p):.1%})"
        )
    train_cfg.seed = config["seed"]
    result = train(model, train_samples, train_cfg, val_samples=val_samples)
    out = _out_dir(args)
    curve = ["epoch,train_loss,val_metric"]
    for e, tl in enumerate(result.loss_history):
        vm = result.val_history[e] if e < len(result.val_history) else ""
        curve.append(f"{e},{format(tl, '.17g')},{format(vm, '.17g') if vm != '' else ''}")
    (out / "curve.csv").write_text("\n".join(curve) + "\n")
    metric_name = train_cfg.loss
    final = result.val_history[-1] if result.val_history else result.loss_history[-1]
    _write_json(
        out / "metrics.json",
        {"version": __version__, metric_name: final, "config": config},
    )
    checkpoint = result.params.to_dict()
    checkpoint["model_config"] = model.config.to_dict()
    checkpoint["train_config"] = train_cfg.to_dict()
    checkpoint["target_shift"] = result.target_shift
    checkpoint["target_scale"] = result.target_scale
    _write_json(out / "checkpoint.json", checkpoint)
    print(f"final {metric_name}: {final:.6g} -> {out}")
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args)
    _, lift_cfg, train_cfg = _model_bits(config)
    ckpt_path = config["paths"]["checkpoint"]
    dataset = config["paths"]["dataset"]
    if not ckpt_path or not dataset:
        raise ValueError("eval needs paths.checkpoint and paths.dataset")
    doc = json.loads(Path(ckpt_path).read_text())
    params = Params.from_dict(doc)
    model_cfg = ModelConfig.from_dict(doc["model_config"])
    root = Path(dataset)
    manifest = json.loads((root / "manifest.json").read_text())
    split = config.get("eval_split", "test")
    samples = _load_split(root, manifest, split, model_cfg, lift_cfg)
    model = CellNetwork(model_cfg, _feature_dim(samples), samples[0].graph.dim)
    metric_name = train_cfg.loss
    total, count = 0.0, 0
    for k in range(0, len(samples), 100):
        batch = Batch.from_samples(samples[k : k + 100])
        loss, _ = model.loss(
            params,
            batch,
            loss_kind=metric_name,
            target_shift=doc.get("target_shift", 0.0),
            target_scale=doc.get("target_scale", 1.0),
        )
        total += float(loss.value) * batch.num_graphs
        count += batch.num_graphs
    metric = total / count
    out = _out_dir(args)
    _write_json(
        out / "eval.json",
        {"version": __version__, metric_name: metric, "split": split, "config": config},
    )
    print(f"{split} {metric_name}: {metric:.6g}")
    return 0


def cmd_check(args) -> int:
    config = resolve_config(args)
    check_cfg = dict(config["check"])
    include_hull = check_cfg.pop("include_hull_oracle", False)
    hull_clouds = check_cfg.pop("hull_clouds", 20)
    hull_samples = check_cfg.pop("hull_samples", 1_000_000)
    settings = CheckSettings(seed=config["seed"], **check_cfg)
    reports = run_standard_checks(settings)
    if include_hull:
        reports.append(
            check_hull_oracle(n_clouds=hull_clouds, n_samples=hull_samples, seed=config["seed"])
        )
    for rep in reports:
        print(rep.line())
    out = _out_dir(args)
    _write_json(
        out / "check_report.json",
        {
            "version": __version__,
            "config": config,
            "settings": settings.to_dict(),
            "reports": [r.to_dict() for r in reports],
        },
    )
    return 0 if all(r.passed for r in reports) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellmp",
        description="Cellular message passing: lifting, invariants, training, verification.",
    )
    parser.add_argument("--version", action="version", version=f"cellmp {__version__}")
    sub = parser.add_subparsers(dest="task", required=True)
    for name, fn in (
        ("lift", cmd_lift),
        ("invariants", cmd_invariants),
        ("simulate", cmd_simulate),
        ("train", cmd_train),
        ("eval", cmd_eval),
        ("check", cmd_check),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument(
            "--set",
            action="append",
            metavar="dotted.key=value",
            help="override a config value (repeatable)",
        )
        p.add_argument("--out", help="output directory (default cellmp-out)")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError, TypeError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
