"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import torch

from .datasets import DatasetError, load_graph_json, neighborsmatch_dataset, save_graph_json
from .laplacian import build_in_transpose, build_out, normalize, set_deterministic
from .model import ModelConfig, forward
from .sheaf import DirectedSheaf
from .training import Schedule, history_jsonl, load_checkpoint, save_checkpoint, train

log = logging.getLogger("coopsheaf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

# NeighborsMatch defaults shared by every depth of the sweep
SWEEP_MODEL = {"stalk_dim": 2, "hidden_channels": 32, "activation": "identity", "dropout": 0.0,
               "input_dropout": 0.0, "layer_norm": True}
SWEEP_EXAMPLES = {2: 96, 3: 400, 4: 400, 5: 400, 6: 400}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def split_config(data: dict) -> tuple[ModelConfig, Schedule]:
    """Separate a flat config dict into model and schedule parts; unknown keys are errors."""
    model_keys = {f.name for f in fields(ModelConfig)}
    sched_keys = {f.name for f in fields(Schedule)}
    unknown = set(data) - model_keys - sched_keys
    if unknown:
        raise DatasetError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = ModelConfig(**{k: v for k, v in data.items() if k in model_keys})
        sched = Schedule(**{k: v for k, v in data.items() if k in sched_keys})
        sched.validate()
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"invalid config: {exc}") from exc
    return cfg, sched


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    from .plotting import plot_history

    data = _read_json(args.config) if args.config else {}
    for key in ("seed", "split", "epochs", "lr"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    cfg, sched = split_config(data)
    ds = load_graph_json(args.data)
    if not 0 <= sched.split < len(ds.splits):
        raise DatasetError(f"{args.data}: split {sched.split} does not exist ({len(ds.splits)} splits)")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {**cfg.to_dict(), **asdict(sched)})
    result = train(cfg, ds, sched, deterministic=True)
    (out / "metrics.jsonl").write_text(history_jsonl(result.history), encoding="utf-8")
    save_checkpoint(out / "checkpoint.json", cfg, result.best,
                    {"best_epoch": result.best_epoch, "seed": sched.seed, "split": sched.split,
                     "data": str(args.data)})
    _write_json(out / "summary.json", result.summary)
    plot_history(result.history, out / "history.png", title=Path(args.data).name)
    print(json.dumps(result.summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- dataset

def cmd_gen_neighborsmatch(args) -> int:
    if args.depth < 1:
        raise UsageError("--depth must be >= 1")
    n = args.num_examples or SWEEP_EXAMPLES.get(args.depth, 400)
    ds = neighborsmatch_dataset(args.depth, n, seed=args.seed, train_fraction=args.train_fraction)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_graph_json(ds, args.out)
    print(f"wrote {len(ds.meta['trees'])} trees, {ds.num_nodes} nodes to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- laplacian

def _checkpoint_sheaf(path, ds, layer: int) -> DirectedSheaf:
    try:
        cfg, params, _ = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DatasetError(f"{path}: cannot load checkpoint: {exc}") from exc
    if cfg.model != "csnn":
        raise DatasetError(f"{path}: checkpoint holds a {cfg.model} model, which has no sheaf")
    if not 0 <= layer < cfg.num_layers:
        raise UsageError(f"--layer must lie in [0, {cfg.num_layers})")
    trace = []
    with torch.no_grad():
        forward(cfg, params, ds.graph, ds.features, trace=trace)
    return trace[layer]


def cmd_laplacian_dump(args) -> int:
    ds = load_graph_json(args.data)
    if args.sheaf == "trivial":
        sheaf = DirectedSheaf.constant(ds.num_nodes, args.stalk_dim)
    else:
        sheaf = _checkpoint_sheaf(args.sheaf, ds, args.layer)
    out_op, in_op = build_out(sheaf, ds.graph), build_in_transpose(sheaf, ds.graph)
    if args.normalized:
        out_op, in_op = normalize(out_op, "out"), normalize(in_op, "in")
    if args.which == "out":
        dense = out_op.to_dense()
    elif args.which == "in_t":
        dense = in_op.to_dense()
    else:
        dense = in_op.to_dense() @ out_op.to_dense()
    payload = {
        "which": args.which,
        "normalized": args.normalized,
        "num_nodes": ds.num_nodes,
        "stalk_dim": sheaf.dimension,
        "shape": list(dense.shape),
        "matrix": dense.tolist(),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    return EXIT_OK


# ---------------------------------------------------------------- verify

def cmd_verify(args) -> int:
    from .verify import run_all

    set_deterministic(True)
    report = run_all(seed=args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


# ---------------------------------------------------------------- sweep

def parse_depths(text: str) -> list[int]:
    """``"2..6"`` or ``"3,4"`` (or a mix) to a sorted list of depths."""
    depths = set()
    for part in text.split(","):
        part = part.strip()
        try:
            if ".." in part:
                lo, hi = (int(v) for v in part.split(".."))
                depths.update(range(lo, hi + 1))
            else:
                depths.add(int(part))
        except ValueError:
            raise UsageError(f"bad depth list {text!r}") from None
    if not depths or min(depths) < 1:
        raise UsageError(f"bad depth list {text!r}")
    return sorted(depths)


def sweep_config(model: str, depth: int) -> ModelConfig:
    # the map predictor aggregates as deep as the tree so each node sees its whole subtree
    return ModelConfig(model=model, num_layers=depth + 1, map_predictor=f"meanagg-{depth + 1}", **SWEEP_MODEL)


def run_sweep(depths, models, out: Path, *, epochs: int, lr: float, seed: int,
              num_examples: int | None = None, stop_at: float | None = 1.0) -> list[dict]:
    from .plotting import plot_depth_sweep

    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for depth in depths:
        ds = neighborsmatch_dataset(depth, num_examples or SWEEP_EXAMPLES.get(depth, 400), seed=seed)
        for model in models:
            cfg = sweep_config(model, depth)
            sched = Schedule(epochs=epochs, lr=lr, seed=seed, eval_every=10, stop_at_train_metric=stop_at)
            start = time.process_time()
            result = train(cfg, ds, sched, deterministic=True)
            seconds = time.process_time() - start
            (out / f"history_{model}_r{depth}.jsonl").write_text(history_jsonl(result.history), encoding="utf-8")
            row = {
                "model": model,
                "depth": depth,
                "num_trees": len(ds.meta["trees"]),
                "train_accuracy": result.summary["best_train_metric"],
                "epochs_run": result.summary["final_epoch"],
                "cpu_seconds": round(seconds, 1),
            }
            log.info("%s", row)
            rows.append(row)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    plot_depth_sweep(rows, out / "sweep.png")
    return rows


def cmd_sweep(args) -> int:
    depths = parse_depths(args.depths)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    bad = [m for m in models if m not in ("csnn", "gcn")]
    if bad or not models:
        raise UsageError(f"--models must list csnn and/or gcn, got {args.models!r}")
    rows = run_sweep(depths, models, Path(args.out), epochs=args.epochs, lr=args.lr, seed=args.seed,
                     num_examples=args.num_examples, stop_at=args.stop_at)
    for row in rows:
        print(",".join(str(v) for v in row.values()))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coopsheaf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a graph file")
    p.add_argument("--config", help="JSON file with model and schedule fields")
    p.add_argument("--data", required=True)
    p.add_argument("--split", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dataset", help="synthetic dataset generators")
    dsub = p.add_subparsers(dest="generator", required=True, parser_class=_Parser)
    g = dsub.add_parser("gen-neighborsmatch", help="binary-tree key/value lookup task")
    g.add_argument("--depth", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--num-examples", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-fraction", type=float, default=1.0)
    g.set_defaults(func=cmd_gen_neighborsmatch)

    p = sub.add_parser("laplacian", help="Laplacian utilities")
    lsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    d = lsub.add_parser("dump", help="write a dense Laplacian as JSON")
    d.add_argument("--data", required=True)
    d.add_argument("--sheaf", required=True, help="'trivial' or a checkpoint path")
    d.add_argument("--which", choices=("out", "in_t", "composed"), required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--layer", type=int, default=0, help="layer whose sheaf is read from the checkpoint")
    d.add_argument("--stalk-dim", type=int, default=1, help="stalk dimension of the trivial sheaf")
    d.add_argument("--normalized", action="store_true")
    d.set_defaults(func=cmd_laplacian_dump)

    p = sub.add_parser("verify", help="executable property checks")
    vsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    v = vsub.add_parser("props", help="listen/broadcast gating, receptive field, relay")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    p = sub.add_parser("neighborsmatch-sweep", help="train accuracy against tree depth")
    p.add_argument("--depths", default="2..6")
    p.add_argument("--models", default="csnn,gcn")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-examples", type=int)
    p.add_argument("--stop-at", type=float, default=1.0, help="stop once train accuracy reaches this")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
