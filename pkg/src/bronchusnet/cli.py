"""Command-line front end: ``bronchusnet <command> ...``.

Exit status is 0 on success, 1 for usage errors and 2 when an input file is
missing or malformed. Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pvgnn
from .ahr import demo_report, optimize_logits_demo
from .brongraph import DEFAULT_K, BronchialGraph, GraphFormatError, augment, build_graph
from .metrics import classification_metrics
from .pipeline import GRAPH_MIN_SEGMENT, case_graph, label_segments
from .skeleton import SegmentSet, extract_segments, skeletonize
from .synthgen import SynthParams, case_seeds, generate_case, load_case, save_case, split_indices
from .volgrid import VolumeFormatError, load_volume, main_trachea, otsu_threshold

log = logging.getLogger("bronchusnet")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n")


def _load_graph(path) -> BronchialGraph:
    try:
        return BronchialGraph.load(path)
    except GraphFormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_graphs(data: Path, split: str, K: int = DEFAULT_K) -> list[BronchialGraph]:
    """Graphs from a ``synth`` output directory or from a directory of graph JSON files."""
    if not data.is_dir():
        raise DataError(f"{data}: not a directory")
    manifest = data / "split.json"
    if manifest.exists():
        info = json.loads(manifest.read_text())
        names = info["train"] + info["test"] if split == "all" else info[split]
        return [case_graph(load_case(data / name), K=K) for name in names]
    files = sorted(data.glob("*.json"))
    if not files:
        raise DataError(f"{data}: no graph files and no split.json")
    return [_load_graph(f) for f in files]


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    params = SynthParams(depth=args.depth)
    out = Path(args.out)
    names = [f"case_{i:04d}" for i in range(args.n)]
    for name, seed in zip(names, case_seeds(args.n, args.seed)):
        save_case(generate_case(seed, params), out / name)
        log.info("wrote %s", out / name)
    train, test = split_indices(args.n, args.seed, args.train_fraction)
    _write_json(out / "split.json", {
        "seed": args.seed,
        "train": [names[i] for i in train],
        "test": [names[i] for i in test],
    })


def cmd_segdemo(args) -> None:
    case = load_case(args.case)
    _, air = otsu_threshold(case.ct)
    trachea = main_trachea(air)
    trajectory, prob = optimize_logits_demo(case.gt_mask, trachea, args.levels, args.steps, args.lr, args.optimizer)
    report = demo_report(case.gt_mask, trachea, prob, args.levels)
    _write_json(args.out, {
        "levels": args.levels,
        "steps": args.steps,
        "lr": args.lr,
        "optimizer": args.optimizer,
        "dice_trajectory": trajectory,
        "final_dice": trajectory[-1],
        "loss": report.to_dict(),
    })


def cmd_skeletonize(args) -> None:
    mask = load_volume(args.mask)
    if mask.ndim != 3:
        raise DataError(f"{args.mask}: expected a 3D mask")
    segments = extract_segments(skeletonize(mask), min_length=args.min_length)
    _write_json(args.out, segments.to_dict())


def cmd_build_graph(args) -> None:
    case = load_case(args.case)
    if args.segments:
        segments = SegmentSet.from_dict(json.loads(Path(args.segments).read_text()))
        graph = build_graph(segments, case.descriptor_feats, label_segments(segments, case.branches), K=args.k)
        graph.meta["seed"] = case.seed
    else:
        graph = case_graph(case, K=args.k)
    graph.save(args.out)


def cmd_augment(args) -> None:
    graph = _load_graph(args.graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graph.save(out / "graph_000.json")
    for i in range(1, args.n + 1):
        augment(graph, [args.seed, i]).save(out / f"graph_{i:03d}.json")


def cmd_train(args) -> None:
    config = pvgnn.TrainConfig()
    if args.config:
        config = pvgnn.TrainConfig.from_text(Path(args.config).read_text())
    graphs = _load_graphs(Path(args.data), "train")
    if any(g.labels is None for g in graphs):
        raise DataError(f"{args.data}: training graphs must carry labels")
    params, history = pvgnn.train(graphs, config)
    pvgnn.save_params(args.out, params, config.features)
    if args.history:
        pvgnn.write_history(args.history, history)
    log.info("trained on %d graphs, final loss %.6g", len(graphs), history[-1]["train_loss"] if history else float("nan"))


def _load_model(path):
    try:
        return pvgnn.load_params(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_eval(args) -> None:
    params, header = _load_model(args.model)
    graphs = _load_graphs(Path(args.data), args.split)
    if any(g.labels is None for g in graphs):
        raise DataError(f"{args.data}: evaluation graphs must carry labels")
    batch = pvgnn.collate(graphs, header["features"])
    pred = np.argmax(pvgnn.forward(batch, params), axis=1)
    report = classification_metrics(pred, batch.labels, header["n_classes"])
    _write_json(args.out, {**report.to_dict(), "n_nodes": int(batch.n_nodes), "n_graphs": len(graphs)})


def cmd_infer(args) -> None:
    params, header = _load_model(args.model)
    graph = _load_graph(args.graph)
    labels, logits = pvgnn.predict(graph, params, header["features"])
    _write_json(args.out, {"labels": labels.tolist(), "logits": logits.tolist()})


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bronchusnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic cases and a train/test split")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segdemo", help="fit free logits under the hard-region loss")
    p.add_argument("--case", required=True)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segdemo)

    p = sub.add_parser("skeletonize", help="thin a mask and split it into segments")
    p.add_argument("--mask", required=True)
    p.add_argument("--min-length", type=int, default=GRAPH_MIN_SEGMENT)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_skeletonize)

    p = sub.add_parser("build-graph", help="labelled segment graph of a synthetic case")
    p.add_argument("--case", required=True)
    p.add_argument("--segments", help="segment JSON from 'skeletonize' (default: thin the case mask)")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("augment", help="write the graph and N augmented copies")
    p.add_argument("--graph", required=True)
    p.add_argument("--n", type=int, default=99)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train the graph network")
    p.add_argument("--data", required=True, help="synth output (uses its train split) or a directory of graph JSON")
    p.add_argument("--config", help="key = value file with TrainConfig fields")
    p.add_argument("--history", help="write per-epoch history as JSON lines")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="classification metrics of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="synth output (uses its test split) or a directory of graph JSON")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="per-node classes and logits for one graph")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (DataError, GraphFormatError, VolumeFormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KeyError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0
