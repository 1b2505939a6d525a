"""Command-line entry point: ``hgnn-cna {prepare,train,eval,scores,gradcheck}``.

Exit codes: 0 success, 2 input error, 3 numerical failure.

Options can also come from a flat ``key=value`` file given with ``--config``;
keys are the long option names with dashes or underscores, and flags given on
the command line override the file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cna import cna_forward
from .graph_data import (
    DynamicGraph,
    EdgeListError,
    balanced_samples,
    build_snapshots,
    init_features,
    load_cache,
    normalize_adjacency,
    read_edge_list,
    save_cache,
    split_temporal,
)
from .model import ModelParams, load_checkpoint, save_checkpoint
from .tensor_core import TRANSFORM_KINDS, ShapeError, Transform
from .train import TrainConfig, TrainingDiverged, grad_check, held_out_report, sweep, train_loop

log = logging.getLogger("hgnn_cna")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

# options that shape a training run; they feed the run-directory hash
RUN_KEYS = (
    "data", "features", "hidden", "layers", "K", "transform", "lr", "alpha", "r_c", "r_a",
    "activation", "lag", "max_iters", "patience", "no_cna", "strict_paper", "sweep",
)


class InputError(Exception):
    """Bad arguments or unreadable input; maps to exit code 2."""


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _truthy(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise InputError(f"not a boolean: {s!r}")


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in values.items():
        act = actions.get(key)
        if act is None or key in ("config", "help"):
            raise InputError(f"unknown config key {key!r}")
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = _truthy(raw)
        else:
            defaults[key] = act.type(raw) if act.type else raw
    parser.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# helpers


def _load_graph(path: str) -> DynamicGraph:
    try:
        g = load_cache(path)
    except FileNotFoundError:
        raise InputError(f"cache not found: {path}")
    except ValueError as exc:
        raise InputError(str(exc))
    ids_file = Path(str(path) + ".ids")
    if ids_file.exists():
        g.node_ids = ids_file.read_text().split()
    return g


def _run_settings(args) -> dict:
    return {k: getattr(args, k) for k in RUN_KEYS if hasattr(args, k)}


def run_dir_name(settings: dict, seed: int) -> str:
    blob = json.dumps(settings, sort_keys=True, separators=(",", ":")).encode()
    return f"{hashlib.sha256(blob).hexdigest()[:12]}-seed{seed}"


def _make_params(args, g: DynamicGraph) -> ModelParams:
    return ModelParams.init(
        g.n_slots,
        g.n_features,
        hidden=args.hidden,
        n_layers=args.layers,
        K=args.K,
        r_c=0.0 if args.no_cna else args.r_c,
        r_a=args.r_a,
        alpha=args.alpha,
        bias=not args.strict_paper,
        learn_beta=not args.no_cna,
        activation=args.activation,
        lag=args.lag,
        transform=args.transform,
        seed=args.seed,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(args) -> int:
    try:
        parsed = read_edge_list(args.edges, strict=args.strict)
    except FileNotFoundError:
        raise InputError(f"cannot read {args.edges}")
    except EdgeListError as exc:
        raise InputError(str(exc))
    if not parsed.edges:
        raise InputError("no edges parsed")
    g = build_snapshots(
        parsed.edges, args.slots, binarize=not args.weighted, node_cap=args.node_cap, node_ids=parsed.node_ids
    )
    g = g.with_features(init_features(g, args.features, args.feature_scheme, seed=args.seed))
    save_cache(args.out, g)
    Path(str(args.out) + ".ids").write_text("\n".join(str(i) for i in g.node_ids) + "\n")
    counts = g.edge_counts()
    print(f"N={g.n_nodes} T={g.n_slots} F={g.n_features}")
    print(f"edges per slot: min={min(counts)} max={max(counts)} total={sum(counts)}")
    print(" ".join(str(c) for c in counts))
    return EXIT_OK


def cmd_train(args) -> int:
    g = _load_graph(args.data)
    split = split_temporal(g.n_slots)
    tf = Transform.make(args.transform, g.n_slots)
    cfg = TrainConfig(lr=args.lr, alpha=args.alpha, max_iters=args.max_iters, patience=args.patience, seed=args.seed)
    settings = _run_settings(args)
    run = Path(args.out_dir) / run_dir_name(settings, args.seed)
    run.mkdir(parents=True, exist_ok=True)

    if args.sweep:
        cfg, res, table = sweep(g, split, lambda: _make_params(args, g), cfg, tf)
        with open(run / "sweep.tsv", "w") as fh:
            fh.write("lr\talpha\tval_f1\n")
            fh.writelines(f"{lr}\t{a}\t{f:.6f}\n" for lr, a, f in table)
    else:
        with open(run / "metrics.jsonl", "w") as fh:
            res = train_loop(g, split, _make_params(args, g), cfg, tf, log=fh)
    if args.sweep:
        with open(run / "metrics.jsonl", "w") as fh:
            fh.writelines(json.dumps(r) + "\n" for r in res.records)

    test = held_out_report(g, split, res.params, cfg, tf)
    test.loss_history = res.report.loss_history
    test.best_iter = res.report.best_iter
    extra = {"transform": args.transform, "seed": args.seed, "lr": cfg.lr, "alpha": cfg.alpha}
    save_checkpoint(run / "model.hcna", res.params, extra)
    (run / "report.txt").write_text(test.to_text())
    (run / "config.json").write_text(json.dumps(settings, sort_keys=True, indent=1) + "\n")
    print(f"run directory: {run}")
    print(test.to_text(), end="")
    return EXIT_OK


def _load_model(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise InputError(f"checkpoint not found: {path}")
    except (ValueError, KeyError) as exc:
        raise InputError(f"bad checkpoint {path}: {exc}")


def cmd_eval(args) -> int:
    g = _load_graph(args.data)
    p, run = _load_model(args.checkpoint)
    if p.n_slots != g.n_slots or p.weights[0].shape[1] != g.n_features:
        raise InputError("checkpoint does not match the cache dimensions")
    kind = args.transform or run.get("transform", "identity")
    seed = run.get("seed", 0) if args.seed is None else args.seed
    cfg = TrainConfig(seed=seed)
    rep = held_out_report(g, split_temporal(g.n_slots), p, cfg, Transform.make(kind, g.n_slots))
    print(rep.to_text(), end="")
    return EXIT_OK


def _write_matrix(path: Path, m: np.ndarray, ids: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + [str(i) for i in ids])
        for node, row in zip(ids, m):
            w.writerow([str(node)] + [repr(float(v)) for v in row])


def cmd_scores(args) -> int:
    g = _load_graph(args.data)
    p, _ = _load_model(args.checkpoint)
    if not 0 <= args.slot < g.n_slots:
        raise InputError(f"slot {args.slot} out of range [0, {g.n_slots})")
    a = g.adjacency[args.slot:args.slot + 1]
    tr = cna_forward(a, normalize_adjacency(a), p.cna)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = g.node_ids if g.node_ids is not None else list(range(g.n_nodes))
    for name, m in (("c_hat", tr.C_hat), ("c", tr.C), ("o", tr.O)):
        _write_matrix(out / f"{name}_slot{args.slot}.csv", m[0], ids)
    print(f"wrote c_hat, c, o for slot {args.slot} to {out}")
    return EXIT_OK


def toy_instance(seed: int = 0, n: int = 6, t: int = 3, f: int = 4):
    """Small random graph, model and sample set for the gradient check."""
    rng = np.random.default_rng(seed)
    upper = np.triu((rng.random((t, n, n)) < 0.4).astype(float), 1)
    g = DynamicGraph(upper + upper.transpose(0, 2, 1))
    g = g.with_features(init_features(g, f, seed=seed + 1))
    samples = balanced_samples(g, range(1, t), seed)
    return g, samples


def cmd_gradcheck(args) -> int:
    kinds = TRANSFORM_KINDS if args.transform in (None, "both") else (args.transform,)
    g, samples = toy_instance(args.seed)
    ok = True
    for kind in kinds:
        p = ModelParams.init(g.n_slots, g.n_features, hidden=4, n_layers=2, decoder_hidden=5, alpha=0.01, seed=args.seed + 3)
        if args.corrupt and args.corrupt not in p.tensors():
            raise InputError(f"unknown tensor {args.corrupt!r}; choose from {sorted(p.tensors())}")
        rep = grad_check(g, p, samples, Transform.make(kind, g.n_slots), corrupt=args.corrupt)
        for grp, err in rep.errors.items():
            print(f"{kind:8s} {grp:14s} {err:.3e} {'ok' if err < rep.tol else 'FAIL'}")
        if not rep.passed:
            ok = False
            bad = ", ".join(f"{k} ({v:.3e})" for k, v in rep.failing().items())
            print(f"{kind}: gradient check failed for {bad}")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def _model_options(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--hidden", type=int, default=32, help="embedding width F")
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--K", type=int, default=2, help="hops in the common-neighbour mix")
    sp.add_argument("--transform", choices=TRANSFORM_KINDS, default="dft")
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--alpha", type=float, default=0.001)
    sp.add_argument("--r-c", dest="r_c", type=float, default=0.5)
    sp.add_argument("--r-a", dest="r_a", type=float, default=0.5)
    sp.add_argument("--activation", choices=("sigmoid", "tanh"), default="sigmoid")
    sp.add_argument("--lag", type=int, default=1)
    sp.add_argument("--max-iters", dest="max_iters", type=int, default=300)
    sp.add_argument("--patience", type=int, default=10)
    sp.add_argument("--no-cna", dest="no_cna", action="store_true", help="set r_c = 0 and freeze the CNA path")
    sp.add_argument("--strict-paper", dest="strict_paper", action="store_true", help="drop the layer biases")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hgnn-cna", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="edge list -> snapshot cache")
    sp.add_argument("edges")
    sp.add_argument("--slots", "-T", type=int, required=True)
    sp.add_argument("--node-cap", dest="node_cap", type=int)
    sp.add_argument("--features", type=int, default=32)
    sp.add_argument("--feature-scheme", dest="feature_scheme", choices=("degree", "random"), default="degree")
    sp.add_argument("--weighted", action="store_true", help="keep summed weights instead of 0/1")
    sp.add_argument("--strict", action="store_true", help="reject malformed lines")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", "-o", required=True)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train and write checkpoint, metrics and report")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", dest="out_dir", default="runs")
    sp.add_argument("--sweep", action="store_true", help="grid search over lr and alpha")
    _model_options(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="held-out metrics of a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--transform", choices=TRANSFORM_KINDS)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("scores", help="write c_hat, C and O of one slot as CSV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--slot", type=int, required=True)
    sp.add_argument("--out-dir", dest="out_dir", default=".")
    sp.set_defaults(func=cmd_scores)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    sp.add_argument("--transform", choices=TRANSFORM_KINDS + ("both",), default="both")
    sp.add_argument("--corrupt", help="double the analytic gradient of this tensor")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return ap


def _subparser(ap: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for act in ap._actions:
        if isinstance(act, argparse._SubParsersAction):
            return act.choices[name]
    raise KeyError(name)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if getattr(args, "config", None):
            try:
                _apply_config(_subparser(ap, args.command), read_config_file(args.config))
            except FileNotFoundError:
                raise InputError(f"config file not found: {args.config}")
            args = ap.parse_args(argv)
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
