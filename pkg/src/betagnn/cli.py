"""Command-line entry point: ``betagnn <subcommand> ...``.

Every subcommand exits 0 on success. On failure a single JSON object
``{"error": <type>, "message": <text>}`` is written to stderr and the exit
code is 1 (2 for usage errors, as argparse does). ``run`` exits 3 when the
experiment finished but some seeds failed; their reasons are in ``run.csv``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .attacks import ATTACK_KINDS, ATTACK_OBJECTIVES, AttackSpec, default_surrogate, run_attack, write_diff
from .datasets import Dataset, generate_sbm, import_npz, load_dataset, save_dataset
from .defenses import jaccard_prune, truncated_svd_clean
from .ensemble import MODEL_KINDS, BetaEnsemble, TrainConfig, build_model, train
from .experiments import ExperimentConfig, run_experiment, summarize, tomllib
from .graph import PerturbationBudget, apply_edge_diff, homophily_score, make_split
from .models import save_checkpoint


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with defaults for this subcommand's options")
    p.add_argument("--seed", type=int, help="global seed (default 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=["csv"], default="csv", help="tabular output format")


def _apply_config(args: argparse.Namespace) -> None:
    """Fill options not given on the command line from a TOML ``--config`` file.

    ``run`` reads its config as an experiment description instead.
    """
    if not args.config or args.command == "run":
        return
    with open(args.config, "rb") as fh:
        data = tomllib.load(fh)
    valid = set(vars(args)) - {"func"}
    for key, val in data.items():
        dest = key.replace("-", "_")
        if dest not in valid or dest in ("config", "command"):
            raise ValueError(f"{args.config}: unknown key {key!r} for '{args.command}'")
        if getattr(args, dest) is None:
            setattr(args, dest, val)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise ValueError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def cmd_gen_sbm(args) -> int:
    _require(args, "n", "out")
    ds = generate_sbm(args.n, args.classes or 4, args.p_in if args.p_in is not None else 0.05,
                      args.p_out if args.p_out is not None else 0.005, args.feature_dim or 32,
                      args.feature_noise if args.feature_noise is not None else 1.5,
                      args.seed or 0, name=args.name or f"sbm{args.n}")
    save_dataset(ds, args.out)
    print(f"n_nodes,n_edges,n_classes,homophily\n{ds.graph.n_nodes},{ds.graph.n_edges},"
          f"{ds.n_classes},{homophily_score(ds.graph, ds.labels)!r}")
    return 0


def cmd_import_npz(args) -> int:
    _require(args, "out")
    ds = import_npz(args.path, args.name)
    save_dataset(ds, args.out)
    print(f"n_nodes,n_edges,n_classes,n_features\n{ds.graph.n_nodes},{ds.graph.n_edges},"
          f"{ds.n_classes},{ds.features.shape[1]}")
    return 0


def _budget(args, ds: Dataset) -> int:
    if (args.budget is None) == (args.budget_frac is None):
        raise ValueError("give exactly one of --budget or --budget-frac")
    if args.budget is not None:
        return args.budget
    return int(round(args.budget_frac * ds.graph.n_edges))


def cmd_attack(args) -> int:
    _require(args, "data", "kind", "out")
    ds = load_dataset(args.data)
    seed = args.seed or 0
    split = make_split(ds.graph.n_nodes, args.split_seed if args.split_seed is not None else seed)
    surrogate = TrainConfig(**{**vars(default_surrogate()), "seed": seed})
    targets = tuple(int(t) for t in str(args.targets).split(",")) if args.targets else ()
    spec = AttackSpec(args.kind, PerturbationBudget(_budget(args, ds)), targets, seed=seed,
                      surrogate=surrogate, objective=args.objective or "train")
    diff = run_attack(spec, ds.graph, ds.features, ds.labels, split)
    out = Path(args.out)
    poisoned = Dataset(apply_edge_diff(ds.graph, diff), ds.features, ds.labels,
                       {**ds.manifest, "attack": args.kind, "attack_seed": seed})
    save_dataset(poisoned, out)
    write_diff(out / "attack.diff", diff, args.kind, seed, spec.budget.b_edges)
    print(f"added,removed,homophily_before,homophily_after\n{len(diff.added)},{len(diff.removed)},"
          f"{homophily_score(ds.graph, ds.labels)!r},{homophily_score(poisoned.graph, ds.labels)!r}")
    return 0


def cmd_defend(args) -> int:
    _require(args, "data", "method", "out")
    ds = load_dataset(args.data)
    if args.method == "jaccard":
        g = jaccard_prune(ds.graph, ds.features, args.tau if args.tau is not None else 0.01)
    else:
        g = truncated_svd_clean(ds.graph, args.k or 15, args.iters or 4, args.seed or 0)
    save_dataset(Dataset(g, ds.features, ds.labels, {**ds.manifest, "defense": args.method}), args.out)
    print(f"edges_before,edges_after\n{ds.graph.n_edges},{g.n_edges}")
    return 0


def cmd_train(args) -> int:
    _require(args, "data", "model", "out")
    ds = load_dataset(args.data)
    seed = args.seed or 0
    split = make_split(ds.graph.n_nodes, args.split_seed if args.split_seed is not None else seed)
    cfg = TrainConfig(epochs=args.epochs or 200, lr=args.lr or 0.01, hidden=args.hidden or 64,
                      dropout=args.dropout if args.dropout is not None else 0.5, seed=seed,
                      weight_decay=args.weight_decay if args.weight_decay is not None else 5e-3)
    model = build_model(args.model, ds.features.shape[1], ds.n_classes, hidden=cfg.hidden,
                        dropout=cfg.dropout, seed=seed)
    res = train(model, ds.graph, ds.features, ds.labels, split, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.trajectory.write_csv(out / "trajectory.csv")
    save_checkpoint(model, out / "model.ckpt")
    beta = repr(model.beta) if isinstance(model, BetaEnsemble) else ""
    print(f"model,test_acc,best_epoch,final_beta\n{args.model},{res.test_accuracy!r},"
          f"{res.trajectory.best_epoch},{beta}")
    return 0


def cmd_run(args) -> int:
    _require(args, "config")
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    summary = run_experiment(cfg, args.out)
    sys.stdout.write(summarize(Path(args.out or cfg.out_dir)))
    return 0 if not summary.failures else 3


def cmd_summarize(args) -> int:
    _require(args, "results")
    out = Path(args.out) / "summary.csv" if args.out else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
    sys.stdout.write(summarize(args.results, out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="betagnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-sbm", help="generate a stochastic block model dataset")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--p-in", type=float)
    p.add_argument("--p-out", type=float)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--feature-noise", type=float)
    p.add_argument("--name")
    p.set_defaults(func=cmd_gen_sbm)

    p = sub.add_parser("import-npz", help="convert a CSR-packed .npz benchmark file")
    _common(p)
    p.add_argument("path")
    p.add_argument("--name")
    p.set_defaults(func=cmd_import_npz)

    p = sub.add_parser("attack", help="poison a dataset's structure and write the edge diff")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--kind", choices=ATTACK_KINDS)
    p.add_argument("--budget", type=int)
    p.add_argument("--budget-frac", type=float)
    p.add_argument("--targets", help="comma-separated target nodes (greedy)")
    p.add_argument("--objective", choices=ATTACK_OBJECTIVES)
    p.add_argument("--split-seed", type=int)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="apply a preprocessing defense")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--method", choices=["jaccard", "svd"])
    p.add_argument("--tau", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("train", help="train one model on one dataset")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--split-seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="run a multi-seed experiment from a config file")
    _common(p)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("summarize", help="aggregate run.csv files into a comparison table")
    _common(p)
    p.add_argument("--results")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config(args)
        return args.func(args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
