"""Command-line entry point: ``graphbo {run,invert,bench,sample-path}``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path


from .experiment import ExperimentConfig, emit_artifacts, fixture_path, run_experiment
from .fem import assemble
from .kernels import build_spde_kernel, sample_prior_path
from .metric_graph import build_mesh, load_graph
from .objectives import InverseProblemObjective

log = logging.getLogger("graphbo")


def _summary(result) -> str:
    lines = [f"{'family':<10} {'reach':>6} {'median final regret':>20} {'mean iters':>11}"]
    for name, rep in result.reports.items():
        lines.append(f"{name:<10} {rep.reach_rate:>6.2f} {rep.final_median:>20.4g} {rep.mean_iters:>11.2f}")
    return "\n".join(lines)


def _execute(cfg: ExperimentConfig, out: str | None, svg: bool) -> int:
    t0 = time.perf_counter()
    result = run_experiment(cfg)
    outdir = out or cfg.outdir
    if outdir:
        emit_artifacts(result.reports, outdir, result.records, svg=svg)
        if isinstance(result.objective, InverseProblemObjective):
            Path(outdir, "data.csv").write_text(result.objective.data_csv(), encoding="utf-8")
        print(f"artifacts written to {outdir}")
    print(_summary(result))
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return 0


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_yaml(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "n_rep", None):
        cfg = dataclasses.replace(cfg, n_rep=args.n_rep)
    return cfg


def cmd_run(args) -> int:
    return _execute(_load(args), args.out, not args.no_svg)


def cmd_invert(args) -> int:
    cfg = _load(args)
    if str(cfg.objective.get("kind")).lower() != "inverse":
        raise SystemExit("invert expects a config whose objective kind is 'inverse'")
    return _execute(cfg, args.out, not args.no_svg)


def cmd_bench(args) -> int:
    from .bo import BoConfig

    bo = BoConfig(algorithm=args.algorithm, T=args.T, lam_mode="fixed", stop_tol=args.tol)
    cfg = ExperimentConfig(graph=args.graph, objective={"kind": args.suite}, bo=bo, n_rep=args.n_rep,
                           tol=args.tol, seed=args.seed or 0)
    out = args.out or f"results/{args.suite}_{args.algorithm.lower()}"
    return _execute(cfg, out, not args.no_svg)


def cmd_sample_path(args) -> int:
    path = fixture_path(args.graph)
    graph = load_graph(path)
    mesh = build_mesh(graph, args.h)
    kernel = build_spde_kernel(assemble(mesh, args.kappa), args.alpha, args.tau)
    values = sample_prior_path(kernel, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "edge", "s", "x", "y", "value"])
        for i, (p, xy, v) in enumerate(zip(mesh.nodes, mesh.coordinates, values)):
            w.writerow([i, p.edge, repr(float(p.s)), repr(float(xy[0])), repr(float(xy[1])), repr(float(v))])
    print(f"sample path on {mesh.N} nodes written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphbo", description="Bayesian optimization on metric graphs")
    parser.add_argument("--seed", type=int, default=None, help="master seed for all randomness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (("run", cmd_run, "run an experiment from a YAML config"),
                               ("invert", cmd_invert, "run the source-identification experiment")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument("--n-rep", type=int, default=None)
        p.add_argument("--no-svg", action="store_true")
        p.set_defaults(func=fn)

    p = sub.add_parser("bench", help="benchmark comparison on the open-rectangle graph")
    p.add_argument("--suite", choices=["ackley", "rastrigin", "levy"], required=True)
    p.add_argument("--algorithm", choices=["UCB", "TS"], default="UCB")
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--n-rep", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--graph", default="open_rectangle")
    p.add_argument("--out", default=None)
    p.add_argument("--no-svg", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sample-path", help="draw one Whittle-Matern prior path at the mesh nodes")
    p.add_argument("--graph", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--h", type=float, default=0.05, help="target mesh size")
    p.add_argument("--out", default="sample_path.csv")
    p.set_defaults(func=cmd_sample_path)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, IndexError, FileNotFoundError) as exc:
        print(f"graphbo: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
