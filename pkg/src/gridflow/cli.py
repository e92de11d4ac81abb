"""Command-line interface.

Exit codes: 0 success, 2 parse/flag/schema error, 3 solver did not
converge, 4 network not radial (FBS), 5 more than 1% of generated
scenarios failed to converge, 6 non-finite gradient during training,
7 reproduction case below its acceptance thresholds.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import __version__
from .circuit import (CircuitSyntaxError, FormatError, SemanticError,
                      parse_circuit_file)
from .network import validate_network
from .nn import NonFiniteGradient
from .scenarios import (SchemaMismatch, generate_dataset,
                        parse_scenario_config_file, write_generation_report)
from .solver import (DEFAULT_MAX_ITER, DEFAULT_TOL, NotRadial,
                     fbs_solve, losses_to_csv, max_mismatch,
                     solution_to_csv, solve_current_injection)

EXIT_PARSE = 2
EXIT_NOT_CONVERGED = 3
EXIT_NOT_RADIAL = 4
EXIT_UNCONVERGED_SCENARIOS = 5
EXIT_NONFINITE = 6
EXIT_CRITERIA = 7


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _default_seed() -> int:
    env = os.environ.get("GRIDFLOW_SEED")
    return int(env) if env else 42


def _load_circuit(path, validate=True):
    try:
        return parse_circuit_file(path, validate=validate)
    except (CircuitSyntaxError, SemanticError, FormatError, OSError) as exc:
        raise CliError(EXIT_PARSE, f"cannot read circuit {path}: {exc}")


# ---------------------------------------------------------------------------
# commands

def cmd_validate(args):
    net = _load_circuit(args.circuit, validate=False)
    violations = validate_network(net)
    if violations:
        for v in violations:
            print(f"violation: {v}")
        return 1
    print(f"{args.circuit}: ok "
          f"({len(net.buses)} buses, {len(net.branches)} branches, "
          f"{len(net.loads)} loads)")
    return 0


def cmd_solve(args):
    net = _load_circuit(args.circuit)
    sols = {}
    if args.solver in ("fbs", "both"):
        try:
            sols["fbs"] = fbs_solve(net, tol=args.tol, max_iter=args.max_iter)
        except NotRadial as exc:
            raise CliError(EXIT_NOT_RADIAL, f"fbs: {exc}")
    if args.solver in ("ci", "both"):
        sols["ci"] = solve_current_injection(net, tol=args.tol,
                                             max_iter=args.max_iter)
    for name, sol in sols.items():
        if not sol.converged:
            raise CliError(EXIT_NOT_CONVERGED,
                           f"{name} did not converge in {args.max_iter} iterations")
        print(f"{name}: converged in {sol.iterations} iterations, "
              f"min |V| {sol.min_voltage():.4f} pu, "
              f"max mismatch {max_mismatch(net, sol):.3e} pu")
    if len(sols) == 2:
        a, b = sols["fbs"], sols["ci"]
        dv = max(abs(a.bus_voltage[k] - b.bus_voltage[k]) for k in a.bus_voltage)
        di = max(abs(a.bus_current[k] - b.bus_current[k]) for k in a.bus_current)
        print(f"cross-solver discrepancy: max |dV| {dv:.3e} pu, "
              f"max |dI| {di:.3e} pu")
    sol = sols.get("ci", sols.get("fbs"))
    if args.out:
        solution_to_csv(net, sol, args.out)
        print(f"wrote {args.out}")
    if args.losses:
        losses_to_csv(net, sol, args.losses)
        print(f"wrote {args.losses}")
    return 0


def cmd_gen(args):
    net = _load_circuit(args.circuit)
    try:
        cfg = parse_scenario_config_file(args.config)
    except (ValueError, KeyError, OSError) as exc:
        raise CliError(EXIT_PARSE, f"cannot read config {args.config}: {exc}")
    ds = generate_dataset(net, cfg, args.seed,
                          base_dir=os.path.dirname(os.path.abspath(args.config)),
                          jobs=args.jobs)
    total = ds.n + ds.dropped
    print(f"generated {ds.n} samples ({ds.dropped} dropped, "
          f"{len(ds.train_idx)} train / {len(ds.test_idx)} test)")
    from .datafiles import write_dataset
    write_dataset(ds, args.out)
    print(f"wrote {args.out}")
    if args.report:
        write_generation_report(ds, args.report)
        print(f"wrote {args.report}")
    if total and ds.dropped / total > 0.01:
        raise CliError(EXIT_UNCONVERGED_SCENARIOS,
                       f"{ds.dropped}/{total} scenarios failed to converge")
    return 0


def _read_dataset(path):
    from .datafiles import read_dataset
    try:
        return read_dataset(path)
    except (SchemaMismatch, OSError) as exc:
        raise CliError(EXIT_PARSE, f"cannot read dataset {path}: {exc}")


def cmd_train(args):
    from .surrogate import (TrainConfig, build_cnn, build_mlp, build_rbfnet,
                            train)
    ds = _read_dataset(args.dataset)
    dx, dy = len(ds.x_slots), len(ds.y_slots)
    if args.arch == "mlp":
        model = build_mlp(dx, dy, seed=args.seed)
        epochs, batch = args.epochs or 100, args.batch or 256
    elif args.arch == "cnn":
        model = build_cnn(dx, dy, seed=args.seed)
        epochs, batch = args.epochs or 1000, args.batch or 256
    else:
        xt = ds.x_norm.apply(ds.x[ds.train_idx])
        yt = ds.y_norm.apply(ds.y[ds.train_idx])
        model = build_rbfnet(xt, min(args.centers, len(xt)), dy,
                             seed=args.seed, train_y=yt)
        epochs, batch = args.epochs or 150, args.batch or 1
    cfg = TrainConfig(lr=args.lr, batch=batch, epochs=epochs, seed=args.seed)
    try:
        history = train(model, ds, cfg)
    except NonFiniteGradient as exc:
        raise CliError(EXIT_NONFINITE, f"training diverged: {exc}")
    print(f"trained {args.arch}: final epoch MSE {history[-1]:.3e} "
          f"({epochs} epochs, batch {batch}, lr {cfg.lr})")
    from .datafiles import write_model
    from .surrogate import model_to_dict
    write_model(model_to_dict(model), args.out)
    print(f"wrote {args.out}")
    if args.loss_csv:
        import csv
        with open(args.loss_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse"])
            w.writerows([i + 1, v] for i, v in enumerate(history))
        print(f"wrote {args.loss_csv}")
    return 0


def _read_model(path):
    from .datafiles import read_model
    from .surrogate import model_from_dict
    try:
        return model_from_dict(read_model(path))
    except (SchemaMismatch, OSError) as exc:
        raise CliError(EXIT_PARSE, f"cannot read model {path}: {exc}")


def cmd_eval(args):
    from .surrogate import evaluate
    model = _read_model(args.model)
    ds = _read_dataset(args.dataset)
    if model.y_slots != ds.y_slots:
        raise CliError(EXIT_PARSE,
                       "model target slots do not match dataset target slots")
    report = evaluate(model, ds, args.split)
    print(report.table())
    if args.out:
        report.to_csv(args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_plot(args):
    from . import plots
    os.makedirs(args.out, exist_ok=True)
    wrote = []
    if args.solution:
        wrote.append(plots.plot_solution_csv(args.solution, args.out))
    if args.dataset:
        ds = _read_dataset(args.dataset)
        wrote.extend(plots.plot_daily_profiles(ds, args.out, hours=args.hours))
        if args.model:
            model = _read_model(args.model)
            if model.y_slots != ds.y_slots:
                raise CliError(EXIT_PARSE,
                               "model target slots do not match dataset")
            model.x_norm, model.y_norm = ds.x_norm, ds.y_norm
            wrote.append(plots.plot_prediction_overlay(
                model, ds, args.out, group=args.group, hours=args.hours))
    if not wrote:
        raise CliError(EXIT_PARSE, "nothing to plot: pass --solution or --dataset")
    for path in wrote:
        print(f"wrote {path}")
    return 0


def cmd_repro(args):
    from .repro import run_case
    result = run_case(args.case, seed=args.seed, out_dir=args.out,
                      log=lambda m: print(m, flush=True))
    print(result.table())
    if not result.passed:
        failing = [f"{r.label}/{r.family}" for r in result.rows if not r.passed]
        if result.baseline is not None:
            for r in result.rows:
                if (r.mse_pct <= result.baseline.mse_pct
                        or r.mae_pct <= result.baseline.mae_pct):
                    failing.append(f"{r.label}/{r.family} not above baseline")
        raise CliError(EXIT_CRITERIA,
                       "failing: " + ", ".join(failing or ["(see table)"]))
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gridflow",
        description="Three-phase distribution power flow, dataset generation "
                    "and neural surrogate training.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse a circuit and report violations")
    p.add_argument("--circuit", required=True, help="path to a .ckt file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve", help="solve power flow")
    p.add_argument("--circuit", required=True, help="path to a .ckt file")
    p.add_argument("--solver", choices=("fbs", "ci", "both"), default="both",
                   help="algorithm: forward-backward sweep, current "
                        "injection, or both with a discrepancy report")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL,
                   help="convergence tolerance in pu (default %(default)g)")
    p.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER,
                   help="iteration cap (default %(default)s)")
    p.add_argument("--out", help="solution CSV path")
    p.add_argument("--losses", help="per-branch loss CSV path")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gen", help="generate a training dataset")
    p.add_argument("--circuit", required=True, help="path to a .ckt file")
    p.add_argument("--config", required=True, help="scenario config file")
    p.add_argument("--seed", type=int, default=_default_seed(),
                   help="RNG seed (default GRIDFLOW_SEED or 42)")
    p.add_argument("--jobs", type=int, default=os.cpu_count(),
                   help="parallel solver processes (default %(default)s)")
    p.add_argument("--out", required=True, help="output .ds path")
    p.add_argument("--report", help="generation report CSV path")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a surrogate on a dataset")
    p.add_argument("--dataset", required=True, help="input .ds path")
    p.add_argument("--arch", choices=("mlp", "cnn", "rbf"), required=True)
    p.add_argument("--epochs", type=int,
                   help="training epochs (default per arch: mlp 100, "
                        "cnn 1000, rbf 150)")
    p.add_argument("--lr", type=float, default=1e-4,
                   help="learning rate (default %(default)g)")
    p.add_argument("--batch", type=int,
                   help="batch size (default per arch: mlp/cnn 256, rbf 1)")
    p.add_argument("--centers", type=int, default=50,
                   help="RBF hidden units (default %(default)s)")
    p.add_argument("--seed", type=int, default=_default_seed(),
                   help="RNG seed (default GRIDFLOW_SEED or 42)")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.add_argument("--loss-csv", help="loss-curve CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model against a dataset")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--dataset", required=True, help="input .ds path")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render figures (SVG + CSV)")
    p.add_argument("--solution", help="solution CSV from `solve`")
    p.add_argument("--dataset", help=".ds file for daily profile panels")
    p.add_argument("--model", help="model JSON for prediction overlays "
                                   "(with --dataset)")
    p.add_argument("--group", choices=("V", "I", "thV", "thI"), default="I",
                   help="target group for the overlay (default %(default)s)")
    p.add_argument("--hours", type=int, default=24,
                   help="hours to plot (default %(default)s)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("repro", help="run a full reproduction case")
    p.add_argument("--case", choices=("4node", "13node", "topology",
                                      "pv", "ev"), required=True)
    p.add_argument("--seed", type=int, default=_default_seed(),
                   help="RNG seed (default GRIDFLOW_SEED or 42)")
    p.add_argument("--out", help="directory for models, metrics and figures")
    p.set_defaults(func=cmd_repro)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "epochs", None) is not None and args.epochs < 1:
        print("error: --epochs must be >= 1", file=sys.stderr)
        return EXIT_PARSE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
