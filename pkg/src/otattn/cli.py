"""Command-line entry point.

    otattn [--seed N] [--out-dir DIR] [--config FILE] {sweep,warmstart,solve,bench} ...

Every command writes CSV (and SVG where there is a figure) into ``--out-dir``
and prints a short delimited summary on stdout.  Failures exit nonzero after
printing one JSON line ``{"error": kind, "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .io import ParseError, read_problem, save_checkpoint, write_plan
from .mesh import MeshConfig, mesh
from .ot import (MarginalError, Marginals, SinkhornConfig, SinkhornError, emd_exact, entropy,
                 normalized_entropy, sinkhorn)

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4


class CLIError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _float_list(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otattn", description=__doc__.split("\n\n")[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.add_argument("--config", type=Path, help="JSON object of flag values; overrides the command line")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep", help="entropy / gradient-norm sweep over scaled identity costs")
    s.add_argument("--size", type=int, default=10)
    s.add_argument("--factor-min", type=float, default=1e-3)
    s.add_argument("--factor-max", type=float, default=1e3)
    s.add_argument("--num-factors", type=int, default=60)
    s.add_argument("--taus", type=_float_list, default=[0.1, 1.0], help="comma-separated Sinkhorn temperatures")
    s.add_argument("--lrs", type=_float_list, default=dg.SweepConfig().learning_rates, help="comma-separated MESH step sizes")
    s.add_argument("--mesh-steps", type=int, default=dg.SweepConfig.mesh_steps)
    s.add_argument("--repeats", type=int, default=1, help="noise draws averaged per MESH point")

    w = sub.add_parser("warmstart", help="gap between budgeted and converged inner plans, warm vs cold")
    w.add_argument("--iters", type=_int_list, default=[1, 2, 3, 4, 6, 8])
    w.add_argument("--trials", type=int, default=50)
    w.add_argument("--size", type=int, default=8)
    w.add_argument("--inner", type=int, default=5, help="inner Sinkhorn iterations; 0 runs to convergence")

    o = sub.add_parser("solve", help="solve one transport problem from a text file")
    o.add_argument("problem", type=Path)
    o.add_argument("--method", choices=("sinkhorn", "emd", "mesh"), default="sinkhorn")
    o.add_argument("--tau", type=float, default=1.0)
    o.add_argument("--max-iter", type=int, default=1000)
    o.add_argument("--tol", type=float, default=1e-9)
    o.add_argument("--mesh-steps", type=int, default=4)
    o.add_argument("--mesh-lr", type=float, default=1.0)
    o.add_argument("--plan", type=Path, help="plan output path (default OUT_DIR/plan.txt)")

    b = sub.add_parser("bench", help="train and evaluate on random objects detection")
    b.add_argument("--variant", default="sa-mesh")
    b.add_argument("--sigma", type=float, default=1.0)
    b.add_argument("--epochs", type=int, default=20)
    b.add_argument("--dataset-size", type=int, default=64000)
    b.add_argument("--batch-size", type=int, default=64)
    b.add_argument("--lr", type=float, default=4e-4)
    b.add_argument("--eval-size", type=int, default=6400)
    b.add_argument("--slot-init", choices=("gaussian", "shared"), default="gaussian")
    b.add_argument("--residual-mlp", action="store_true")
    b.add_argument("--input-norm", action="store_true", help="LayerNorm on the inputs before keys, values and marginals")
    b.add_argument("--no-eval-each-epoch", action="store_true")
    return p


def apply_config(args: argparse.Namespace, path: Path | None) -> argparse.Namespace:
    """Overlay a JSON config: keys are flag names with ``-`` or ``_``."""
    if path is None:
        return args
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as e:
        raise CLIError("io", f"cannot read config {path}: {e.strerror}", EXIT_INPUT) from None
    except json.JSONDecodeError as e:
        raise CLIError("parse", f"{path}:{e.lineno}:{e.colno}: {e.msg}", EXIT_INPUT) from None
    if not isinstance(cfg, dict):
        raise CLIError("parse", f"{path}: config must be a JSON object", EXIT_INPUT)
    for key, val in cfg.items():
        dest = key.replace("-", "_")
        if dest in ("command", "config"):
            continue
        if not hasattr(args, dest):
            raise CLIError("config", f"unknown config key {key!r} for command {args.command}", EXIT_USAGE)
        if dest == "out_dir" or dest in ("problem", "plan"):
            val = Path(val)
        setattr(args, dest, val)
    return args


def _emit(rows: list[list], header) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def cmd_sweep(args) -> None:
    from .plotting import plot_sweep
    cfg = dg.SweepConfig(size=args.size, factor_min=args.factor_min, factor_max=args.factor_max,
                         num_factors=args.num_factors, temperatures=list(args.taus),
                         learning_rates=list(args.lrs), mesh_steps=args.mesh_steps,
                         seeds=[args.seed + i for i in range(args.repeats)])
    rows = dg.entropy_sweep(cfg)
    dg.write_rows(rows, args.out_dir / "sweep.csv")
    plot_sweep(rows, args.out_dir / "sweep.svg")
    plot_sweep(rows, args.out_dir / "sweep_raw.svg", raw=True)
    summary = []
    for method, params in (("sinkhorn", cfg.temperatures), ("mesh", cfg.learning_rates)):
        for prm in params:
            curve = [r for r in rows if r.method == method and r.param == float(prm)]
            summary.append([method, repr(float(prm)), repr(dg.nontrivial_gradient_width(rows, method, float(prm))),
                            repr(curve[0].entropy_norm), repr(curve[-1].entropy_norm)])
    _emit(summary, ["method", "param", "grad_width_decades", "entropy_at_min_factor", "entropy_at_max_factor"])


def cmd_warmstart(args) -> None:
    from .plotting import plot_gap
    rows = dg.warmstart_gap(args.iters, args.trials, np.random.default_rng(args.seed), size=args.size,
                            inner_iterations=args.inner or None)
    dg.write_gap_rows(rows, args.out_dir / "warmstart.csv")
    plot_gap(rows, args.out_dir / "warmstart.svg")
    _emit([[r.mesh_iterations, repr(r.gap_warm), repr(r.gap_cold)] for r in rows], dg.GAP_COLUMNS)


def cmd_solve(args) -> None:
    try:
        C, marg = read_problem(args.problem)
    except OSError as e:
        raise CLIError("io", f"cannot read {args.problem}: {e.strerror}", EXIT_INPUT) from None
    m, n = C.shape
    if marg is None:
        marg = Marginals.unit(m, n)
    scfg = SinkhornConfig(temperature=args.tau, max_iterations=args.max_iter, tol=args.tol)
    if args.method == "sinkhorn":
        plan, _ = sinkhorn(C, marg, scfg)
    elif args.method == "emd":
        plan = emd_exact(C, marg)
    else:
        mcfg = MeshConfig(steps=args.mesh_steps, lr=args.mesh_lr, outer=scfg).with_temperature(args.tau)
        _, plan, _ = mesh(C, marg, mcfg, rng=np.random.default_rng(args.seed))
    P = plan.data
    out = args.plan or args.out_dir / "plan.txt"
    write_plan(out, P)
    stats = {
        "method": args.method,
        "entropy": float(entropy(P).data),
        "cost": float((P * C).sum()),
        "iterations": int(plan.iterations),
        "converged": bool(plan.converged),
        "plan": str(out),
    }
    if np.allclose(marg.a.data, 1.0):
        stats["entropy_norm"] = float(normalized_entropy(P))
    (args.out_dir / "solve.json").write_text(json.dumps(stats, indent=1) + "\n")
    keys = ["method", "entropy", "cost", "iterations", "converged"]
    _emit([[stats[k] if isinstance(stats[k], (str, bool, int)) else repr(stats[k]) for k in keys]], keys)


def cmd_bench(args) -> None:
    from .bench import TrainConfig, TrainingDiverged, train
    from .plotting import plot_training
    from .slot_attention import SAConfig, canonical_variant
    variant = canonical_variant(args.variant)
    cfg = TrainConfig(dataset_size=args.dataset_size, epochs=args.epochs, batch_size=args.batch_size,
                      lr=args.lr, seed=args.seed, eval_size=args.eval_size,
                      eval_each_epoch=not args.no_eval_each_epoch)
    sa_cfg = SAConfig(variant=variant, slot_init=args.slot_init, residual_mlp=args.residual_mlp,
                      input_norm=args.input_norm)
    try:
        params, tlog = train(variant, args.sigma, cfg, sa_cfg)
    except TrainingDiverged as e:
        save_checkpoint(args.out_dir / "diverged.json", e.params, sa_cfg, args.seed)
        raise CLIError("diverged", str(e), EXIT_NUMERIC) from None
    stem = f"bench_{variant.lower()}_sigma{args.sigma:g}_seed{args.seed}"
    tlog.write_csv(args.out_dir / f"{stem}.csv")
    save_checkpoint(args.out_dir / f"{stem}.json", params, sa_cfg, args.seed,
                    extra={"sigma": args.sigma, "eval_rmse_normalized": tlog.final_eval})
    if len(tlog.rows) > 1:
        plot_training(tlog.rows, args.out_dir / f"{stem}.svg")
    _emit([[variant, repr(args.sigma), args.seed, args.epochs, repr(tlog.final_eval)]],
          ["variant", "sigma", "seed", "epochs", "eval_rmse_normalized"])


COMMANDS = {"sweep": cmd_sweep, "warmstart": cmd_warmstart, "solve": cmd_solve, "bench": cmd_bench}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and _fail("usage", "invalid command line", EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args = apply_config(args, args.config)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args)
    except CLIError as e:
        return _fail(e.kind, str(e), e.code)
    except ParseError as e:
        return _fail("parse", str(e), EXIT_INPUT)
    except MarginalError as e:
        return _fail("infeasible", str(e), EXIT_INPUT)
    except (SinkhornError, FloatingPointError) as e:
        return _fail("numeric", str(e), EXIT_NUMERIC)
    except OSError as e:
        return _fail("io", f"{e.filename}: {e.strerror}", EXIT_INPUT)
    except ValueError as e:
        return _fail("invalid", str(e), EXIT_USAGE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
