"""Command-line driver.

Examples
--------
  dlps estimate --dataset sphere:64:20 --method dlnv --out runs/one
  dlps sweep-snr --dataset data/catPNG --method ls,dlpi,dlnv \\
      --snr-list 1,5,10,20,30 --nimages 20 --realizations 5 --out runs/snr
  dlps sweep-nimages --dataset data/bearPNG --method ls,dlpi,dlnv \\
      --nimages-list 5,15,25,96 --snr 10 --out runs/nim
  dlps sweep-params --dataset sphere --method dlpi --snr 1 \\
      --lambda 0.1,1,10 --mu 0.05,0.1,0.2 --out runs/grid

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import experiments, io, metrics, solvers
from .core import ContractError

logger = logging.getLogger("dlps")


class UsageError(Exception):
    pass


def _floats(s: str) -> list[float]:
    try:
        return [float(v) for v in s.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


def _ints(s: str) -> list[int]:
    try:
        return [int(v) for v in s.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def _triplet(s: str) -> tuple[int, int, int]:
    vals = _ints(s.replace("x", ","))
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three integers, got {s!r}")
    return tuple(vals)


def _tau(s: str):
    if s == "auto":
        return None
    try:
        return float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tau must be 'auto' or a number, got {s!r}")


def _methods(s: str) -> list[str]:
    out = [m.strip() for m in s.split(",") if m.strip()]
    bad = [m for m in out if m not in solvers.METHODS]
    if bad or not out:
        raise argparse.ArgumentTypeError(
            f"unknown method {bad[0] if bad else s!r}; choose from {', '.join(solvers.METHODS)}"
        )
    return out


def _common(p: argparse.ArgumentParser, multi_method: bool):
    p.add_argument("--dataset", required=True,
                   help="dataset directory or sphere[:RES[:D[:LIGHT_ZEN[:NORMAL_ZEN]]]]")
    if multi_method:
        p.add_argument("--method", type=_methods, default=list(solvers.METHODS),
                       help="comma list of ls, dlpi, dlnv")
    else:
        p.add_argument("--method", type=_methods, required=True, help="ls, dlpi or dlnv")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=_floats, default=[1.0])
    p.add_argument("--mu", type=_floats, default=[0.1])
    p.add_argument("--atoms", type=int, default=None)
    p.add_argument("--code-bound", type=float, default=1e6)
    p.add_argument("--patch", type=_triplet, default=None, help="cx,cy,cz")
    p.add_argument("--stride", type=_triplet, default=None, help="sx,sy,sz")
    p.add_argument("--outer-iters", type=int, default=20)
    p.add_argument("--inner-iters", type=int, default=5)
    p.add_argument("--prox-steps", type=int, default=10)
    p.add_argument("--tau", type=_tau, default=None, help="'auto' or a step size")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--use-intensities", action="store_true",
                   help="divide images by published light intensities when present")
    p.add_argument("--config", type=Path, default=None,
                   help="key = value file whose entries override command-line flags")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlps", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate normals with one method")
    _common(p, multi_method=False)
    p.add_argument("--snr", type=float, default=None, help="optional Poisson corruption")
    p.add_argument("--nimages", type=int, default=None)
    p.add_argument("--realization", type=int, default=0)

    p = sub.add_parser("sweep-snr", help="MAE versus SNR")
    _common(p, multi_method=True)
    p.add_argument("--snr-list", type=_floats, required=True)
    p.add_argument("--nimages", type=int, default=None, help="image subset size")
    p.add_argument("--realizations", type=int, default=5)

    p = sub.add_parser("sweep-nimages", help="MAE versus number of images")
    _common(p, multi_method=True)
    p.add_argument("--nimages-list", type=_ints, required=True)
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--realizations", type=int, default=5)

    p = sub.add_parser("sweep-params", help="grid over lambda and mu")
    _common(p, multi_method=False)
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--nimages", type=int, default=None)
    p.add_argument("--realizations", type=int, default=1)

    p = sub.add_parser("synth", help="write a synthetic sphere dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--nlights", type=int, default=20)
    p.add_argument("--max-zenith", type=float, default=45.0)
    p.add_argument("--albedo", default="uniform", choices=["uniform", "checker", "radial"])
    p.add_argument("--bit-depth", type=int, default=16, choices=[8, 16])
    return parser


def read_config_file(path: Path) -> list[str]:
    """Turn ``key = value`` lines into ``--key value`` tokens."""
    tokens = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (t.strip() for t in s.split("=", 1))
            key = key.lstrip("-").replace("_", "-")
            tokens += [f"--{key}", val] if val else [f"--{key}"]
    return tokens


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        try:
            extra = read_config_file(cfg_path)
        except OSError as exc:
            parser.error(f"cannot read config {cfg_path}: {exc}")
        except UsageError as exc:
            parser.error(str(exc))
        args = parser.parse_args(list(argv) + extra)
    return args


def solver_config(args) -> solvers.SolverConfig:
    return solvers.SolverConfig(
        lam=args.lam[0], mu=args.mu[0], n_atoms=args.atoms, code_bound=args.code_bound,
        inner_iters=args.inner_iters, patch=args.patch, stride=args.stride,
        outer_iters=args.outer_iters, prox_steps=args.prox_steps, tau=args.tau,
        tol=args.tol, seed=args.seed,
    )


def _validate_grid(args, methods):
    if not any(m != "ls" for m in methods):
        return
    for lam in args.lam:
        for mu in args.mu:
            solvers.SolverConfig(**{**solver_config(args).as_dict(), "lam": lam, "mu": mu})


def _load(args) -> experiments.Dataset:
    if args.dataset.startswith("sphere"):
        return experiments.resolve_dataset(args.dataset)
    stack, mask, truth = io.load_dataset(args.dataset, args.use_intensities)
    return experiments.Dataset(args.dataset, stack, mask, truth)


def _write_summary(out: Path, summary, xkey: str):
    fields = ["method", "d", "snr_db", "lambda", "mu", "mae_mean", "mae_std", "n", "best"]
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(summary)
    print(f"{'method':<6} {xkey:>8} {'lambda':>8} {'mu':>8} {'MAE mean':>10} {'std':>8}")
    for s in summary:
        if s["best"]:
            x = s["snr_db"] if xkey == "snr_db" else s["d"]
            print(f"{s['method']:<6} {x!s:>8} {s['lambda']!s:>8} {s['mu']!s:>8} "
                  f"{s['mae_mean']:>10.3f} {s['mae_std']:>8.3f}")


def cmd_estimate(args) -> int:
    if len(args.lam) != 1 or len(args.mu) != 1:
        raise UsageError("estimate takes a single --lambda and --mu; use sweep-params for grids")
    method = args.method[0] if len(args.method) == 1 else None
    if method is None:
        raise UsageError("estimate takes exactly one --method")
    base = solver_config(args)
    ds = _load(args)
    n = args.nimages or ds.stack.n_images
    cell = experiments.Cell(method, n, args.snr, args.realization, base.lam, base.mu)
    noisy, _ = experiments.prepare_stack(ds, n, args.snr, args.realization, base.seed)
    t0 = time.perf_counter()
    normals, report = solvers.estimate(noisy, method, base)
    wall = time.perf_counter() - t0
    err_map = mae = None
    if ds.truth is not None:
        err_map = metrics.angular_error_map(normals, ds.truth, ds.mask)
        mae = metrics.mean_angular_error(err_map, ds.mask)
    row = experiments.make_row(ds.name, cell, base, mae, wall)
    io.save_results(args.out, normals, err_map, report, [row])
    for w in report.warnings:
        logger.warning(w)
    print(f"{method}: " + (f"MAE {mae:.6g} deg" if mae is not None else "no ground truth")
          + f" ({wall:.2f}s) -> {args.out}")
    return 0


def _sweep(args, methods, counts, snrs, xkey) -> int:
    ds = _load(args)
    counts = [c or ds.stack.n_images for c in counts]
    if max(counts) > ds.stack.n_images:
        raise UsageError(f"subset size {max(counts)} exceeds {ds.stack.n_images} images")
    _validate_grid(args, methods)
    cells = experiments.build_cells(methods, counts, snrs, args.realizations, args.lam, args.mu)
    rows = experiments.run_cells(ds, cells, solver_config(args), args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    io.append_csv(args.out / "results.csv", rows)
    summary = experiments.summarize(rows)
    _write_summary(args.out, summary, xkey)
    return 0


def cmd_sweep_snr(args) -> int:
    return _sweep(args, args.method, [args.nimages], args.snr_list, "snr_db")


def cmd_sweep_nimages(args) -> int:
    return _sweep(args, args.method, args.nimages_list, [args.snr], "d")


def cmd_sweep_params(args) -> int:
    if len(args.method) != 1:
        raise UsageError("sweep-params takes exactly one --method")
    ds = _load(args)
    n = args.nimages or ds.stack.n_images
    _validate_grid(args, args.method)
    cells = experiments.build_cells(args.method, [n], [args.snr], args.realizations,
                                    args.lam, args.mu)
    rows = experiments.run_cells(ds, cells, solver_config(args), args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    io.append_csv(args.out / "results.csv", rows)
    summary = experiments.summarize(rows)
    best = min(summary, key=lambda s: s["mae_mean"])
    (args.out / "best.json").write_text(json.dumps(best, indent=2), encoding="utf-8")
    _write_summary(args.out, summary, "snr_db")
    return 0


def cmd_synth(args) -> int:
    lights = io.spread_lights(args.nlights, args.max_zenith)
    stack, mask, truth = io.generate_sphere(args.resolution, lights, args.albedo)
    io.save_stack(args.out, stack, mask, truth, args.bit_depth)
    print(f"wrote {args.nlights}-image sphere dataset to {args.out}")
    return 0


COMMANDS = {
    "estimate": cmd_estimate,
    "sweep-snr": cmd_sweep_snr,
    "sweep-nimages": cmd_sweep_nimages,
    "sweep-params": cmd_sweep_params,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ContractError) as exc:
        print(f"dlps: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"dlps: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
