"""Command line entry point: check, solve, optimize, verify, benchmark-lq.

Exit codes: 0 success, 1 invalid input, 2 solver non-convergence or a failed
benchmark, 3 internal error.  Failures also write ``error.json`` with keys
``stage``, ``code`` and ``message`` into the output directory.
"""
import argparse
import csv
import json
import math
import os
import sys
import time
from importlib import metadata

import numpy as np

from .errors import DivergenceError, InvalidInput

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_INTERNAL = 0, 1, 2, 3


class NonConvergence(RuntimeError):
    def __init__(self, message, stage, files=()):
        super().__init__(message)
        self.stage = stage
        self.files = list(files)


def code_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__

        return __version__


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    return o


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(_clean(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# control tables


def write_control(ctl, path):
    """Long format: kind, features, type_index, step, component, feature, value."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["kind", "features", "type_index", "step", "component", "feature", "value"])
        P = ctl.params
        if ctl.kind == "open_loop":
            for i, j, c in np.ndindex(P.shape):
                wr.writerow([ctl.kind, ctl.features, i, j, c, 0, repr(float(P[i, j, c]))])
        elif ctl.kind == "feedback":
            for i, j, c, f in np.ndindex(P.shape):
                wr.writerow([ctl.kind, ctl.features, i, j, c, f, repr(float(P[i, j, c, f]))])
        else:
            raise InvalidInput("process controls are not exported")


def read_control(path, lower=None, upper=None):
    from .control import ControlField

    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise InvalidInput(f"control table not found: {path}") from None
    if not rows:
        raise InvalidInput(f"empty control table: {path}")
    kind, feats = rows[0]["kind"], rows[0]["features"]
    idx = np.array([[int(r["type_index"]), int(r["step"]), int(r["component"]), int(r["feature"])] for r in rows])
    vals = np.array([float(r["value"]) for r in rows])
    shape = tuple(idx.max(axis=0) + 1)
    if kind == "open_loop":
        P = np.zeros(shape[:3])
        P[idx[:, 0], idx[:, 1], idx[:, 2]] = vals
    elif kind == "feedback":
        P = np.zeros(shape)
        P[idx[:, 0], idx[:, 1], idx[:, 2], idx[:, 3]] = vals
    else:
        raise InvalidInput(f"unknown control kind {kind!r} in {path}")
    return ControlField(kind, P, feats, lower, upper)


# ---------------------------------------------------------------------------
# subcommands


def _setup(sc, seed):
    from .scenario import build_atlas, build_control, build_grid, build_initial, build_model, build_options

    atlas = build_atlas(sc)
    model = build_model(sc)
    return {
        "atlas": atlas,
        "model": model,
        "grid": build_grid(sc),
        "initial": build_initial(sc),
        "control": build_control(sc, model, atlas),
        "opts": build_options(sc),
        "seed": sc.seed if seed is None else seed,
    }


def _sheet(sc, env):
    from .conditions import ConstantSheet

    if sc.conditions.sheet is not None:
        try:
            return ConstantSheet(**sc.conditions.sheet)
        except TypeError as exc:
            raise InvalidInput(f"conditions.sheet: {exc}") from None
    sheet = env["model"].constant_sheet(env["atlas"])
    if sheet is None:
        raise InvalidInput("conditions.sheet is required for models without derived constants")
    return sheet


def cmd_check(sc, args, out, manifest):
    from .conditions import certify

    env = _setup(sc, args.seed)
    rep = certify(_sheet(sc, env), sc.conditions.variant)
    write_json(os.path.join(out, "report.json"), rep.to_dict())
    manifest["stages"]["check"] = {"feasible": rep.feasible, "status": rep.status}
    return ["report.json"]


def cmd_solve(sc, args, out, manifest):
    from .solver import picard_solve, residual, write_trajectories

    env = _setup(sc, args.seed)
    ens, flow, diag = picard_solve(
        env["model"], env["control"], env["atlas"], sc.N, env["grid"], env["seed"], env["opts"], env["initial"]
    )
    res = residual(ens, flow, env["model"])
    files = write_trajectories(ens, out, diag)
    write_json(os.path.join(out, "diagnostics.json"), {"picard": diag.to_dict(), "defects": res})
    manifest["stages"]["solve"] = {"converged": diag.converged, "defects": res}
    if not diag.converged:
        raise NonConvergence(
            f"Picard iteration did not reach tol after {diag.outer_iterations} steps",
            "solve",
            files + ["trajectories.json", "diagnostics.json"],
        )
    return files + ["trajectories.json", "diagnostics.json"]


def cmd_optimize(sc, args, out, manifest):
    from .control import check_maximum_principle, optimize_control

    env = _setup(sc, args.seed)
    o = sc.optimizer
    iters = o.max_iters if args.iters is None else args.iters
    rate = o.rate if args.rate is None else args.rate
    if iters < 0 or not rate > 0:
        raise InvalidInput("--iters must be >= 0 and --rate > 0")
    res = optimize_control(
        env["model"], env["control"], env["atlas"], sc.N, env["grid"], env["seed"], rate, iters, o.tol,
        env["opts"], env["initial"],
    )
    mp = check_maximum_principle(
        env["model"], res.control, res.ensemble, res.flow, res.adjoint, B=o.bootstrap, seed=env["seed"]
    )
    write_control(res.control, os.path.join(out, "control.csv"))
    with open(os.path.join(out, "history.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "J", "stationarity"])
        for i, J in enumerate(res.history):
            st = res.stationarity[i] if i < len(res.stationarity) else ""
            wr.writerow([i, repr(float(J)), repr(float(st)) if st != "" else ""])
    write_json(os.path.join(out, "mp_report.json"), mp.to_dict())
    manifest["stages"]["optimize"] = {"iterations": res.iterations, "converged": res.converged, "J": res.history[-1]}
    return ["control.csv", "history.csv", "mp_report.json"]


def cmd_verify(sc, args, out, manifest):
    from .control import verify_convexity_certificate

    env = _setup(sc, args.seed)
    ctl = read_control(args.control, sc.control.lower, sc.control.upper) if args.control else env["control"]
    rivals = sc.optimizer.rivals if args.rivals is None else args.rivals
    if args.rival_files:
        rivals = [read_control(p, sc.control.lower, sc.control.upper) for p in args.rival_files]
    rep = verify_convexity_certificate(
        env["model"], ctl, env["atlas"], sc.N, env["grid"], env["seed"], rivals, env["opts"], env["initial"],
        B=sc.optimizer.bootstrap,
    )
    write_json(os.path.join(out, "certificate.json"), rep)
    manifest["stages"]["verify"] = {"verdict": rep["verdict"]}
    return ["certificate.json"]


def cmd_benchmark(args, out, manifest):
    from .benchmark import benchmark_lq

    rep = benchmark_lq(N=args.N, steps=args.steps, seed=args.seed if args.seed is not None else 7, T=args.T)
    write_json(os.path.join(out, "benchmark.json"), rep)
    manifest["stages"]["benchmark"] = {"passed": rep["passed"]}
    if not rep["passed"]:
        raise NonConvergence("benchmark thresholds not met: " + "; ".join(rep["notes"]), "benchmark", ["benchmark.json"])
    return ["benchmark.json"]


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="hetfbsde", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", required=True)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)

    common(sub.add_parser("check", help="certify the smallness conditions"))
    common(sub.add_parser("solve", help="solve the FBSDE for the scenario control"))
    op = sub.add_parser("optimize", help="gradient descent on the control")
    common(op)
    op.add_argument("--iters", type=int, default=None)
    op.add_argument("--rate", type=float, default=None)
    vp = sub.add_parser("verify", help="empirical verification of a control table")
    common(vp)
    vp.add_argument("--control", default=None)
    vp.add_argument("--rivals", type=int, default=None)
    vp.add_argument("--rival-files", nargs="*", default=None)
    bp = sub.add_parser("benchmark-lq", help="linear-quadratic benchmark")
    common(bp, scenario=False)
    bp.add_argument("--N", type=int, default=2000)
    bp.add_argument("--steps", type=int, default=100)
    bp.add_argument("--T", type=float, default=1.0)
    return p


def _error(out, stage, code, message):
    try:
        os.makedirs(out, exist_ok=True)
        write_json(os.path.join(out, "error.json"), {"stage": stage, "code": code, "message": message})
    except OSError:
        pass
    print(f"error [{stage}]: {message}", file=sys.stderr)
    return code


def run_cli(argv=None):
    from .scenario import load_scenario

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    out = args.out or "."
    stage = "scenario"
    manifest = {"command": args.command, "code_version": code_version(), "stages": {}}
    started = time.time()
    try:
        sc = None
        if args.command != "benchmark-lq":
            sc = load_scenario(args.scenario)
            out = args.out or sc.output.dir
            manifest["scenario_hash"] = sc.hash
            manifest["seed"] = sc.seed if args.seed is None else args.seed
        else:
            manifest["seed"] = 7 if args.seed is None else args.seed
            if args.N < 1 or args.steps < 1 or not args.T > 0:
                raise InvalidInput("benchmark needs N >= 1, steps >= 1 and T > 0")
        os.makedirs(out, exist_ok=True)
        stage = args.command
        handler = {"check": cmd_check, "solve": cmd_solve, "optimize": cmd_optimize, "verify": cmd_verify}
        if args.command == "benchmark-lq":
            files = cmd_benchmark(args, out, manifest)
        else:
            files = handler[args.command](sc, args, out, manifest)
        code = EXIT_OK
    except InvalidInput as exc:
        return _error(out, stage, EXIT_INVALID, str(exc))
    except NonConvergence as exc:
        files, code = exc.files, _error(out, exc.stage, EXIT_NONCONVERGED, str(exc))
    except DivergenceError as exc:
        return _error(out, exc.stage or stage, EXIT_NONCONVERGED, str(exc))
    except Exception as exc:  # internal failure
        return _error(out, stage, EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")
    manifest["started"] = started
    manifest["finished"] = time.time()
    manifest["outputs"] = sorted(set(files) | ({"error.json"} if code else set()))
    write_json(os.path.join(out, "manifest.json"), manifest)
    return code


def main():
    sys.exit(run_cli())
