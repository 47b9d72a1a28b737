"""Command-line driver: ``bhjb <subcommand> [options]``.

Exit codes: 0 success, 2 configuration or validation error (message names
the field), 3 numerical failure.  Every run writes ``resolved_config.json``
and ``report.json`` (deterministic) plus ``metadata.json`` (timestamps and
timings) to the output directory.
"""

import argparse
import datetime
import json
import os
import platform
import sys
import time

import numpy as np

from . import hjb, io, mc, presets
from ._kernels import USE_NUMBA
from .config import RunConfig, load_problem
from .cordes import certify
from .errors import BhjbError, ConfigError, DimensionError, IncompleteDataError, NumericalError, ValidationFailed
from .fields import PolicyField
from .grid import SpatialGrid
from .problem import validate_problem
from .reports import _jsonable
from .tree import ScenarioTree, validate_tree

SUBCOMMANDS = ("validate", "check-cordes", "solve", "simulate", "verify", "export-tree")


def _common(p):
    p.add_argument("--config", dest="problem", help="problem file (JSON)")
    p.add_argument("--preset", help=f"built-in problem: {', '.join(presets.PRESETS)}")
    p.add_argument("--tree", help="scenario tree file, or 'builtin' for the preset's own tree")
    p.add_argument("--run-config", help="resolved_config.json from an earlier run")
    p.add_argument("--out", help="output directory (default bhjb_out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker cap (fallback: BHJB_THREADS)")
    p.add_argument("--grid", type=int, nargs="+", help="grid nodes per axis")


def _scheme(p):
    p.add_argument("--theta", type=float)
    p.add_argument("--tol", dest="policy_iter_tol", type=float)
    p.add_argument("--max-iters", dest="max_policy_iters", type=int)
    p.add_argument("--override-cordes", action="store_true", default=None)
    p.add_argument("--cordes-case", choices=("auto", "i", "ii", "iii", "skip"))


def _mc(p):
    p.add_argument("-N", dest="N", type=int, help="number of paths")
    p.add_argument("--substeps", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="bhjb", description="Backward HJB solver on scenario trees")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check problem and tree")
    _common(p)

    p = sub.add_parser("check-cordes", help="sampled ellipticity / Cordes certification")
    _common(p)
    p.add_argument("--case", dest="cordes_case", choices=("auto", "i", "ii", "iii"))
    p.add_argument("--samples", dest="cordes_samples", type=int)

    p = sub.add_parser("solve", help="solve the HJB equation and export the policy")
    _common(p)
    _scheme(p)
    p.add_argument("--dump-fields", nargs="?", const=True, default=None,
                   help="also write value.csv (optionally into the given directory)")

    p = sub.add_parser("simulate", help="Monte-Carlo cost of a policy")
    _common(p)
    _scheme(p)
    _mc(p)
    p.add_argument("--policy", help="policy CSV from 'solve' (default: solve first)")
    p.add_argument("--paths-csv", action="store_true", help="write per-path costs")

    p = sub.add_parser("verify", help="HJB residual and Monte-Carlo duality check")
    _common(p)
    _scheme(p)
    _mc(p)

    p = sub.add_parser("export-tree", help="write the scenario tree as JSON")
    _common(p)
    return parser


# --------------------------------------------------------------------------
# resolution


class Context:
    def __init__(self, cfg, problem, tree, grid, cordes):
        self.cfg = cfg
        self.problem = problem
        self.tree = tree
        self.grid = grid
        self.cordes = cordes


_RUN_KEYS = ("theta", "policy_iter_tol", "max_policy_iters", "N", "substeps")


def resolve(args):
    base = {}
    if getattr(args, "run_config", None):
        base = RunConfig.load(args.run_config).to_dict()
    explicit = {k: v for k, v in vars(args).items() if v is not None and k in RunConfig.__dataclass_fields__}
    if explicit.get("preset") and base.get("problem"):
        base["problem"] = None
    if explicit.get("problem") and base.get("preset"):
        base["preset"] = None
    merged = {**base, **explicit}
    if isinstance(merged.get("dump_fields"), str):
        merged["dump_fields"] = True
    if "threads" not in explicit and "threads" not in base:
        env = os.environ.get("BHJB_THREADS")
        if env:
            try:
                merged["threads"] = int(env)
            except ValueError:
                raise ConfigError(f"BHJB_THREADS={env!r} is not an integer", field="threads") from None

    preset_name = merged.get("preset")
    problem_path = merged.get("problem")
    if preset_name is None and problem_path is None:
        raise ConfigError("give --preset or --config", field="config")
    if preset_name is not None and problem_path is not None:
        raise ConfigError("choose either a preset or a problem file, not both", field="preset")

    cordes = {"case": None, "bbar": None, "case_iii": None}
    inline_tree = None
    if preset_name is not None:
        problem, builtin_tree = presets.preset(preset_name)
        defaults = {k: problem.meta[k] for k in _RUN_KEYS if k in problem.meta}
    else:
        problem, inline_tree, cordes, defaults = load_problem(problem_path)
        builtin_tree = inline_tree
    for k, v in defaults.items():
        if k not in explicit and k not in base:
            merged[k] = v

    tree_arg = merged.get("tree")
    if tree_arg is None:
        if preset_name is not None and presets.is_nontrivial(preset_name):
            raise ConfigError(f"preset {preset_name!r} has a non-trivial scenario tree; pass --tree <file> or "
                              "--tree builtin", field="tree")
        if builtin_tree is None:
            raise ConfigError("no scenario tree: pass --tree <file> or add 'tree' to the problem file", field="tree")
        tree = builtin_tree
    elif tree_arg == "builtin":
        if builtin_tree is None:
            raise ConfigError("the problem file has no inline tree for --tree builtin", field="tree")
        tree = builtin_tree
    else:
        tree = ScenarioTree.load(tree_arg)

    cfg = RunConfig(**merged)
    shape = cfg.grid or problem.meta.get("grid") or [101] * problem.dimension
    if len(shape) == 1 and problem.dimension == 2:
        shape = shape * 2
    if len(shape) != problem.dimension:
        raise ConfigError(f"grid has {len(shape)} axes, the domain has {problem.dimension}", field="grid")
    grid = SpatialGrid.from_domain(problem.domain, tuple(shape))
    return Context(cfg, problem, tree, grid, cordes)


# --------------------------------------------------------------------------
# subcommands


def _validate(ctx):
    prep = validate_problem(ctx.problem, ctx.cfg.cordes_samples, z_values=ctx.tree.z, grid=ctx.grid,
                            seed=ctx.cfg.seed)
    trep = validate_tree(ctx.tree)
    lines = [prep.summary(), trep.summary()]
    report = {"problem": prep.to_dict(), "tree": trep.to_dict()}
    ok = prep.passed and trep.passed
    lines.append("VALID" if ok else "INVALID")
    if not ok:
        raise ValidationFailed("\n".join(lines), report=report)
    return report, lines


def _cordes_kwargs(ctx):
    kw = {}
    if ctx.cordes.get("bbar") is not None:
        bbar_fn = ctx.cordes["bbar"]
        coef = ctx.problem.coefficients
        kw["bbar"] = lambda x, z, t: bbar_fn(x, 0.0, z, t)
        kw["bhat"] = lambda x, v, z, t: coef.eval_diffusion(x, v, z, t) - kw["bbar"](x, z, t)
    if ctx.cordes.get("case_iii") is not None:
        from .cordes import CaseIIIParams

        kw["case_iii"] = CaseIIIParams(*ctx.cordes["case_iii"])
    return kw


def _check_cordes(ctx):
    case = ctx.cfg.cordes_case if ctx.cfg.cordes_case != "skip" else "auto"
    if case == "auto" and ctx.cordes.get("case"):
        case = ctx.cordes["case"]
    rep = certify(ctx.problem, case=case, budget=ctx.cfg.cordes_samples, z_values=hjb._cordes_z(ctx.tree),
                  **_cordes_kwargs(ctx))
    return {"cordes": rep.to_dict()}, [rep.line()]


def _solve_core(ctx):
    cfg = ctx.cfg
    kw = _cordes_kwargs(ctx)
    V, U, rep = hjb.solve_hjb(ctx.problem, ctx.tree, ctx.grid, theta=cfg.theta, policy_iter_tol=cfg.policy_iter_tol,
                              max_policy_iters=cfg.max_policy_iters, cordes_case=cfg.cordes_case,
                              override_cordes=cfg.override_cordes, cordes_budget=cfg.cordes_samples,
                              threads=cfg.threads, **kw)
    return V, U, rep


def _solve(ctx, out, dump_dir=None):
    V, U, rep = _solve_core(ctx)
    value = hjb.value_at_initial(V, ctx.problem.initial_law)
    io.write_policy_csv(os.path.join(out, "policy.csv"), U)
    if ctx.cfg.dump_fields:
        io.write_field_csv(os.path.join(dump_dir or out, "value.csv"), V.values, ctx.tree, ctx.grid)
    report = {"value_at_initial": value, "hjb": rep.to_dict(), "grid": list(ctx.grid.shape),
              "tree_nodes": ctx.tree.n_nodes}
    lines = [f"value_at_initial = {value:.10g}", f"residual = {rep.residual:.3e}",
             f"policy iterations: max {rep.max_iterations}, total {int(rep.iterations.sum())}",
             f"monotone = {rep.monotone}"]
    return report, lines, rep.wall_time


def _policy_for(ctx):
    if ctx.cfg.policy:
        return io.read_policy_csv(ctx.cfg.policy, ctx.tree, ctx.grid, len(ctx.problem.controls))
    if len(ctx.problem.controls) == 1:
        return PolicyField.constant(ctx.tree, ctx.grid, 1)
    return _solve_core(ctx)[1]


def _simulate(ctx, out, paths_csv=False):
    cfg = ctx.cfg
    pol = _policy_for(ctx)
    ens = mc.simulate_paths(ctx.problem, ctx.tree, pol, cfg.N, substeps=cfg.substeps, seed=cfg.seed)
    est = mc.estimate_cost(ens)
    if paths_csv:
        with open(os.path.join(out, "paths.csv"), "w") as fh:
            fh.write("path,cost,tau,killed\n")
            for i, (c, t, k) in enumerate(zip(ens.cost, ens.tau, ens.killed)):
                fh.write(f"{i},{c:.17g},{t:.17g},{int(k)}\n")
    report = {"cost": est.to_dict(), "substeps": cfg.substeps, "killed_fraction": float(ens.killed.mean())}
    return report, [f"cost = {est.mean:.10g} +/- {est.stderr:.3g} (N={est.n}, seed={cfg.seed})"]


class VerificationFailed(NumericalError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def _verify(ctx):
    cfg = ctx.cfg
    V, U, rep = _solve_core(ctx)
    res = hjb.verify_hjb_residual(V, U, ctx.problem, ctx.tree, ctx.grid, theta=cfg.theta, seed=cfg.seed)
    dual = mc.duality_gap(ctx.problem, ctx.tree, ctx.grid, U, cfg.N, seed=cfg.seed, substeps=cfg.substeps,
                          theta=cfg.theta)
    res_ok = res.residual <= cfg.policy_iter_tol and res.vi_passed
    report = {"residual": res.to_dict(), "duality": dual.to_dict(), "passed": bool(res_ok and dual.passed)}
    lines = [f"{'PASS' if res_ok else 'FAIL'} residual = {res.residual:.3e} (tol {cfg.policy_iter_tol:g}), "
             f"variational inequality violation = {res.vi_violation:.3e}",
             f"{'PASS' if dual.passed else 'FAIL'} duality z = {dual.z:.3f}, MC = {dual.mc.mean:.6g} +/- "
             f"{dual.mc.stderr:.2g}, PDE = {dual.pde_value:.6g}, allowance = {dual.allowance:.2g}"]
    if not report["passed"]:
        raise VerificationFailed("\n".join(lines), report)
    return report, lines


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def run(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0

    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    t0 = time.perf_counter()
    out = None
    try:
        ctx = resolve(args)
        out = ctx.cfg.out
        os.makedirs(out, exist_ok=True)
        ctx.cfg.save(os.path.join(out, "resolved_config.json"))
        cmd = args.command
        if cmd == "validate":
            report, lines = _validate(ctx)
        elif cmd == "check-cordes":
            report, lines = _check_cordes(ctx)
        elif cmd == "solve":
            dump = args.dump_fields if isinstance(args.dump_fields, str) else None
            if dump:
                os.makedirs(dump, exist_ok=True)
            report, lines, _ = _solve(ctx, out, dump)
        elif cmd == "simulate":
            report, lines = _simulate(ctx, out, args.paths_csv)
        elif cmd == "verify":
            report, lines = _verify(ctx)
        else:
            path = os.path.join(out, "tree.json")
            ctx.tree.save(path)
            report, lines = {"tree": path, "nodes": ctx.tree.n_nodes}, [f"wrote {path} ({ctx.tree.n_nodes} nodes)"]
        report = {"command": cmd, **report}
        code = 0
    except (ConfigError, ValidationFailed, DimensionError, IncompleteDataError) as exc:
        field = getattr(exc, "field", None)
        print(f"error: {exc}" + (f" [field: {field}]" if field else ""), file=stderr)
        _finish(out, {"command": args.command, "error": str(exc), "field": field,
                      "report": getattr(exc, "report", None)}, started, t0)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=stderr)
        _finish(out, {"command": args.command, "error": str(exc), "report": getattr(exc, "report", None)},
                started, t0)
        return 3
    except BhjbError as exc:
        print(f"error: {exc}", file=stderr)
        return 2
    for line in lines:
        print(line, file=stdout)
    _finish(out, report, started, t0)
    return code


def _finish(out, report, started, t0):
    if out is None:
        return
    if hasattr(report.get("report"), "to_dict"):
        report["report"] = report["report"].to_dict()
    _write_json(os.path.join(out, "report.json"), report)
    meta = {"started": started, "elapsed_seconds": time.perf_counter() - t0, "numba": USE_NUMBA,
            "python": platform.python_version(), "numpy": np.__version__}
    _write_json(os.path.join(out, "metadata.json"), meta)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
