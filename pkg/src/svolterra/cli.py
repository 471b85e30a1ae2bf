"""Experiment runner: kernel reports, solver runs, acceptance suite.

Subcommands
-----------
kernel    classify a configured kernel and write the report JSON
forward   solve a named forward problem (plus a resolution study)
backward  solve a named backward problem, dump Y/Z tables and residuals
control   duality / stationarity / optimizer reports for named instances
suite     run the acceptance criteria and emit a summary

Configs are JSON documents; every run writes a report whose content is a
deterministic function of (config, seed) apart from the timing block.
Exit code 0 means every requested check passed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import acceptance as acc
from . import backward as bwd
from . import control as ctl
from . import delay as dly
from . import forward as fwd
from . import kernels as K
from . import registry as reg
from .lattice import Tree
from .special import mittag_leffler


class ConfigError(ValueError):
    pass


def _load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})")


def _require(cfg, path, typ, predicate=None, what=""):
    node = cfg
    for part in path.split(".")[:-1]:
        node = node.get(part, {}) if isinstance(node, dict) else {}
    key = path.split(".")[-1]
    if not isinstance(node, dict) or key not in node:
        raise ConfigError(f"config.{path}: missing ({what or typ.__name__})")
    val = node[key]
    if typ is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, typ):
        raise ConfigError(f"config.{path}: expected {typ.__name__}, "
                          f"got {type(val).__name__}")
    if predicate is not None and not predicate(val):
        raise ConfigError(f"config.{path}: invalid value {val!r} ({what})")
    return val


def _tree_from_config(cfg, default_m=1):
    N = _require(cfg, "tree.N", int, lambda v: v >= 1, "positive step count")
    T = _require(cfg, "tree.T", float, lambda v: v > 0, "positive horizon")
    m = cfg.get("tree", {}).get("m", default_m)
    d = cfg.get("tree", {}).get("d", 1)
    return Tree(N=N, T=T, m=int(m), d=int(d))


def _config_hash(cfg) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _report_skeleton(cfg, seed):
    return {
        "tool_version": __version__,
        "config_hash": _config_hash(cfg),
        "seed": seed,
        "inputs": cfg,
        "outputs": {},
        "residuals": {},
        "timings": {},
    }


def _write_report(report, out_dir, name):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(report, indent=2, sort_keys=True,
                               default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf"
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


class _Budget:
    def __init__(self, seconds):
        self.start = time.perf_counter()
        self.seconds = seconds

    @property
    def exceeded(self):
        return self.seconds is not None and \
            time.perf_counter() - self.start > self.seconds


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_kernel(cfg, args):
    spec = _require(cfg, "kernel.name", str)
    kern = K.kernel_from_config(cfg["kernel"])
    eps_grid = cfg["kernel"].get("eps_grid", list(K.DEFAULT_EPS_GRID))
    cap = cfg["kernel"].get("cap", K.DEFAULT_BREAKPOINT_CAP)
    report = _report_skeleton(cfg, args.seed)
    budget = _Budget(args.budget_seconds)
    t0 = time.perf_counter()
    rep = K.classify(kern, eps_grid=tuple(eps_grid), cap=int(cap))
    report["timings"]["classify_s"] = time.perf_counter() - t0
    report["outputs"]["classification"] = rep.to_dict()
    if budget.exceeded:
        report["outputs"]["partial"] = True
    path = _write_report(report, args.out, f"kernel_{spec}.json")
    print(f"wrote {path}")
    return 0


def cmd_forward(cfg, args):
    name = _require(cfg, "forward.problem", str,
                    lambda v: v in reg.FORWARD_PROBLEMS,
                    f"one of {sorted(reg.FORWARD_PROBLEMS)}")
    params = {k: v for k, v in cfg["forward"].items() if k != "problem"}
    n_list = params.pop("N_list", None)
    params.setdefault("horizon", float(cfg["tree"]["T"]))
    report = _report_skeleton(cfg, args.seed)
    budget = _Budget(args.budget_seconds)
    ok = True

    if n_list:
        # resolution study on the deterministic lattice
        rows = []
        prev_err = None
        for N in n_list:
            if budget.exceeded:
                report["outputs"]["partial"] = True
                break
            tree = Tree(N=int(N), T=cfg["tree"]["T"], m=0)
            problem = reg.FORWARD_PROBLEMS[name](**params)
            sol = fwd.solve_lattice(problem, tree)
            if name == "fractional_relaxation":
                alpha = params.get("alpha", 0.75)
                lam = params.get("lam", -1.0)
                err = max(abs(sol.X[i][0, 0]
                              - mittag_leffler(alpha, 1.0,
                                               lam * tree.times[i] ** alpha))
                          for i in range(tree.N + 1))
            else:
                err = float("nan")
            rows.append([N, err])
            if math.isfinite(err):
                if prev_err is not None and not err < prev_err:
                    ok = False
                prev_err = err
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / f"forward_{name}_convergence.csv",
                   ["N", "sup_error"], rows)
        report["outputs"]["convergence"] = {str(n): e for n, e in rows}
    else:
        tree = _tree_from_config(cfg)
        problem = reg.FORWARD_PROBLEMS[name](**params)
        sol = fwd.solve_lattice(problem, tree)
        report["residuals"]["equation"] = sol.diagnostics["residual"]
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        sol.X.dump_csv(out / f"forward_{name}_solution.csv")

    _write_report(report, args.out, f"forward_{name}.json")
    print(f"forward {name}: {'ok' if ok else 'NOT monotone'}")
    return 0 if ok else 1


def cmd_backward(cfg, args):
    name = _require(cfg, "backward.problem", str,
                    lambda v: v in reg.BACKWARD_PROBLEMS,
                    f"one of {sorted(reg.BACKWARD_PROBLEMS)}")
    tree = _tree_from_config(cfg)
    params = {k: v for k, v in cfg["backward"].items()
              if k not in ("problem", "method", "tol")}
    method = args.method or cfg["backward"].get("method", "fixed_point")
    tol = args.tol or cfg["backward"].get("tol", 1e-12)
    problem = reg.BACKWARD_PROBLEMS[name](tree, **params)
    report = _report_skeleton(cfg, args.seed)
    budget = _Budget(args.budget_seconds)
    t0 = time.perf_counter()
    sol = bwd.solve_bsvie(problem, tree, method=method, tol=float(tol))
    report["timings"]["solve_s"] = time.perf_counter() - t0
    if budget.exceeded:
        report["outputs"]["partial"] = True
    report["residuals"]["m_condition"] = \
        sol.diagnostics["m_condition_residual"]
    report["residuals"]["equation"] = sol.diagnostics["equation_residual"]
    report["outputs"]["sweeps"] = sol.diagnostics["sweeps"]
    report["outputs"]["method"] = method
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sol.Y.dump_csv(out / f"backward_{name}_Y.csv")
    sol.Z.dump_csv(out / f"backward_{name}_Z.csv")
    _write_report(report, args.out, f"backward_{name}.json")
    ok = report["residuals"]["m_condition"] < 1e-10
    print(f"backward {name} [{method}]: m-residual "
          f"{report['residuals']['m_condition']:.2e}")
    return 0 if ok else 1


def cmd_control(cfg, args):
    name = _require(cfg, "control.instance", str,
                    lambda v: v in reg.CONTROL_INSTANCES,
                    f"one of {sorted(reg.CONTROL_INSTANCES)}")
    tree = _tree_from_config(cfg)
    block = cfg["control"]
    report = _report_skeleton(cfg, args.seed)
    budget = _Budget(args.budget_seconds)
    rng = np.random.default_rng(args.seed)
    ok = True

    if name == "lq":
        cp = reg.lq_instance()
        u = ctl.constant_control(tree, [block.get("u0", 0.3)])
        v = ctl.AdaptedProcess(tree, [0.5 * rng.normal(
            size=(tree.node_count(i), 1)) for i in range(tree.N + 1)])
        gap = ctl.duality_gap(cp, u, v, tree)
        u_bar, trace = ctl.projected_gradient_search(
            cp, u, tree, steps=int(block.get("steps", 200)),
            rate=float(block.get("rate", 0.5)))
        margin = ctl.check_stationarity(cp, u_bar, tree,
                                        probe_count=int(
                                            block.get("probes", 16)),
                                        seed=args.seed)
        report["outputs"].update({
            "duality_gap": gap,
            "stationarity_margin": margin,
            "final_cost": trace["cost"][-1],
            "gradient_norms": trace["grad_norm"][-5:],
        })
        ok = gap <= 1e-10 and margin >= -1e-6
    else:
        dp = reg.delay_lq_instance(delta=block.get("delta", 0.25))
        u = ctl.constant_control(tree, [block.get("u0", 0.3)])
        u_star, trace = dly.delay_projected_gradient_search(
            dp, u, tree, steps=int(block.get("steps", 120)),
            rate=float(block.get("rate", 0.4)))
        margin = dly.delay_mp_check(dp, u_star, tree,
                                    probe_count=int(block.get("probes", 8)),
                                    seed=args.seed)
        report["outputs"].update({
            "stationarity_margin": margin,
            "final_cost": trace["cost"][-1],
        })
        ok = margin >= -1e-6
    if budget.exceeded:
        report["outputs"]["partial"] = True
    _write_report(report, args.out, f"control_{name}.json")
    print(f"control {name}: margin {report['outputs'].get('stationarity_margin'):.2e}")
    return 0 if ok else 1


def cmd_suite(cfg, args):
    indices = cfg.get("suite", {}).get("criteria")
    budget = _Budget(args.budget_seconds)
    results = []
    for crit in acc.ALL_CRITERIA:
        if indices is not None and crit.index not in indices:
            continue
        if budget.exceeded:
            print("budget exhausted; remaining criteria skipped")
            break
        res = crit()
        results.append(res)
        print(res.line)
    report = _report_skeleton(cfg, args.seed)
    report["outputs"]["criteria"] = [
        {"index": r.index, "name": r.name, "passed": r.passed,
         "details": r.details} for r in results]
    report["timings"]["per_criterion_s"] = {
        str(r.index): r.elapsed for r in results}
    report["outputs"]["all_passed"] = all(r.passed for r in results)
    report["outputs"]["partial"] = budget.exceeded
    _write_report(report, args.out, "suite.json")
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} criteria passed")
    return 0 if report["outputs"]["all_passed"] and results else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="svolterra",
        description="singular stochastic Volterra equation toolkit")
    parser.add_argument("--config", required=False, default=None,
                        help="path to the JSON experiment config")
    parser.add_argument("--out", default="reports",
                        help="output directory for reports and CSV tables "
                             "(CSV columns: see each table header)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--budget-seconds", type=float, default=None,
                        help="soft runtime budget; runs exceeding it "
                             "emit partial-result reports")
    parser.add_argument("--method", choices=["fixed_point", "block"],
                        default=None, help="backward solver method")
    parser.add_argument("--tol", type=float, default=None,
                        help="solver tolerance override")
    parser.add_argument("command",
                        choices=["kernel", "forward", "backward",
                                 "control", "suite"])
    return parser


_COMMANDS = {
    "kernel": cmd_kernel,
    "forward": cmd_forward,
    "backward": cmd_backward,
    "control": cmd_control,
    "suite": cmd_suite,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _load_config(args.config) if args.config is not None else {}
    try:
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
