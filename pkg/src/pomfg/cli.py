"""Command-line entry point: pomfg {validate,solve,equilibrium,simulate,verify,oracle}.

Exit codes: 0 success, 1 domain violation or failed check, 2 input error,
3 resource limit.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, oracles
from .config import ConfigError, LoadedModel, load_config
from .equilibrium import EquilibriumConfig, find_equilibrium
from .filtering import Belief, ZeroProbabilityBranch, bayes_update
from .flow import MeasureFlow, read_flow_csv, recursive_from_initial, write_flow_csv
from .model import ModelValidationError, validate
from .simulator import (DEFAULT_DEVIATIONS, SPLITTING_RULE, WORKERS_ENV, MeanFieldObservationError,
                        SimConfig, deviation_policies, empirical_convergence, estimate_eps,
                        run_replication, simulate_shared)
from .solver import NODE_BUDGET, TERMINAL_MODES, NodeBudgetExceeded, optimality_residual, \
    solve_pomdp, write_policy_csv
from .verify import run_checks, write_csv

EXIT_OK, EXIT_VIOLATION, EXIT_INPUT, EXIT_RESOURCE = 0, 1, 2, 3
log = logging.getLogger("pomfg")


class InputError(Exception):
    pass


def r12(v):
    """Round to 12 significant digits for printing and JSON output."""
    if isinstance(v, dict):
        return {k: r12(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [r12(x) for x in v]
    if isinstance(v, np.ndarray):
        return r12(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(f"{float(v):.12g}")
    return v


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(r12(payload), indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, args, loaded: LoadedModel = None, seeds=None, extra=None) -> None:
    echo = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
            if k not in ("func",)}
    payload = {
        "subcommand": args.command,
        "config": echo,
        "model_digest": loaded.digest if loaded else None,
        "model_config": loaded.raw if loaded else None,
        "seeds": seeds or {},
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        payload.update(extra)
    write_json(out / "manifest.json", payload)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> LoadedModel:
    return load_config(args.model)


def _horizon(args, loaded: LoadedModel) -> int:
    T = args.horizon if args.horizon is not None else loaded.horizon
    if T is None:
        raise InputError("no --horizon given and the config has no default horizon")
    if T < 0:
        raise InputError("--horizon must be nonnegative")
    return int(T)


def _flow(args, loaded: LoadedModel, T: int) -> MeasureFlow:
    source = getattr(args, "flow", None) or "recursive-from-initial"
    if source == "recursive-from-initial":
        return recursive_from_initial(loaded.model, T)
    try:
        flow = read_flow_csv(source, loaded.model)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read flow {source}: {exc}") from None
    if flow.measures.shape[0] < T + 2:
        raise InputError(f"flow {source} has {flow.measures.shape[0]} entries; horizon {T} needs {T + 2}")
    return MeasureFlow(flow.measures[: T + 2])


def _damping(value: str):
    if value == "fictitious":
        return value
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError("damping is a number in (0, 1] or 'fictitious'") from None


def cmd_validate(args) -> int:
    try:
        loaded = load_config(args.model, check=False)
        problems = validate(loaded.model)
    except ModelValidationError as exc:
        problems = [str(exc)]
    for p in problems:
        print(f"violation: {p}")
    if not problems:
        print(f"{args.model}: valid ({loaded.model.n_states} states, {loaded.model.n_obs} observations, "
              f"{loaded.model.n_actions} actions, digest {loaded.digest[:16]})")
    return EXIT_VIOLATION if problems else EXIT_OK


def cmd_solve(args) -> int:
    loaded = _load(args)
    T = _horizon(args, loaded)
    flow = _flow(args, loaded, T)
    out = _out_dir(args)
    table, policy = solve_pomdp(loaded.model, flow, T, args.terminal_mode, node_budget=args.node_budget)
    lower = solve_pomdp(loaded.model, flow, T, "zero", tree=table.tree)[0].root_value
    upper = solve_pomdp(loaded.model, flow, T, "tail_upper", tree=table.tree)[0].root_value
    gap = optimality_residual(policy, table)
    root_action = int(policy.actions[0][0])
    report = {"root_value": table.root_value, "terminal_mode": args.terminal_mode,
              "value_bracket": [lower, upper], "root_action": root_action,
              "optimality_residual": gap, "tree_nodes": table.tree.n_nodes, "horizon": T}
    write_json(out / "report.json", report)
    write_policy_csv(policy, out / "policy.csv")
    write_flow_csv(flow, out / "flow.csv")
    write_manifest(out, args, loaded, extra={"optimality_residual": r12(gap)})
    print(f"root value {table.root_value:.12g}  bracket [{lower:.12g}, {upper:.12g}]  "
          f"root action {root_action}  optimality residual {gap:.12g}")
    return EXIT_OK


def cmd_equilibrium(args) -> int:
    loaded = _load(args)
    T = _horizon(args, loaded)
    out = _out_dir(args)
    cfg = EquilibriumConfig(T, damping=args.damping, tol=args.tol, max_iters=args.max_iters,
                            terminal_mode=args.terminal_mode)
    rep = find_equilibrium(loaded.model, cfg)
    report = {"converged": rep.converged, "residual": rep.residual, "best_iteration": rep.best_iteration,
              "iterations": len(rep.residual_history), "optimality_residual": rep.optimality_residual,
              "value_bracket": list(rep.value_bracket), "root_value": rep.values.root_value,
              "monotonicity": rep.monotonicity, "horizon": T, "damping": args.damping}
    write_json(out / "report.json", report)
    write_flow_csv(rep.flow, out / "flow.csv")
    write_policy_csv(rep.policy, out / "policy.csv")
    write_csv(out / "residuals.csv", ["iteration", "residual"], list(enumerate(rep.residual_history)))
    write_manifest(out, args, loaded)
    print(f"converged {rep.converged}  residual {rep.residual:.12g} (iteration {rep.best_iteration})  "
          f"bracket [{rep.value_bracket[0]:.12g}, {rep.value_bracket[1]:.12g}]")
    return EXIT_OK if rep.converged else EXIT_VIOLATION


def _deviations(names_arg: str):
    if names_arg in ("", "default", "all"):
        return DEFAULT_DEVIATIONS
    names = tuple(s.strip() for s in names_arg.split(",") if s.strip())
    unknown = [n for n in names if n not in DEFAULT_DEVIATIONS]
    if unknown:
        raise InputError(f"unknown deviations {unknown}; choose from {', '.join(DEFAULT_DEVIATIONS)}")
    return names


def cmd_simulate(args) -> int:
    loaded = _load(args)
    T = _horizon(args, loaded)
    names = _deviations(args.deviations)
    if not loaded.model.observation_mean_field_free:
        raise MeanFieldObservationError(
            "observation kernel depends on the mean-field term; finite-N simulation is not defined for it")
    out = _out_dir(args)
    if args.flow:
        flow = _flow(args, loaded, T)
        table, policy = solve_pomdp(loaded.model, flow, T)
    else:
        rep = find_equilibrium(loaded.model, EquilibriumConfig(T, tol=args.tol))
        flow, policy = rep.flow, rep.policy
    m = loaded.model
    base = SimConfig(args.N[0], args.reps, T, seed=args.seed, workers=args.threads)
    runs = []
    for N in args.N:
        sr = simulate_shared(m, policy, flow, SimConfig(N, args.reps, T, seed=args.seed, workers=args.threads))
        runs.append({"N": N, "J_hat": sr.J_hat, "stderr": sr.J_se, "tail_bracket": list(sr.tail_bracket),
                     "fallbacks": sr.fallbacks, "decisions": sr.decisions,
                     "fallback_flagged": sr.fallback_flagged})
    sample = run_replication(m, policy, flow, args.N[0], T, args.seed, 0)
    rows, onestep = empirical_convergence(m, policy, flow, base, args.N)
    write_csv(out / "convergence.csv", ["t", "N", "f_id", "estimate", "stderr"],
              [(r.t, r.N, r.f_id, r.estimate, r.stderr) for r in rows])
    write_csv(out / "onestep.csv", ["t", "N", "f_id", "estimate", "stderr", "bound"],
              [(r.t, r.N, r.f_id, r.estimate, r.stderr, b) for r, b in onestep])
    pts = estimate_eps(m, policy, flow, deviation_policies(m, flow, T, names), base, args.N)
    write_csv(out / "eps_curve.csv", ["N", "eps_hat", "ci_lo", "ci_hi"],
              [(p.N, p.eps_hat, p.ci_lo, p.ci_hi) for p in pts])
    report = {"runs": runs, "eps": [{"N": p.N, "eps_hat": p.eps_hat, "stderr": p.se,
                                     "best_deviation": p.best_deviation,
                                     "gaps": {k: list(v) for k, v in p.gaps.items()}} for p in pts],
              "eps_is_lower_bound": True, "deviations": list(names), "splitting_rule": SPLITTING_RULE,
              "seed": args.seed, "reps": args.reps, "horizon": T,
              "empirical_measures_replication_0": {"N": args.N[0], "measures": sample.empirical}}
    write_json(out / "report.json", report)
    write_manifest(out, args, loaded, seeds={"master": args.seed})
    for r in runs:
        print(f"N={r['N']}: J_hat {r['J_hat']:.12g} +- {r['stderr']:.12g}")
    for p in pts:
        print(f"N={p.N}: eps_hat {p.eps_hat:.12g}  CI [{p.ci_lo:.12g}, {p.ci_hi:.12g}]  ({p.best_deviation})")
    return EXIT_OK


def cmd_verify(args) -> int:
    out = _out_dir(args)
    selected = set(args.criteria) if args.criteria else None
    results = run_checks(out, args.seed, args.threads, selected, determinism=not args.no_determinism,
                         log=print)
    write_manifest(out, args, seeds={"master": args.seed},
                   extra={"criteria": {str(r.number): bool(r.passed) for r in results}})
    failed = [r.number for r in results if not r.passed]
    print("all criteria passed" if not failed else f"failed criteria: {failed}")
    return EXIT_VIOLATION if failed else EXIT_OK


def cmd_oracle(args) -> int:
    loaded = _load(args)
    m = loaded.model
    T = _horizon(args, loaded)
    out = Path(args.out) if args.out else None
    payload = {}
    flow = recursive_from_initial(m, max(T, len(args.actions or [])))
    if args.filter:
        acts, obs = args.actions or [], args.observations or []
        if len(acts) != len(obs):
            raise InputError("--actions and --observations need the same length")
        z = Belief(0, m.initial)
        rows = []
        for t in range(len(acts) + 1):
            exact = oracles.filter_by_enumeration(m, flow, acts[:t], obs[:t])
            rows.append({"t": t, "filter": z.weights, "enumeration": exact})
            print(f"t={t} filter {' '.join(f'{v:.12g}' for v in z.weights)}  "
                  f"enumeration {' '.join(f'{v:.12g}' for v in exact)}")
            if t < len(acts):
                try:
                    z = bayes_update(m, z, acts[t], obs[t], flow[t], flow[t + 1])
                except ZeroProbabilityBranch as exc:
                    print(f"t={t + 1}: {exc}")
                    return EXIT_VIOLATION
        payload["filter"] = rows
    if args.solver:
        if m.n_actions ** oracles.n_decision_points(m.n_obs, T) > 2 ** 20:
            raise InputError("exhaustive enumeration is limited to 2**20 policies; lower --horizon")
        value = solve_pomdp(m, flow, T)[0].root_value
        best, _, values = oracles.exhaustive_minimum(m, flow, T)
        payload["solver"] = {"horizon": T, "solver_value": value, "oracle_value": best,
                             "policies": int(values.shape[0]), "abs_diff": abs(value - best)}
        print(f"solver {value:.12g}  exhaustive minimum over {values.shape[0]} policies {best:.12g}")
        if abs(value - best) > 1e-9:
            return EXIT_VIOLATION
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "oracle.json", payload)
        write_manifest(out, args, loaded)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pomfg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_arg(sp):
        sp.add_argument("--model", required=True, type=Path, help="TOML model config")

    sp = sub.add_parser("validate", help="check a model config")
    model_arg(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("solve", help="solve the belief-state MDP against a fixed flow")
    model_arg(sp)
    sp.add_argument("--flow", default="recursive-from-initial",
                    help="flow CSV (t,state,weight) or 'recursive-from-initial'")
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--terminal-mode", choices=TERMINAL_MODES, default="zero")
    sp.add_argument("--node-budget", type=int, default=NODE_BUDGET)
    sp.add_argument("--out", default="out/solve")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("equilibrium", help="search for a mean-field equilibrium")
    model_arg(sp)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--damping", type=_damping, default=0.5, help="step in (0, 1] or 'fictitious'")
    sp.add_argument("--max-iters", type=int, default=500)
    sp.add_argument("--terminal-mode", choices=TERMINAL_MODES, default="zero")
    sp.add_argument("--out", default="out/equilibrium")
    sp.set_defaults(func=cmd_equilibrium)

    sp = sub.add_parser("simulate", help="finite-N simulation, deviation gaps and convergence table")
    model_arg(sp)
    sp.add_argument("--N", type=int, nargs="+", default=[5, 25, 125])
    sp.add_argument("--reps", type=int, default=200)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--deviations", default="default",
                    help=f"comma list from {', '.join(DEFAULT_DEVIATIONS)}")
    sp.add_argument("--flow", default=None, help="flow CSV to use instead of computing an equilibrium")
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${WORKERS_ENV} or 1)")
    sp.add_argument("--out", default="out/simulate")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("verify", help="run the acceptance suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--criteria", type=int, nargs="+", help="subset of criterion numbers")
    sp.add_argument("--no-determinism", action="store_true", help="skip the rerun comparison")
    sp.add_argument("--out", default="out/verify")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("oracle", help="brute-force filter and solver checks on tiny models")
    model_arg(sp)
    sp.add_argument("--filter", action="store_true")
    sp.add_argument("--solver", action="store_true")
    sp.add_argument("--actions", type=int, nargs="*")
    sp.add_argument("--observations", type=int, nargs="*")
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ModelValidationError, MeanFieldObservationError) as exc:
        print(f"violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (NodeBudgetExceeded, MemoryError) as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE


if __name__ == "__main__":
    sys.exit(main())
