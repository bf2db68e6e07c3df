"""The acceptance suite: each check returns a Criterion and writes CSV artifacts.

All randomness comes from ``seed``; numbers in CSVs use 12 significant
digits, and no wall-clock quantity is written, so two runs with the same seed
produce identical files whatever the worker count.
"""

from __future__ import annotations

import csv
import filecmp
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import oracles
from .config import BUNDLED, load_bundled
from .equilibrium import EquilibriumConfig, find_equilibrium
from .filtering import Belief, ZeroProbabilityBranch, bayes_update
from .flow import (MeasureFlow, barycenter, moment_check, push_forward, recursive_from_initial,
                   state_action_flow, write_flow_csv)
from .model import build_tabular
from .simulator import (SimConfig, deviation_policies, empirical_convergence, estimate_eps,
                        fit_rate)
from .solver import backup_layer, build_tree, optimality_residual, solve_pomdp, write_policy_csv

EQ_TOL = 1e-12      # equilibria used for identity checks are driven to this residual
CONVERGENCE_N = (8, 32, 128, 512)
EPS_N = (5, 25, 125)


def fmt(v) -> str:
    return f"{float(v):.12g}"


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number:2d} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def random_tabular_model(rng: np.random.Generator, X: int, Y: int, A: int, discount: float = 0.9):
    """Random coupled tabular model with strictly positive kernels."""
    K = rng.dirichlet(np.ones(X), size=(X, A, X))
    d = rng.random((X, A, X))
    r = rng.dirichlet(np.ones(Y), size=X)
    return build_tabular(K, d, r, discount, rng.dirichlet(np.ones(X)))


def random_flow(rng: np.random.Generator, model, horizon: int) -> MeasureFlow:
    m = rng.dirichlet(np.ones(model.n_states), size=horizon + 2)
    m[0] = model.initial
    return MeasureFlow(m)


class Context:
    """Shared state: bundled models and their equilibria, computed once."""

    def __init__(self, out: Path, seed: int, workers: Optional[int]):
        self.out, self.seed, self.workers = out, seed, workers
        self.models = {name: load_bundled(name) for name in BUNDLED}
        self._eq = {}

    def equilibrium(self, name: str, damping=0.5, tol=EQ_TOL):
        key = (name, damping, tol)
        if key not in self._eq:
            L = self.models[name]
            cfg = EquilibriumConfig(L.horizon, damping=damping, tol=tol, max_iters=500)
            self._eq[key] = find_equilibrium(L.model, cfg)
        return self._eq[key]


def check_filter(ctx: Context, n_models: int = 50, max_len: int = 5) -> Criterion:
    rng = np.random.default_rng([ctx.seed, 1])
    rows, worst = [], 0.0
    for k in range(n_models):
        X, Y, A = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        model = random_tabular_model(rng, X, Y, A)
        flow = random_flow(rng, model, max_len)
        err, count = 0.0, 0
        for length in range(1, max_len + 1):
            post, acts, obs = oracles.filter_all_sequences(model, flow, length)
            for s in range(post.shape[0]):
                z = Belief(0, model.initial)
                try:
                    for t in range(length):
                        z = bayes_update(model, z, int(acts[s, t]), int(obs[s, t]), flow[t], flow[t + 1])
                except ZeroProbabilityBranch:
                    if not np.isnan(post[s, 0]):
                        err = np.inf
                    continue
                err = max(err, float(np.max(np.abs(z.weights - post[s]))))
                count += 1
        worst = max(worst, err)
        rows.append((k, X, Y, A, count, err))
    write_csv(ctx.out / "filter_oracle.csv", ["model", "X", "Y", "A", "sequences", "max_abs_error"], rows)
    return Criterion(1, "filter oracle equivalence", worst <= 1e-10,
                     f"max abs error {worst:.3g} over {n_models} models (tol 1e-10)")


def check_solver(ctx: Context, n_models: int = 10, horizon: int = 3) -> Criterion:
    rng = np.random.default_rng([ctx.seed, 2])
    rows, worst = [], 0.0
    n_pol = 0
    for k in range(n_models):
        model = random_tabular_model(rng, 2, 2, 2)
        flow = random_flow(rng, model, horizon)
        table, _ = solve_pomdp(model, flow, horizon)
        best, _, values = oracles.exhaustive_minimum(model, flow, horizon)
        n_pol = values.shape[0]
        diff = abs(table.root_value - best)
        worst = max(worst, diff)
        rows.append((k, table.root_value, best, diff))
    write_csv(ctx.out / "solver_oracle.csv", ["model", "solver_value", "oracle_value", "abs_diff"], rows)
    return Criterion(2, "solver oracle equivalence", worst <= 1e-9,
                     f"max |V - min over {n_pol} policies| = {worst:.3g} (tol 1e-9)")


def check_bellman(ctx: Context, trials: int = 100) -> Criterion:
    rng = np.random.default_rng([ctx.seed, 3])
    rows, ok = [], True
    for k in range(trials):
        X, Y, A = int(rng.integers(2, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        model = random_tabular_model(rng, X, Y, A, discount=float(rng.uniform(0.1, 0.99)))
        T = int(rng.integers(1, 4))
        tree = build_tree(model, random_flow(rng, model, T), T)
        t = int(rng.integers(0, T))
        n = tree.beliefs[t + 1].shape[0]
        bound = model.value_bound
        u = rng.uniform(0, bound, n)
        v = rng.uniform(0, bound, n)
        Tu, Tv = backup_layer(tree, t, u)[0], backup_layer(tree, t, v)[0]
        lhs = float(np.max(np.abs(Tu - Tv)))
        rhs = model.discount * float(np.max(np.abs(u - v)))
        w = u + rng.uniform(0, bound, n) * (rng.random(n) < 0.5)
        Tw = backup_layer(tree, t, w)[0]
        mono = bool(np.all(Tu <= Tw + 1e-12))
        good = lhs <= rhs + 1e-12 and mono
        ok &= good
        rows.append((k, model.discount, lhs, rhs, int(mono)))
    write_csv(ctx.out / "bellman.csv", ["trial", "discount", "max_Tu_minus_Tv", "beta_max_u_minus_v",
                                        "monotone"], rows)
    return Criterion(3, "Bellman contraction and monotonicity", ok,
                     f"{trials} trials, contraction and monotonicity {'hold' if ok else 'FAIL'}")


def check_truncation(ctx: Context) -> Criterion:
    rows, ok = [], True
    for name, L in ctx.models.items():
        m = L.model
        flow = recursive_from_initial(m, 8)
        for T in (4, 6):
            vT = solve_pomdp(m, flow, T)[0].root_value
            vT2 = solve_pomdp(m, flow, T + 2)[0].root_value
            bound = m.discount ** (T + 1) * m.value_bound
            good = abs(vT - vT2) <= bound
            ok &= good
            rows.append((name, T, vT, vT2, abs(vT - vT2), bound))
    write_csv(ctx.out / "truncation.csv", ["model", "T", "V_T", "V_T_plus_2", "abs_diff", "bound"], rows)
    return Criterion(4, "truncation bracket", ok, f"{len(rows)} (model, T) pairs within beta^(T+1)||c||/(1-beta)")


def check_equilibrium(ctx: Context) -> Criterion:
    dec = ctx.equilibrium("decoupled", damping=1.0, tol=EQ_TOL)
    dec_res = dec.residual_history[1] if len(dec.residual_history) > 1 else dec.residual_history[0]
    toy = ctx.equilibrium("coupled_toy", damping=0.5, tol=1e-6)
    grid = oracles.equilibrium_grid_search(ctx.models["coupled_toy"].model, step=1e-3)
    dist = float(np.max(np.abs(grid.flow - toy.flow.measures).sum(axis=1)))
    write_flow_csv(toy.flow, ctx.out / "equilibrium_coupled_toy_flow.csv")
    write_flow_csv(MeasureFlow(grid.flow), ctx.out / "grid_oracle_coupled_toy_flow.csv")
    write_policy_csv(toy.policy, ctx.out / "equilibrium_coupled_toy_policy.csv", reached_only=True)
    rows = [("decoupled", k, r) for k, r in enumerate(dec.residual_history)]
    rows += [("coupled_toy", k, r) for k, r in enumerate(toy.residual_history)]
    write_csv(ctx.out / "residual_history.csv", ["model", "iteration", "residual"], rows)
    ok = dec_res <= 1e-12 and toy.residual <= 1e-6 and dist <= 5e-3
    return Criterion(5, "equilibrium consistency", ok,
                     f"decoupled residual after one step {dec_res:.3g}; coupled residual {toy.residual:.3g}; "
                     f"grid oracle sup-L1 {dist:.3g} (tol 5e-3, grid residual {grid.residual:.3g})")


def check_optimality(ctx: Context) -> Criterion:
    rows, worst = [], 0.0
    for name in BUNDLED:
        rep = ctx.equilibrium(name)
        gap = optimality_residual(rep.policy, rep.values)
        worst = max(worst, gap)
        rows.append((name, int(rep.converged), rep.residual, gap))
    toy = ctx.equilibrium("coupled_toy", damping=0.5, tol=1e-6)
    m = ctx.models["coupled_toy"].model
    row = oracles.history_row(toy.policy, m.n_obs)
    oracle_gap = oracles.q_gap_by_enumeration(m, toy.flow, toy.policy.horizon, row)
    rows.append(("coupled_toy_enumeration", int(toy.converged), toy.residual, oracle_gap))
    worst = max(worst, oracle_gap)
    write_csv(ctx.out / "optimality.csv", ["run", "converged", "nce_residual", "q_gap"], rows)
    return Criterion(6, "optimality characterization", worst <= 1e-9,
                     f"max q-gap {worst:.3g} over {len(rows)} equilibria (tol 1e-9)")


def check_identities(ctx: Context) -> Criterion:
    rows, worst = [], 0.0
    for name in BUNDLED:
        rep = ctx.equilibrium(name)
        m = ctx.models[name].model
        sa = state_action_flow(rep.policy)
        mu = rep.induced.measures
        T = rep.policy.horizon
        for t in range(T + 1):
            bary = np.abs(barycenter(sa.weights[t], sa.beliefs[t]) - mu[t]).max()
            pushed = push_forward(m, sa, t, mu[t])
            target = barycenter(sa.weights[t + 1], sa.beliefs[t + 1]) if t < T else mu[t + 1]
            two = np.abs(pushed - target).max()
            worst = max(worst, bary, two)
            rows.append((name, t, bary, two))
    write_csv(ctx.out / "identities.csv", ["model", "t", "barycenter_error", "two_formula_error"], rows)
    return Criterion(7, "barycenter and consistency identities", worst <= 1e-10,
                     f"max error {worst:.3g} over every depth of {len(BUNDLED)} equilibria (tol 1e-10)")


def check_moments(ctx: Context) -> Criterion:
    rep = ctx.equilibrium("gaussian")
    m = ctx.models["gaussian"].model
    report = moment_check(m, state_action_flow(rep.policy))
    rows = [(t, report.w_mass[t], report.bound[t], report.slack_bound[t], report.node_ratio[t])
            for t in range(len(report.w_mass))]
    write_csv(ctx.out / "moment.csv", ["t", "w_mass", "bound", "slack_bound", "max_node_ratio"], rows)
    return Criterion(8, "moment bounds", report.ok,
                     f"max node ratio {report.node_ratio.max():.4g} (<= 1.05), "
                     f"depth bound {'holds' if report.ok else '; '.join(report.violations)}")


def check_convergence(ctx: Context, reps: int = 200) -> Criterion:
    rep = ctx.equilibrium("gaussian")
    m = ctx.models["gaussian"].model
    T = rep.policy.horizon
    cfg = SimConfig(CONVERGENCE_N[0], reps, T, seed=ctx.seed, workers=ctx.workers)
    rows, onestep = empirical_convergence(m, rep.policy, rep.flow, cfg, CONVERGENCE_N)
    write_csv(ctx.out / "convergence.csv", ["t", "N", "f_id", "estimate", "stderr"],
              [(r.t, r.N, r.f_id, r.estimate, r.stderr) for r in rows])
    write_csv(ctx.out / "onestep.csv", ["t", "N", "f_id", "estimate", "stderr", "bound"],
              [(r.t, r.N, r.f_id, r.estimate, r.stderr, b) for r, b in onestep])
    slopes = []
    for f_id in ("coord", "upper_half"):
        for t in (1, 3):
            slopes.append((f_id, t, fit_rate(rows, t, f_id)))
    write_csv(ctx.out / "rates.csv", ["f_id", "t", "slope"], slopes)
    worst_slope = max(s for _, _, s in slopes)
    bad = [(r.t, r.N, r.f_id) for r, b in onestep if r.estimate > b + 3 * r.stderr]
    ok = worst_slope <= -0.4 and not bad
    return Criterion(9, "empirical convergence", ok,
                     f"max slope {worst_slope:.3f} (<= -0.4); one-step bound violations {len(bad)}")


def check_eps(ctx: Context, reps: int = 500) -> Criterion:
    rows, curve = [], []
    verdicts = []
    for name, damping, tol in (("coupled_toy", 0.5, 1e-6), ("decoupled", 1.0, EQ_TOL)):
        rep = ctx.equilibrium(name, damping=damping, tol=tol)
        m = ctx.models[name].model
        T = rep.policy.horizon
        devs = deviation_policies(m, rep.flow, T)
        cfg = SimConfig(EPS_N[0], reps, T, seed=ctx.seed, workers=ctx.workers)
        pts = estimate_eps(m, rep.policy, rep.flow, devs, cfg, EPS_N)
        for p in pts:
            curve.append((name, p.N, p.eps_hat, p.ci_lo, p.ci_hi))
            for dev, (gap, se) in p.gaps.items():
                rows.append((name, p.N, dev, gap, se))
        write_csv(ctx.out / f"eps_curve_{name}.csv", ["N", "eps_hat", "ci_lo", "ci_hi"],
                  [(p.N, p.eps_hat, p.ci_lo, p.ci_hi) for p in pts])
        if name == "coupled_toy":
            ordered = all(pts[k + 1].ci_lo <= pts[k].ci_hi for k in range(len(pts) - 1))
            halved = pts[-1].eps_hat <= pts[0].eps_hat / 2 + 2 * pts[-1].se
            verdicts.append(ordered and halved)
            toy_detail = (f"coupled eps_hat {[round(p.eps_hat, 4) for p in pts]} "
                          f"(ordered {ordered}, halved {halved})")
        else:
            zero = all(p.ci_lo <= 0.0 for p in pts)
            verdicts.append(zero)
            dec_detail = f"decoupled eps_hat {[round(p.eps_hat, 4) for p in pts]} (zero within CI {zero})"
    write_csv(ctx.out / "eps_gaps.csv", ["model", "N", "deviation", "mean_gap", "stderr"], rows)
    return Criterion(10, "epsilon-Nash trend", all(verdicts), f"{toy_detail}; {dec_detail}")


CHECKS: list[Callable[[Context], Criterion]] = [
    check_filter, check_solver, check_bellman, check_truncation, check_equilibrium,
    check_optimality, check_identities, check_moments, check_convergence, check_eps,
]


def artifact_names(out: Path) -> list:
    return sorted(p.name for p in Path(out).glob("*.csv") if p.name != "criteria.csv")


def check_determinism(ctx: Context, selected=None) -> Criterion:
    """Rerun the suite at 1 and 4 workers and compare every CSV byte for byte.

    The two reruns are compared with each other and, file by file, with the
    artifacts already present in the main output directory.
    """
    mismatches, compared = [], 0
    with tempfile.TemporaryDirectory() as tmp:
        dirs = []
        for workers in (1, 4):
            d = Path(tmp) / f"w{workers}"
            d.mkdir()
            run_checks(d, ctx.seed, workers, selected, determinism=False)
            dirs.append(d)
        names = artifact_names(dirs[0])
        if names != artifact_names(dirs[1]):
            mismatches.append("artifact sets differ")
        main = set(artifact_names(ctx.out))
        for name in names:
            others = [dirs[1]] + ([ctx.out] if name in main else [])
            for d in others:
                compared += 1
                if not (d / name).is_file() or not filecmp.cmp(dirs[0] / name, d / name, shallow=False):
                    mismatches.append(f"{d.name}/{name}")
    return Criterion(11, "determinism", not mismatches and compared > 0,
                     f"{compared} CSV comparisons across runs at 1 and 4 workers, "
                     f"mismatches: {mismatches or 'none'}")


def run_checks(out, seed: int = 0, workers: Optional[int] = None, selected=None,
               determinism: bool = True, log: Optional[Callable[[str], None]] = None) -> list[Criterion]:
    """Run criteria (all by default, or the numbers in ``selected``) and write criteria.csv."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(out, seed, workers)
    results = []
    for k, check in enumerate(CHECKS, start=1):
        if selected and k not in selected:
            continue
        t0 = time.perf_counter()
        res = check(ctx)
        res.seconds = time.perf_counter() - t0
        results.append(res)
        if log:
            log(res.line())
    if determinism and (not selected or 11 in selected):
        t0 = time.perf_counter()
        inner = [k for k in (selected or range(1, 11)) if k != 11] or None
        res = check_determinism(ctx, inner)
        res.seconds = time.perf_counter() - t0
        results.append(res)
        if log:
            log(res.line())
    write_csv(out / "criteria.csv", ["criterion", "name", "passed"],
              [(r.number, r.name, int(r.passed)) for r in results])
    return results
