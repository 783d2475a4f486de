"""Command-line entry point: generate, estimate, simulate, bridge, oracle.

Exit codes: 0 success, 2 input error, 3 infeasible/degenerate/over budget,
4 non-convergence.  Diagnostics go to stderr; numeric results are written
with round-trip precision.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import datagen, em, estep, mstep, oracle, simulate
from .errors import (BudgetExceededError, ContractError, ConvergenceWarning, DataError,
                     DegenerateIndividualError, InfeasibleBridgeError, InitializationError, SpecError)
from .model import MISSING, dump_params, dump_spec, load_params, load_spec, read_panel_csv, write_panel_csv
from .presets import PRESETS

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NONCONVERGED = 0, 2, 3, 4

log = logging.getLogger("markovem")


class InputError(Exception):
    pass


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise InputError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} file not found: {p}")
    return p


def _load_json(path: Path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def _spec(args):
    if getattr(args, "preset", None):
        return PRESETS[args.preset][0]()
    path = _existing(args.spec, "spec")
    _load_json(path)
    return load_spec(path)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    spec = _spec(args)
    if args.preset:
        _, params_fn, init_fn, plan_fn = PRESETS[args.preset]
        params, init, plan = params_fn(spec), init_fn(), plan_fn()
    else:
        params = load_params(_existing(args.params, "params"), spec)
        init = datagen.InitialDistribution()
        plan = datagen.MissingnessPlan()
    if args.plan:
        plan = datagen.MissingnessPlan.from_dict(_load_json(_existing(args.plan, "plan")))
    if args.initial:
        init = datagen.InitialDistribution.from_dict(_load_json(_existing(args.initial, "initial")))
    out = _out_dir(args)
    truth = datagen.generate_panel(spec, params, args.n, init, args.seed)
    masked, mask = datagen.apply_missingness(truth, spec, plan, args.seed)
    write_panel_csv(masked, spec, out / "panel.csv")
    write_panel_csv(truth, spec, out / "truth.csv")
    datagen.write_mask_csv(mask, truth.ids, spec, out / "mask.csv")
    if args.preset:
        dump_spec(spec, out / "spec.json")
        dump_params(params, spec, out / "true_params.json")
        datagen.dump_plan(plan, out / "plan.json")
    log.info("generated %d individuals, %.1f%% of live cells missing -> %s", truth.n,
             100 * masked.missing_fraction, out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    spec = _spec(args)
    panel = read_panel_csv(_existing(args.panel, "panel"), spec)
    schedule = em.ScheduleConfig(R_init=args.R_init, R_max=max(args.R_max, args.R_init),
                                 opt_iter_init=args.opt_iter_init,
                                 opt_iter_max=max(args.opt_iter_max, args.opt_iter_init),
                                 trigger_coefficient=args.trigger_coefficient, em_tolerance=args.em_tol,
                                 em_max_iterations=args.em_max_iter)
    optimizer = mstep.OptimizerConfig(method=args.optimizer)
    budget = oracle.EnumerationBudget(args.max_missing_cells)
    init = load_params(_existing(args.params, "params"), spec) if args.params else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        res = em.run_em(spec, panel, schedule, optimizer, args.seed, exact=args.exact_estep, budget=budget,
                        convention=args.weight_convention, workers=args.workers, init=init)
    out = _out_dir(args)
    dump_params(res.params, spec, out / "fitted.json",
                extra={"converged": res.converged, "iterations": len(res.trace)})
    em.write_trace(res.trace, out / "trace.csv", out / "timing.csv")
    if res.degenerate:
        log.warning("degenerate individuals were excluded in %d iteration(s)", len(res.degenerate))
    if not res.converged:
        log.error("EM stopped at the safety cap (%d iterations) without meeting |dQ| < %g",
                  schedule.em_max_iterations, schedule.em_tolerance)
        return EXIT_NONCONVERGED
    log.info("converged after %d iterations", len(res.trace))
    return EXIT_OK


def _read_states(path: Path, spec, times: tuple[int, ...]) -> list[tuple[str, np.ndarray, dict]]:
    """Rows ``id, time, covariate columns, outcomes``; returns per id (covariates, {time: cells})."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = ["id", "time", *dict.fromkeys(spec.covariate_columns), *spec.names]
        miss = [c for c in need if c not in (reader.fieldnames or [])]
        if miss:
            raise DataError(f"{path}: missing columns {miss}")
        rows = list(reader)
    out: dict[str, tuple[np.ndarray, dict]] = {}
    for lineno, r in enumerate(rows, start=2):
        try:
            t = int(r["time"])
            cov = np.array([float(r[c]) for c in spec.covariate_columns])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if t not in times:
            raise DataError(f"{path}:{lineno}: time {t} not one of {list(times)}")
        cells = []
        for nm in spec.names:
            v = r[nm].strip()
            if v not in ("0", "1", "NA"):
                raise DataError(f"{path}:{lineno}: outcome '{nm}' has value {v!r}")
            cells.append(MISSING if v == "NA" else int(v))
        entry = out.setdefault(r["id"], (cov, {}))
        entry[1][t] = np.array(cells, dtype=np.int8)
    return [(pid, cov, st) for pid, (cov, st) in out.items()]


def cmd_simulate(args) -> int:
    spec = _spec(args)
    params = load_params(_existing(args.params, "params"), spec)
    states = _read_states(_existing(args.initial, "initial"), spec, (args.start_time,))
    cfg = simulate.SimulationConfig(args.M, args.horizon, args.seed, simulate.FORWARD_MODE, args.start_time)
    rows = []
    for i, (pid, cov, st) in enumerate(states):
        traj = simulate.simulate_forward(spec, params, st[args.start_time], cfg, cov, individual=i)
        rows.append((pid, traj, args.start_time, None, None))
    simulate.write_trajectories(args.out, spec, rows)
    log.info("simulated %d individual(s) x %d replicates to time %d", len(rows), args.M, args.horizon)
    return EXIT_OK


def cmd_bridge(args) -> int:
    spec = _spec(args)
    params = load_params(_existing(args.params, "params"), spec)
    states = _read_states(_existing(args.initial, "initial"), spec, (1, args.horizon))
    cfg = simulate.SimulationConfig(args.M, args.horizon, args.seed, simulate.BRIDGE_MODE)
    rows = []
    for i, (pid, cov, st) in enumerate(states):
        if set(st) != {1, args.horizon}:
            raise DataError(f"individual {pid}: bridge needs rows at time 1 and time {args.horizon}")
        res = simulate.simulate_bridge(spec, params, st[1], st[args.horizon], cfg, cov, individual=i)
        rows.append((pid, res.trajectories, 1, res.bridge_weight, res.ess))
        log.info("bridge %s: ESS %.1f of %d", pid, res.ess, args.M)
    simulate.write_trajectories(args.out, spec, rows)
    return EXIT_OK


def cmd_oracle(args) -> int:
    spec = _spec(args)
    panel = read_panel_csv(_existing(args.panel, "panel"), spec)
    budget = oracle.EnumerationBudget(args.max_missing_cells)
    if args.params:
        params = load_params(_existing(args.params, "params"), spec)
        ll = oracle.exact_observed_loglik(spec, params, panel, budget)
        print(json.dumps({"loglik": ll}))
        return EXIT_OK
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        res = oracle.direct_mle(spec, panel, budget)
    print(json.dumps({"loglik": res.loglik, "converged": res.converged, "iterations": res.iterations,
                      "outcomes": res.params.to_dict(spec)}, indent=2))
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="markovem", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, params=True):
        sp.add_argument("--spec", help="model specification JSON")
        if params:
            sp.add_argument("--params", help="coefficients JSON")
        sp.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("generate", help="synthetic panel, truth and mask CSVs")
    common(g)
    g.add_argument("--preset", choices=sorted(PRESETS), help="bundled scenario (spec, params, plan)")
    g.add_argument("--plan", help="missingness plan JSON")
    g.add_argument("--initial", help="initial-state distribution JSON")
    g.add_argument("-n", "--n", type=int, default=2000, help="number of individuals")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("estimate", help="fit by Monte Carlo EM")
    common(e)
    e.add_argument("--panel", required=True)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--R-init", type=int, default=10)
    e.add_argument("--R-max", type=int, default=1000)
    e.add_argument("--opt-iter-init", type=int, default=3)
    e.add_argument("--opt-iter-max", type=int, default=300)
    e.add_argument("--trigger-coefficient", type=float, default=1.97e-4)
    e.add_argument("--em-tol", type=float, default=1e-4)
    e.add_argument("--em-max-iter", type=int, default=200)
    e.add_argument("--optimizer", choices=[mstep.QUASI_NEWTON, mstep.NEWTON], default=mstep.QUASI_NEWTON)
    e.add_argument("--exact-estep", action="store_true", help="enumerate completions instead of sampling")
    e.add_argument("--max-missing-cells", type=int, default=20, help="enumeration budget per individual")
    e.add_argument("--weight-convention", choices=[estep.NORMALIZED, estep.RAW], default=estep.NORMALIZED)
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_estimate)

    for name, func, helptext in (("simulate", cmd_simulate, "forward trajectories"),
                                 ("bridge", cmd_bridge, "trajectories between observed endpoints")):
        s = sub.add_parser(name, help=helptext)
        common(s)
        s.add_argument("--initial", required=True,
                       help="CSV with id, time, covariates, outcomes (start row; bridge: rows at 1 and T)")
        s.add_argument("-M", type=int, default=1000, help="replicates per individual")
        s.add_argument("--horizon", type=int, required=True, help="final time")
        if name == "simulate":
            s.add_argument("--start-time", type=int, default=1)
        s.add_argument("--out", required=True, help="trajectory CSV")
        s.set_defaults(func=func)

    o = sub.add_parser("oracle", help="exact log-likelihood (with --params) or exact MLE")
    common(o)
    o.add_argument("--panel", required=True)
    o.add_argument("--max-missing-cells", type=int, default=20)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", force=True)
    try:
        return args.func(args)
    except (InputError, SpecError, DataError, ContractError, InitializationError, ValueError,
            OSError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except BudgetExceededError as exc:
        log.error("refused: %s (raise --max-missing-cells to change the EnumerationBudget)", exc)
        return EXIT_INFEASIBLE
    except (InfeasibleBridgeError, DegenerateIndividualError) as exc:
        log.error("%s", exc)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
