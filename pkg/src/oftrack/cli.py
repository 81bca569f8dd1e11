"""Command-line experiment runner.

Subcommands ``check``, ``oracle``, ``learn``, ``track`` and ``sweep-k0`` each
write ``report.json`` plus a CSV artifact into ``--out``. Exit codes:

    0  success
    1  a required check failed
    2  data rank condition not met
    3  closed loop or data-collection loop unstable
    4  iteration did not converge / corrupted kernels
    5  malformed configuration or command line
    6  oracle or observer-placement failure
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import linalg_kit as la
from . import offpolicy_rl as rl
from . import regulation_oracle as ro
from . import state_reconstruction as sr
from .errors import ConfigError, OftrackError
from .lti_core import TrackingSetup, build_setup, check_assumptions, augmented_report
from .scenario import BUNDLED, SOLVERS, ScenarioConfig, load_bundled, load_config

log = logging.getLogger("oftrack")

EXIT_CHECK_FAILED = 1
SETTLE_FRACTION = 1e-3


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer)) else fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def write_report(path: Path, report: dict) -> None:
    # allow_nan=False enforces the all-finite invariant
    path.write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True, allow_nan=False) + "\n")


def rel_err(a, b) -> float:
    nb = float(np.linalg.norm(b))
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / (nb if nb > 0 else 1.0)


@dataclass
class Prepared:
    cfg: ScenarioConfig
    setup: TrackingSetup
    spec: sr.FilterSpec
    param: sr.Parameterization
    oracle: ro.OracleSolution
    K_o0: np.ndarray
    init_note: str

    @property
    def K_o_oracle(self) -> np.ndarray:
        return self.oracle.K_star @ self.param.Mbar


def prepare(cfg: ScenarioConfig) -> Prepared:
    """Build augmented system, filters, M_bar, oracle solution and the behavior gain."""
    setup = build_setup(cfg.plant, cfg.exo, cfg.weights, cfg.seed_for("T"), T=cfg.T)
    spec = cfg.filter_spec(setup.aug.n_z)
    L = sr.observer_gain(setup.aug, spec, cfg.seed_for("observer"))
    param = sr.parameterization_matrix(setup.aug, spec, L)
    oracle = ro.solve_oracle(setup.aug, cfg.weights, cfg.exo)
    n_zeta = param.Mbar.shape[1]
    mode = cfg.init_mode
    if mode == "auto":
        mode = "zero" if la.spectral_radius(setup.aug.underA) < 1.0 else "oracle"
    if mode == "oracle":
        K_o0, note = oracle.K0 @ param.Mbar, "oracle-assisted (value-iteration gain times M_bar)"
    elif mode == "zero":
        K_o0, note = np.zeros((setup.plant.m, n_zeta)), "zero (open loop is Schur)" if cfg.init_mode == "auto" else "zero"
    else:
        K_o0, note = cfg.K_o0, "user-supplied"
        if K_o0.shape != (setup.plant.m, n_zeta):
            raise ConfigError(f"init.K_o must be {setup.plant.m}x{n_zeta}, got {K_o0.shape}")
    return Prepared(cfg, setup, spec, param, oracle, K_o0, note)


def provenance(cfg: ScenarioConfig) -> dict:
    return {"scenario": cfg.name, "seed": cfg.seed, "config_hash": cfg.config_hash}


def cmd_check(cfg: ScenarioConfig, out: Path) -> tuple[dict, int]:
    rep = check_assumptions(cfg.plant, cfg.exo)
    setup = build_setup(cfg.plant, cfg.exo, cfg.weights, cfg.seed_for("T"), T=cfg.T)
    aug_rep = augmented_report(setup.aug, cfg.exo)
    flags = {**rep.flags, **{f"augmented_{k}": v for k, v in aug_rep.flags.items()}}
    # full controllability/observability of the augmented pair are informative only
    required = {k: v for k, v in flags.items() if k not in ("augmented_controllable", "augmented_observable")}
    ok = all(required.values())
    report = {
        "command": "check", **provenance(cfg), "passed": ok, "flags": flags,
        "failed": sorted(k for k, v in required.items() if not v),
        "diagnostics": rep.diagnostics + aug_rep.diagnostics,
    }
    return report, 0 if ok else EXIT_CHECK_FAILED


def _require_checks(cfg: ScenarioConfig) -> None:
    rep = check_assumptions(cfg.plant, cfg.exo)
    if not rep.all_passed:
        failed = ", ".join(k for k, v in rep.flags.items() if not v)
        raise OftrackError(f"standing assumptions fail ({failed}): " + "; ".join(rep.diagnostics))


def cmd_oracle(cfg: ScenarioConfig, out: Path) -> tuple[dict, int]:
    _require_checks(cfg)
    prep = prepare(cfg)
    o = prep.oracle
    p = cfg.plant
    # plain plant LQ problem, reported as a sanity sub-check
    Qp = p.C.T @ cfg.weights.Q @ p.C
    plant_hewer = ro.hewer_iterate(p.A, p.B, Qp, cfg.weights.Rbar,
                                   ro.value_iteration_gain(p.A, p.B, Qp, cfg.weights.Rbar))
    report = {
        "command": "oracle", **provenance(cfg),
        "P_star": o.P_star, "K_star": o.K_star, "K_star_Mbar": prep.K_o_oracle,
        "K0": o.K0, "dare_residual": o.dare_residual, "hewer_iterations": o.hewer.iterations,
        "hewer_monotone_violation": ro.monotone_violation(o.hewer),
        "closed_loop_spectral_radius": la.spectral_radius(prep.setup.aug.closed_loop(o.K_star)),
        "regulator": {"sylvester_residual": o.regulator.sylvester_residual,
                      "output_residual": o.regulator.output_residual},
        "plant_dare": {"P": plant_hewer.P_star, "K": plant_hewer.K_star,
                       "residual": ro.dare_residual(p.A, p.B, Qp, cfg.weights.Rbar, plant_hewer.P_star)},
        "T": prep.setup.aug.T, "observer_gain": prep.param.L_obs,
    }
    return report, 0


def _kernel_errors(prep: Prepared, record: rl.IterationRecord) -> tuple[float, float]:
    K = rl.state_gain_from_output_gain(record.K_o, prep.param.Mbar)
    ref = rl.oracle_kernels(prep.setup, prep.param, K)
    return rel_err(record.kernels.L_1, ref.L_1), rel_err(record.kernels.L_2, ref.L_2)


def _learn(prep: Prepared) -> rl.LearningResult:
    cfg = prep.cfg
    return rl.learn(prep.setup, prep.spec, cfg.excitation, prep.K_o0, cfg.k0, cfg.kf, x0=cfg.x0, xd0=cfg.xd0,
                    theta_source=cfg.theta_source, solver=cfg.solver, solver_kw=cfg.solver_kw,
                    eps_stop=cfg.eps_stop, max_iter=cfg.max_iter)


def _learning_section(prep: Prepared, res: rl.LearningResult, out: Path) -> dict:
    rows = []
    for rec in res.trace:
        e1, e2 = _kernel_errors(prep, rec)
        rows.append((rec.j, rec.gain_delta, e1, e2, rel_err(rec.K_o_next, prep.K_o_oracle)))
    write_csv(out / "trace.csv", ["j", "gain_delta", "kernel_err_L1", "kernel_err_L2", "gain_err_vs_oracle"], rows)
    chk = rl.check_rank_condition(res.log)
    return {
        "K_o_star": res.K_o_star, "K_o_oracle": prep.K_o_oracle, "converged": res.converged,
        "iterations": len(res.trace), "gain_err_vs_oracle": rows[-1][4],
        "trace": [{"j": r[0], "gain_delta": r[1], "kernel_err_L1": r[2], "kernel_err_L2": r[3],
                   "gain_err_vs_oracle": r[4]} for r in rows],
        "rank": chk.rank, "required_rank": chk.required, "samples": len(res.log),
        "initialization": prep.init_note, "solver": prep.cfg.solver,
    }


def cmd_learn(cfg: ScenarioConfig, out: Path) -> tuple[dict, int]:
    _require_checks(cfg)
    prep = prepare(cfg)
    res = _learn(prep)
    return {"command": "learn", **provenance(cfg), "learning": _learning_section(prep, res, out)}, 0


def settling_index(ye: np.ndarray, threshold: float) -> int | None:
    """First sample after which ``max|y_e|`` stays at or below ``threshold``."""
    mags = np.max(np.abs(ye), axis=1)
    above = np.nonzero(mags > threshold)[0]
    if above.size == 0:
        return 0
    idx = int(above[-1]) + 1
    return idx if idx < mags.size else None


def cmd_track(cfg: ScenarioConfig, out: Path) -> tuple[dict, int]:
    _require_checks(cfg)
    prep = prepare(cfg)
    report = {"command": "track", **provenance(cfg)}
    if cfg.deploy_gain is not None:
        K_o = cfg.deploy_gain
        if K_o.shape != prep.K_o0.shape:
            raise ConfigError(f"deploy.K_o must have shape {prep.K_o0.shape}, got {K_o.shape}")
        state = rl.LoopState.initial(prep.setup, prep.spec, cfg.x0, cfg.xd0)
        report["gain_source"] = "supplied"
    else:
        res = _learn(prep)
        report["learning"] = _learning_section(prep, res, out)
        K_o, state = res.K_o_star, res.behavior.state
        report["gain_source"] = "learned"
    dep = rl.deploy(prep.setup, state, K_o, cfg.horizon)
    p = cfg.plant.p
    header = (["k"] + [f"y_{i}" for i in range(p)] + [f"yd_{i}" for i in range(p)]
              + [f"ye_{i}" for i in range(p)] + [f"u_{i}" for i in range(cfg.plant.m)])
    rows = ([k, *y, *yd, *ye, *u] for k, y, yd, ye, u in zip(dep.k, dep.y, dep.yd, dep.ye, dep.u))
    write_csv(out / "trajectory.csv", header, rows)
    initial = dep.initial_error
    trailing = dep.trailing_max(cfg.window)
    report["tracking"] = {
        "horizon": cfg.horizon, "window": cfg.window, "initial_abs_ye": initial,
        "trailing_max_abs_ye": trailing,
        "trailing_ratio": trailing / initial if initial > 0 else 0.0,
        "settling_index": settling_index(dep.ye, SETTLE_FRACTION * initial),
        "closed_loop_spectral_radius": la.spectral_radius(
            prep.setup.aug.closed_loop(rl.state_gain_from_output_gain(K_o, prep.param.Mbar))),
    }
    return report, 0


def sweep_k0(prep: Prepared, k0_list, window: int, x0) -> list[tuple[int, float]]:
    """Kernel error of the first policy-evaluation solve versus the ``r(0) = 0`` run, per ``k0``.

    Both runs share excitation and sample count (``window``); only the
    initial plant state differs.
    """
    cfg = prep.cfg
    x0 = np.ones(cfg.plant.n) if x0 is None else x0
    out = []
    for k0 in k0_list:
        kern = []
        for start in (x0, np.zeros(cfg.plant.n)):
            state = rl.LoopState.initial(prep.setup, prep.spec, start, cfg.xd0)
            beh = rl.run_behavior(prep.setup, state, cfg.excitation, prep.K_o0, k0, k0 + window, cfg.theta_source)
            reg = rl.assemble_regressors(beh.log, prep.K_o0, cfg.weights)
            kern.append(rl.solve_kernels(reg, cfg.solver, **cfg.solver_kw).unique_part())
        out.append((k0, rel_err(kern[0], kern[1])))
    return out


def cmd_sweep_k0(cfg: ScenarioConfig, out: Path, k0_list=None) -> tuple[dict, int]:
    _require_checks(cfg)
    prep = prepare(cfg)
    k0_list = tuple(k0_list) if k0_list else cfg.k0_list
    rows = sweep_k0(prep, k0_list, cfg.sweep_window, cfg.sweep_x0)
    write_csv(out / "sweep.csv", ["k0", "kernel_solution_error"], rows)
    errs = [e for _, e in rows]
    report = {
        "command": "sweep-k0", **provenance(cfg), "filter": {"kind": cfg.filter_kind, "radius": cfg.filter_radius},
        "k0": list(k0_list), "kernel_solution_error": errs,
        "non_increasing": all(b <= a for a, b in zip(errs, errs[1:])),
    }
    return report, 0


COMMANDS = {"check": cmd_check, "oracle": cmd_oracle, "learn": cmd_learn, "track": cmd_track,
            "sweep-k0": cmd_sweep_k0}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oftrack", description="Learn and verify output-feedback tracking controllers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", type=Path, help="scenario JSON file")
        src.add_argument("--scenario", choices=BUNDLED, help="bundled scenario name")
        sp.add_argument("--out", type=Path, default=Path("."), help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--solver", choices=SOLVERS, help="override the kernel solver")
        if name == "sweep-k0":
            sp.add_argument("--k0", type=int, nargs="+", help="k0 values (default from config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"oftrack {args.command}: cannot create {args.out}: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    try:
        if args.config is not None:
            cfg = load_config(args.config, seed=args.seed, solver=args.solver)
        else:
            cfg = load_bundled(args.scenario, seed=args.seed, solver=args.solver)
        t0 = time.perf_counter()
        kwargs = {"k0_list": args.k0} if args.command == "sweep-k0" else {}
        report, code = COMMANDS[args.command](cfg, args.out, **kwargs)
        report["timings"] = {"wall_seconds": time.perf_counter() - t0}
        report["exit_code"] = code
    except OftrackError as exc:
        print(f"oftrack {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        write_report(args.out / "report.json", {"command": args.command, "exit_code": exc.exit_code,
                                                "error": type(exc).__name__, "message": str(exc)})
        return exc.exit_code
    write_report(args.out / "report.json", report)
    print(json.dumps({"command": args.command, "exit_code": code, "report": str(args.out / "report.json")}))
    return code


if __name__ == "__main__":
    sys.exit(main())
