"""Command-line entry point: ``slowfast <subcommand> --config run.json --out dir``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..averaging import ErgodicSettings, estimate_invariant, integrate_averaged
from ..errors import (AssumptionGateError, DivergenceError, InputError,
                      NonConvergenceError, NumericalError)
from ..measure import ParticleCloud
from ..model import check_assumptions
from ..sde_engine import simulate
from .config import load_config, parse_config
from .experiments import (run_convergence_experiment, run_ldp_experiment,
                          run_mixing_experiment, run_picard_experiment, stream_audit)
from .registry import RunRecord, _encode
from .report import emit_report

EXIT_OK, EXIT_CONFIG, EXIT_GATE, EXIT_DIVERGENCE, EXIT_ASSERT = 0, 2, 3, 4, 5

log = logging.getLogger("slowfast")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with sections model/operators/sim/experiment")
    common.add_argument("--seed", type=int, help="seed family (overrides sim.seed)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--deterministic", action="store_true",
                        help="stable run ids, no timestamps or timings in outputs")
    common.add_argument("--max-workers", type=int, default=None)
    common.add_argument("--assert", dest="assert_", action="store_true",
                        help="exit 5 when an acceptance verdict fails")
    common.add_argument("--slow", action="store_true", help="include slow probes (ldp)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="slowfast", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [("simulate", "integrate the particle system"),
                       ("frozen", "invariant law of the frozen equation at x0"),
                       ("average", "integrate the averaged equation"),
                       ("converge", "averaging convergence sweep (or mixing/picard kinds)"),
                       ("ldp", "rate-function table and rare-event probe"),
                       ("check", "sampled assumption report"),
                       ("report", "re-emit report files from a saved run record")]:
        sp = sub.add_parser(name, parents=[common], help=text)
        if name == "report":
            sp.add_argument("--run", required=True, help="path to run.json")
    return p


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_encode(data), indent=2, sort_keys=True, default=float) + "\n")


def _finish(record: RunRecord, out: Path, args) -> int:
    emit_report(record, out, deterministic=args.deterministic)
    record.save(out / "run.json")
    verdicts = record.results.get("verdicts", {})
    for k, v in verdicts.items():
        print(f"{k}: {'PASS' if v else 'FAIL'}")
    if args.assert_ and not all(verdicts.values()):
        return EXIT_ASSERT
    return EXIT_OK


def _run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "report":
        record = RunRecord.load(args.run)
        emit_report(record, out, deterministic=args.deterministic)
        return EXIT_OK
    rc = load_config(args.config, args.seed) if args.config else parse_config({}, args.seed)
    coeffs = rc.build_model()
    A1, A2 = rc.build_operators(coeffs)

    if args.command == "check":
        report = check_assumptions(coeffs)
        _write_json(out / "assumptions.json", report.to_dict())
        print(json.dumps(_encode(report.to_dict()), indent=2, default=float))
        return EXIT_OK if report.gate_ok else EXIT_GATE

    if args.command == "simulate":
        cfg = rc.sim_config()
        traj = simulate(coeffs, A1, A2, cfg, mode="reduced", max_workers=args.max_workers or 1)
        traj.to_csv(out / "trajectory.csv")
        _write_json(out / "summary.json", {"config_hash": rc.hash, "seed": cfg.seed,
                                           "streams": traj.streams,
                                           "final_mean": traj.mean[-1].tolist()})
        return EXIT_OK

    if args.command == "frozen":
        report = check_assumptions(coeffs)
        report.require_gate("frozen")
        x0 = np.atleast_1d(np.asarray(rc.sim.get("x0", 0.0), dtype=float))
        est = estimate_invariant(x0, ParticleCloud.dirac(x0), coeffs, A2,
                                 ErgodicSettings(seed=int(rc.sim.get("seed", 0))), report)
        est.to_csv(out / "invariant.csv")
        _write_json(out / "summary.json", {
            "mean": est.mean.tolist(), "mean_stderr": est.mean_stderr.tolist(),
            "var": est.var.tolist(), "var_stderr": est.var_stderr.tolist(),
            "mixing_rate_fit": est.mixing_rate_fit, "fit_warning": est.fit_warning,
            "metastable": est.metastable, "burn_in": est.burn_in})
        return EXIT_OK

    if args.command == "average":
        check_assumptions(coeffs).require_gate("average")
        cfg = rc.sim_config()
        theta = cfg.theta if cfg.theta is not None else coeffs.theta
        mode = "theta_pos" if theta > 0 else "theta_zero"
        traj = integrate_averaged(coeffs, A1, cfg, mode, A2=A2)
        traj.to_csv(out / "averaged.csv")
        _write_json(out / "summary.json", {"mode": mode, "final_mean": traj.mean[-1].tolist()})
        return EXIT_OK

    if args.command == "converge":
        kind = rc.grid.kind
        if kind == "mixing":
            record = run_mixing_experiment(rc, args.deterministic)
        elif kind == "picard":
            record = run_picard_experiment(rc, args.deterministic)
        elif kind == "ldp":
            raise InputError("use the 'ldp' subcommand for ldp experiments")
        else:
            record = run_convergence_experiment(rc, max_workers=args.max_workers,
                                                deterministic=args.deterministic)
            record.results.setdefault("verdicts", {})["stream_audit"] = stream_audit(record)
        return _finish(record, out, args)

    if args.command == "ldp":
        record = run_ldp_experiment(rc, run_probe=args.slow, deterministic=args.deterministic)
        return _finish(record, out, args)
    raise InputError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except AssumptionGateError as exc:
        print(f"assumption gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (DivergenceError, NonConvergenceError, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except InputError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
