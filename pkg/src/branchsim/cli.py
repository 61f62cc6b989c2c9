"""Command-line interface: ``branchsim {simulate,sweep,validate-scaling,diagnose,replay}``.

Every flag can also be set through an environment variable named ``BRANCHSIM_`` plus
the flag name in upper case with dashes as underscores (``BRANCHSIM_SEED=7``).
Explicit flags win over the environment.

Exit codes: 0 success, 1 a check failed under ``--strict`` (or replay mismatch),
2 invalid configuration or I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .checks import run_checks, write_reports
from .outputs import REPORTS_DIR, OutputError, load_run, replay, run_scenario, run_sweep
from .scaling import ScalingFamily, validate_convergence
from .scenario import (CHECKS, FAMILY_PRESETS, PRESETS, ScenarioError, load_scenario,
                       preset_scenario)
from .traits import ConfigurationError, TraitSpace

ENV_PREFIX = "BRANCHSIM_"
log = logging.getLogger("branchsim")


def _env_default(name: str, cast=str, default=None):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return default
    if cast is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    try:
        return cast(raw)
    except ValueError:
        raise ConfigurationError(f"environment {ENV_PREFIX}{name.upper()}: cannot parse "
                                 f"{raw!r}") from None


def _common(p: argparse.ArgumentParser, scenario: bool = True) -> None:
    if scenario:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--config", default=_env_default("config"),
                       help="scenario YAML file")
        g.add_argument("--preset", choices=sorted(PRESETS), default=_env_default("preset"),
                       help="built-in scenario preset")
        p.add_argument("--seed", type=int, default=_env_default("seed", int),
                       help="override the scenario seed")
        p.add_argument("--replicates", type=int, default=_env_default("replicates", int),
                       help="override the replicate count")
    p.add_argument("--out", default=_env_default("out"), help="output directory")
    p.add_argument("--threads", type=int, default=_env_default("threads", int, 1),
                   help="worker threads for replicates (results do not depend on it)")
    p.add_argument("--check", action="append", choices=CHECKS,
                   default=_env_default("check", lambda s: s.split(",")),
                   help="diagnostic to run (repeatable)")
    p.add_argument("--tolerance-scale", type=float,
                   default=_env_default("tolerance_scale", float, 1.0),
                   help="multiply every check threshold and tolerance")
    p.add_argument("--strict", action="store_true", default=_env_default("strict", bool, False),
                   help="exit with status 1 when a check fails")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="branchsim", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"branchsim {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario at one system size")
    _common(p)
    p.add_argument("--K", type=float, default=None, help="system size (default: first K)")

    p = sub.add_parser("sweep", help="run a scenario over its K_list")
    _common(p)

    p = sub.add_parser("validate-scaling", help="check convergence of the rescaled mechanism")
    _common(p)
    p.add_argument("--family", choices=FAMILY_PRESETS, default=_env_default("family"),
                   help="family with default parameters (instead of --config/--preset)")
    p.add_argument("--beta", type=float, default=0.5, help="index for beta_stable")
    p.add_argument("--K-list", type=float, nargs="+", default=[1e2, 1e3, 1e4])
    p.add_argument("--tolerance", type=float, default=None,
                   help="sup-error tolerance at the largest K")

    p = sub.add_parser("diagnose", help="run diagnostics on a stored run directory")
    p.add_argument("run_dir", help="run directory containing manifest.json")
    _common(p, scenario=False)

    p = sub.add_parser("replay", help="re-execute a manifest and compare outputs bytewise")
    p.add_argument("manifest", help="manifest.json or its run directory")
    _common(p, scenario=False)
    return ap


def _scenario(args):
    if args.config:
        s = load_scenario(args.config)
    elif args.preset:
        s = preset_scenario(args.preset)
    else:
        raise ConfigurationError("give --config or --preset "
                                 f"(or set {ENV_PREFIX}CONFIG / {ENV_PREFIX}PRESET)")
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.replicates is not None:
        over["replicates"] = args.replicates
    if args.out is not None:
        over["output"] = args.out
    return s.with_overrides(over) if over else s


def _report(results, out_dir) -> bool:
    for r in results:
        print(r.summary)
    if results and out_dir is not None:
        write_reports(results, out_dir)
    return any(r.failed for r in results)


def cmd_simulate(args) -> int:
    s = _scenario(args)
    K = args.K if args.K is not None else s.K_values[0]
    want = bool(args.check) or bool(s.diagnostics)
    man, trajs = run_scenario(s, s.output, K, threads=args.threads, keep=want)
    print(f"wrote {man.replicates} replicates (K={K:g}) to {s.output}; "
          f"output hash {man.output_hash}")
    failed = _report(run_checks(s, K, trajs, args.check, args.tolerance_scale),
                     Path(s.output) / REPORTS_DIR) if want else False
    return 1 if (failed and args.strict) else 0


def cmd_sweep(args) -> int:
    s = _scenario(args)
    index = run_sweep(s, s.output, threads=args.threads)
    failed = False
    for run in index["runs"]:
        print(f"K={run['K']:g}: {run['dir']} output hash {run['output_hash']}")
        if args.check or s.diagnostics:
            _, _, trajs = load_run(Path(s.output) / run["dir"])
            res = run_checks(s, run["K"], trajs, args.check, args.tolerance_scale)
            failed |= _report(res, Path(s.output) / run["dir"] / REPORTS_DIR)
    return 1 if (failed and args.strict) else 0


def _default_family(name: str, beta: float) -> ScalingFamily:
    sp = TraitSpace.interval(0.0, 1.0)
    if name == "single_offspring":
        return ScalingFamily.single_offspring(sp, b=1.0, sigma=1.0)
    if name == "beta_stable":
        return ScalingFamily.beta_stable(sp, beta, gamma=1.0, d0=0.0)
    if name == "jackpot":
        from .functions import PairFunction
        return ScalingFamily.jackpot_family(sp, PairFunction.distance(1.0), b=1.0, sigma=1.0)
    return ScalingFamily.deterministic(sp, b=2.0, d=1.0)


def cmd_validate_scaling(args) -> int:
    if args.family:
        fam = _default_family(args.family, args.beta)
    else:
        fam = _scenario(args).family
    kw = {}
    if args.tolerance is not None:
        kw["tolerance"] = args.tolerance * args.tolerance_scale
    elif args.tolerance_scale != 1.0:
        kw["tolerance"] = 0.05 * args.tolerance_scale
    rep = validate_convergence(fam, K_list=tuple(args.K_list), **kw)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        rep.to_csv(out / "scaling.csv")
    else:
        sys.stdout.write("K,sup_error,fitted_exponent\n")
        for row in rep.rows():
            sys.stdout.write(f"{row['K']!r},{row['sup_error']!r},{row['fitted_exponent']!r}\n")
    print(rep.summary())
    return 1 if (args.strict and not rep.passed) else 0


def cmd_diagnose(args) -> int:
    scen, man, trajs = load_run(args.run_dir)
    if not trajs:
        print("no trajectories stored; nothing to diagnose")
        return 0
    res = run_checks(scen, man.K, trajs, args.check, args.tolerance_scale)
    if not res:
        print("no checks requested (use --check or list diagnostics in the scenario)")
        return 0
    out = Path(args.out) if args.out else Path(args.run_dir) / REPORTS_DIR
    failed = _report(res, out)
    return 1 if (failed and args.strict) else 0


def cmd_replay(args) -> int:
    res = replay(args.manifest, threads=args.threads, out_dir=args.out)
    print(res.summary())
    return 0 if res.identical else 1


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep,
            "validate-scaling": cmd_validate_scaling, "diagnose": cmd_diagnose,
            "replay": cmd_replay}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ScenarioError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigurationError, OutputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
