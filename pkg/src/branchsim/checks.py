"""Run the diagnostics declared in a scenario and write long-format reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from . import diagnostics as D
from .engine import Trajectory
from .population import TestFunction
from .scaling import MechanismLimit
from .scenario import DiagnosticSpec, Scenario

REPORT_FIELDS = ("check", "K", "t", "value", "se", "z")


@dataclass
class CheckResult:
    check: str
    verdict: str  # PASS, FAIL or INFO (no oracle to compare against)
    summary: str
    rows: list[dict] = field(default_factory=list)
    data: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.verdict == "FAIL"


def _times(spec: DiagnosticSpec, scen: Scenario) -> list[float]:
    if spec.times:
        return list(spec.times)
    st = [t for t in scen.snapshot_times if t > 0]
    return st or [scen.horizon]


def riccati_laplace(mech: MechanismLimit, z: float, mass0: float, t: float) -> float | None:
    """``exp(-mass0 * u_t)`` with ``u' = -psi(u)``, ``u_0 = z``, for trait-free mechanisms.

    Returns ``None`` when the oracle does not apply (trait-dependent coefficients or
    nonzero competition).
    """
    if mech.c.constant_value != 0.0:
        return None
    if mech.lin.constant_value is None or mech.sigma.constant_value is None:
        return None
    x0 = np.zeros(mech.space.dimension)
    sol = solve_ivp(lambda s, u: [-mech.psi(x0, max(float(u[0]), 0.0))], (0.0, t), [z],
                    rtol=1e-10, atol=1e-12)
    return math.exp(-mass0 * float(sol.y[0, -1]))


def run_check(spec: DiagnosticSpec, scen: Scenario, K: float, trajs: Sequence[Trajectory],
              tolerance_scale: float = 1.0) -> CheckResult:
    thr = spec.threshold * tolerance_scale
    kern = scen.kernels(K)
    phi = spec.phi
    times = _times(spec, scen)
    name = spec.check
    if name == "exp-martingale":
        rep = D.exp_martingale_check(trajs, phi, kern, times, name=f"exp-martingale[{phi.name}]")
        rep.threshold = thr
        return CheckResult(name, "PASS" if rep.passed else "FAIL", rep.summary(), rep.rows(K),
                           rep.to_dict())
    mech = scen.family.limit()
    if name == "limit-martingale":
        rep = D.limit_martingale_check(trajs, mech.attach(phi), mech, times,
                                       name=f"limit-martingale[{phi.name}]")
        rep.threshold = thr
        return CheckResult(name, "PASS" if rep.passed else "FAIL", rep.summary(), rep.rows(K),
                           rep.to_dict())
    if name == "quadratic-variation":
        rep = D.quadratic_variation_check(trajs, mech.attach(phi), mech, times,
                                          eps=spec.eps or 0.1)
        rep.threshold = thr
        rows = [{"check": name, "K": K, "t": float(t), "value": float(v), "se": float(s),
                 "z": float(z)} for t, v, s, z in zip(rep.times, rep.mean_M2, rep.se_M2, rep.z)]
        return CheckResult(name, "PASS" if rep.passed else "FAIL", rep.summary(), rows,
                           rep.to_dict())
    if name == "jump-census":
        rep = D.jump_census(trajs, spec.eps, mech, kern)
        ok = abs(rep.z_limit) <= thr if rep.expected_limit > 0 else rep.count == 0
        verdict = "PASS" if ok else "FAIL"
        rows = [{"check": name, "K": K, "t": float("nan"), "value": rep.count,
                 "se": math.sqrt(max(rep.expected_limit, 0.0)), "z": rep.z_limit}]
        return CheckResult(name, verdict, f"{verdict} " + rep.summary(), rows, rep.to_dict())
    if name == "laplace":
        est = D.laplace_functional(trajs, phi, times)
        rows = est.rows()
        oracle = None
        if phi.name == "constant":
            z = phi.params["value"]
            m0 = sum(k for _, k in scen.initial(K)) / K
            oracle = [riccati_laplace(mech, z, m0, t) for t in times]
        if oracle is None or any(o is None for o in oracle):
            text = "INFO laplace: " + ", ".join(f"t={t:g}: {m:.4f}±{s:.4f}" for t, m, s in
                                                zip(times, est.mean, est.se))
            return CheckResult(name, "INFO", text, rows, {"mean": est.mean.tolist()})
        tol = (spec.tolerance or 0.02) * tolerance_scale
        gaps = np.abs(est.mean - np.array(oracle))
        ok = bool(np.all(gaps <= tol))
        verdict = "PASS" if ok else "FAIL"
        text = f"{verdict} laplace (R={est.n}): " + ", ".join(
            f"t={t:g}: {m:.4f}±{s:.4f} vs oracle {o:.4f}" for t, m, s, o in
            zip(times, est.mean, est.se, oracle)) + f" (tolerance {tol:g})"
        for r, o in zip(rows, oracle):
            r["z"] = (r["value"] - o) / r["se"] if r["se"] > 0 else 0.0
        return CheckResult(name, verdict, text, rows,
                           {"mean": est.mean.tolist(), "oracle": oracle, "tolerance": tol})
    if name == "moment":
        heavy = scen.family.preset == "beta_stable" and scen.family.beta < 1
        rep = D.moment_estimate(trajs, spec.q or 1, times, infinite_variance=heavy)
        text = f"INFO moment q={rep.q} (R={rep.n}): " + ", ".join(
            f"t={t:g}: {m:.4g}±{s:.2g}" for t, m, s in zip(times, rep.mean, rep.se))
        if rep.warning:
            text += f"; warning: {rep.warning}"
        return CheckResult(name, "INFO", text, rep.rows(), {"mean": rep.mean.tolist()})
    if name == "mean-flow":
        rep = D.mean_flow_check(trajs, kern, times)
        rep.threshold = thr
        rows = []
        for a, t in enumerate(rep.times):
            for j, lab in enumerate(rep.labels):
                rows.append({"check": f"mean-flow[{lab}]", "K": K, "t": float(t),
                             "value": float(rep.mean[a, j]), "se": float(rep.se[a, j]),
                             "z": float(rep.z[a, j])})
        return CheckResult(name, "PASS" if rep.passed else "FAIL", rep.summary(), rows,
                           {"oracle": rep.oracle.tolist(), "mean": rep.mean.tolist()})
    raise ValueError(f"unknown check {name!r}")


def default_spec(check: str, scen: Scenario) -> DiagnosticSpec:
    """Spec used when a check is requested on the command line but not in the scenario."""
    for d in scen.diagnostics:
        if d.check == check:
            return d
    eps = 0.1 if check in ("jump-census", "quadratic-variation") else None
    return DiagnosticSpec(check, TestFunction.constant(1.0), None, eps,
                          1 if check == "moment" else None, 3.0, None)


def run_checks(scen: Scenario, K: float, trajs: Sequence[Trajectory],
               checks: Sequence[str] | None = None,
               tolerance_scale: float = 1.0) -> list[CheckResult]:
    if checks:
        specs = []
        for c in checks:
            matching = [d for d in scen.diagnostics if d.check == c]
            specs.extend(matching or [default_spec(c, scen)])
    else:
        specs = list(scen.diagnostics)
    return [run_check(s, scen, K, trajs, tolerance_scale) for s in specs]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_reports(results: Sequence[CheckResult], out_dir) -> None:
    """``report.csv`` in long format plus ``summary.json`` with one verdict per check."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "report.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("# branchsim-report v1\n")
        w = csv.DictWriter(fh, REPORT_FIELDS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in results:
            for row in r.rows:
                w.writerow({k: _fmt(row.get(k)) for k in REPORT_FIELDS})
    summary = {"format": "branchsim-report-summary", "version": 1,
               "passed": not any(r.failed for r in results),
               "checks": [{"check": r.check, "verdict": r.verdict, "summary": r.summary,
                           "details": r.data} for r in results]}
    with open(d / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return repr(o)
