"""Run directories: versioned data files, a manifest written last, readers and replay.

Layout of a run directory::

    summary.csv               one row per (replicate, snapshot)
    snapshots.csv             per-trait counts at each snapshot (when atoms are recorded)
    events/rep_000000.ndjson  event log of one replicate (when events are recorded)
    manifest.json             scenario, seeds, exit flags and file digests; written last

Reals are written with ``repr``, the shortest decimal string that round-trips.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import __version__
from .engine import (CLONAL, DEATH_COMPETITION, DEATH_NATURAL, MUTANT, EventLog, Trajectory,
                     iter_replicates)
from .population import Population
from .scenario import Scenario, parse_scenario
from .traits import TraitSpace

SUMMARY_HEADER = "# branchsim-summary v1"
SNAPSHOT_HEADER = "# branchsim-snapshots v1"
EVENTS_FORMAT = "branchsim-events"
MANIFEST_FORMAT = "branchsim-manifest"
SWEEP_FORMAT = "branchsim-sweep"
FORMAT_VERSION = 1
REPORTS_DIR = "reports"  # diagnostics output; not part of the reproducible data set
KIND_NAMES = {CLONAL: "clonal", MUTANT: "mutant", DEATH_NATURAL: "death_natural",
              DEATH_COMPETITION: "death_competition"}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}
SUMMARY_FIELDS = ("replicate", "substream", "snapshot", "t", "N", "sup_N", "area", "exit",
                  "exit_time", "events", "proposals", "mass_time", "kcap_hits", "final_N")


class OutputError(OSError):
    """File-system or format problem, always naming the offending path."""


def _r(v) -> str:
    return repr(float(v))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _trait_columns(space: TraitSpace) -> list[str]:
    return ["label"] if space.is_finite else [f"x{i}" for i in range(space.dimension)]


def _trait_cells(space: TraitSpace, x: np.ndarray) -> list[str]:
    if space.is_finite:
        return [space.labels[int(x[0])]]
    return [_r(v) for v in x]


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """Everything needed to regenerate a run directory bit for bit."""

    scenario_text: str
    scenario_hash: str
    code_version: str
    K: float
    seed: int
    replicates: int
    substreams: list[int]
    exit_flags: list[str]
    wall_clock: float
    threads: int
    files: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def output_hash(self) -> str:
        """Digest over all data-file digests (manifest excluded)."""
        text = json.dumps(sorted(self.files.items()))
        return hashlib.sha256(text.encode()).hexdigest()

    def to_json(self) -> dict:
        return {"format": MANIFEST_FORMAT, "version": FORMAT_VERSION,
                "code_version": self.code_version, "scenario_hash": self.scenario_hash,
                "K": self.K, "seed": self.seed, "replicates": self.replicates,
                "substreams": self.substreams, "exit_flags": self.exit_flags,
                "exit_counts": {k: self.exit_flags.count(k) for k in sorted(set(self.exit_flags))},
                "wall_clock_seconds": self.wall_clock, "threads": self.threads,
                "files": self.files, "output_hash": self.output_hash, "extra": self.extra,
                "scenario": self.scenario_text}

    @classmethod
    def from_json(cls, d: dict, path="manifest") -> "RunManifest":
        if d.get("format") != MANIFEST_FORMAT:
            raise OutputError(f"{path}: not a branchsim run manifest")
        if d.get("version") != FORMAT_VERSION:
            raise OutputError(f"{path}: unsupported manifest version {d.get('version')!r}")
        return cls(d["scenario"], d["scenario_hash"], d["code_version"], float(d["K"]),
                   int(d["seed"]), int(d["replicates"]), list(d["substreams"]),
                   list(d["exit_flags"]), float(d["wall_clock_seconds"]), int(d["threads"]),
                   dict(d["files"]), dict(d.get("extra", {})))


class RunWriter:
    """Streams trajectories into a run directory; :meth:`close` writes the manifest."""

    def __init__(self, out_dir, scenario: Scenario, K: float, threads: int = 1):
        self.dir = Path(out_dir)
        self.scenario = scenario
        self.K = float(K)
        self.threads = int(threads)
        self.space = scenario.space
        self._summary = None
        self._snap = None
        self._streams: list[int] = []
        self._exits: list[str] = []
        self._t0 = time.perf_counter()
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
            # drop data files of an earlier run so the manifest lists only this run
            for name in ("manifest.json", "summary.csv", "snapshots.csv"):
                stale = self.dir / name
                if stale.exists():
                    stale.unlink()
            if (self.dir / "events").is_dir():
                shutil.rmtree(self.dir / "events")
        except OSError as exc:
            raise OutputError(f"{self.dir}: cannot prepare output directory ({exc})") from exc

    def _open(self, name: str):
        p = self.dir / name
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            return open(p, "w", encoding="utf-8", newline="")
        except OSError as exc:
            raise OutputError(f"{p}: cannot open for writing ({exc})") from exc

    def add(self, tr: Trajectory) -> None:
        if self._summary is None:
            self._summary = self._open("summary.csv")
            self._summary.write(SUMMARY_HEADER + "\n")
            self._summary_csv = csv.writer(self._summary, lineterminator="\n")
            self._summary_csv.writerow(SUMMARY_FIELDS)
        st = tr.stats
        for i, t in enumerate(tr.snapshot_times):
            self._summary_csv.writerow([tr.replicate, tr.replicate, i, _r(t), int(tr.snap_N[i]),
                                        int(tr.snap_sup[i]), _r(tr.snap_area[i]), tr.exit,
                                        _r(tr.exit_time), st["events"], st["proposals"],
                                        _r(st["mass_time"]), st["kcap_hits"], st["final_N"]])
        if tr.atom_offsets is not None:
            if self._snap is None:
                self._snap = self._open("snapshots.csv")
                self._snap.write(SNAPSHOT_HEADER + "\n")
                self._snap.write("# space: " + json.dumps(self.space.to_config()) + "\n")
                self._snap.write("# K: " + _r(self.K) + "\n")
                self._snap_csv = csv.writer(self._snap, lineterminator="\n")
                self._snap_csv.writerow(["replicate", "snapshot", "t", "trait_id"]
                                        + _trait_columns(self.space) + ["count"])
            for i, t in enumerate(tr.snapshot_times):
                tid, m = tr.snapshot_atoms(i)
                for a, c in zip(tid, m):
                    self._snap_csv.writerow([tr.replicate, i, _r(t), int(a)]
                                            + _trait_cells(self.space, tr.traits[a]) + [int(c)])
        if tr.events is not None:
            self._write_events(tr)
        self._streams.append(tr.replicate)
        self._exits.append(tr.exit)

    def _write_events(self, tr: Trajectory) -> None:
        fh = self._open(f"events/rep_{tr.replicate:06d}.ndjson")
        with fh:
            head = {"format": EVENTS_FORMAT, "version": FORMAT_VERSION,
                    "replicate": tr.replicate, "K": self.K, "config_hash": tr.config_hash,
                    "space": self.space.to_config(),
                    "traits": [[float(v) for v in x] for x in tr.traits]}
            fh.write(json.dumps(head) + "\n")
            ev = tr.events
            buf = io.StringIO()
            for t, k, p, c, n in zip(ev.t.tolist(), ev.kind.tolist(), ev.parent.tolist(),
                                     ev.child.tolist(), ev.k.tolist()):
                buf.write(f'{{"t":{t!r},"kind":"{KIND_NAMES[k]}","parent":{p},'
                          f'"child":{c},"k":{n}}}\n')
            fh.write(buf.getvalue())

    def close(self, extra: dict | None = None) -> RunManifest:
        for fh in (self._summary, self._snap):
            if fh is not None:
                fh.close()
        files = {}
        for p in sorted(self.dir.rglob("*")):
            rel = p.relative_to(self.dir)
            if p.is_file() and p.name != "manifest.json" and rel.parts[0] != REPORTS_DIR:
                files[p.relative_to(self.dir).as_posix()] = _sha256(p)
        s = self.scenario
        man = RunManifest(s.to_text(), s.digest(), __version__, self.K, s.seed,
                          len(self._streams), self._streams, self._exits,
                          time.perf_counter() - self._t0, self.threads, files, extra or {})
        # the manifest is the commit marker: write it atomically and last
        tmp = self.dir / "manifest.json.tmp"
        try:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(man.to_json(), fh, indent=1)
                fh.write("\n")
            os.replace(tmp, self.dir / "manifest.json")
        except OSError as exc:
            raise OutputError(f"{self.dir / 'manifest.json'}: cannot write ({exc})") from exc
        return man


def write_outputs(out_dir, scenario: Scenario, K: float, trajectories: Iterable[Trajectory],
                  threads: int = 1, extra: dict | None = None) -> RunManifest:
    """Write a run directory.  An empty trajectory list yields the manifest only."""
    w = RunWriter(out_dir, scenario, K, threads)
    for tr in trajectories:
        w.add(tr)
    return w.close(extra)


def run_scenario(scenario: Scenario, out_dir, K: float | None = None,
                 replicates: int | None = None, threads: int = 1,
                 keep: bool = False) -> tuple[RunManifest, list[Trajectory]]:
    """Simulate ``replicates`` trajectories at size ``K`` and write them to ``out_dir``.

    Trajectories stream to disk; ``keep`` also returns them in memory.
    """
    K = scenario.K_values[0] if K is None else K
    R = scenario.replicates if replicates is None else replicates
    cfg = scenario.sim_config(K)
    kept: list[Trajectory] = []
    w = RunWriter(out_dir, scenario, K, threads)
    for tr in iter_replicates(cfg, range(R), threads):
        w.add(tr)
        if keep:
            kept.append(tr)
    return w.close({"replicates_requested": R}), kept


def run_sweep(scenario: Scenario, out_dir, replicates: int | None = None,
              threads: int = 1) -> dict:
    """One run directory per K in ``K_list`` plus a sweep index written last."""
    out = Path(out_dir)
    runs = []
    for K in scenario.K_values:
        sub = f"K={K:g}"
        man, _ = run_scenario(scenario, out / sub, K, replicates, threads)
        runs.append({"K": K, "dir": sub, "output_hash": man.output_hash})
    index = {"format": SWEEP_FORMAT, "version": FORMAT_VERSION, "code_version": __version__,
             "scenario_hash": scenario.digest(), "runs": runs}
    try:
        with open(out / "sweep.json", "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=1)
            fh.write("\n")
    except OSError as exc:
        raise OutputError(f"{out / 'sweep.json'}: cannot write ({exc})") from exc
    return index


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------

def read_manifest(path) -> RunManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        with open(p, encoding="utf-8") as fh:
            return RunManifest.from_json(json.load(fh), p)
    except FileNotFoundError:
        raise OutputError(f"{p}: no manifest (run incomplete or not a run directory)") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise OutputError(f"{p}: malformed manifest ({exc})") from None


def _csv_body(path: Path, header: str):
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise OutputError(f"{path}: cannot open ({exc})") from exc
    first = fh.readline().rstrip("\n")
    if first != header:
        fh.close()
        raise OutputError(f"{path}: expected header {header!r}, found {first!r}")
    meta = {}
    pos = fh.tell()
    line = fh.readline()
    while line.startswith("# "):
        key, _, val = line[2:].rstrip("\n").partition(": ")
        meta[key] = val
        pos = fh.tell()
        line = fh.readline()
    fh.seek(pos)
    return fh, meta


def read_summary(path) -> list[dict]:
    p = Path(path)
    fh, _ = _csv_body(p, SUMMARY_HEADER)
    ints = {"replicate", "substream", "snapshot", "N", "sup_N", "events", "proposals",
            "kcap_hits", "final_N"}
    with fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k in ints else v if k == "exit" else float(v))
                         for k, v in row.items()})
    return rows


@dataclass
class SnapshotTable:
    space: TraitSpace
    K: float
    replicate: np.ndarray
    snapshot: np.ndarray
    t: np.ndarray
    trait_id: np.ndarray
    traits: np.ndarray
    count: np.ndarray

    def population(self, replicate: int, snapshot: int, competition=None) -> Population:
        sel = (self.replicate == replicate) & (self.snapshot == snapshot)
        return Population(self.space, self.K, competition,
                          [(x, int(c)) for x, c in zip(self.traits[sel], self.count[sel])])


def read_snapshots(path) -> SnapshotTable:
    p = Path(path)
    fh, meta = _csv_body(p, SNAPSHOT_HEADER)
    try:
        sp = json.loads(meta["space"])
        space = (TraitSpace.finite(sp["labels"]) if sp["kind"] == "finite"
                 else TraitSpace.box(sp["lower"], sp["upper"]))
        K = float(meta["K"])
    except (KeyError, json.JSONDecodeError) as exc:
        fh.close()
        raise OutputError(f"{p}: malformed snapshot metadata ({exc})") from None
    with fh:
        rows = list(csv.reader(fh))
    cols = rows[0]
    body = rows[1:]
    d = len(cols) - 5
    rep = np.array([int(r[0]) for r in body], dtype=np.int64)
    snap = np.array([int(r[1]) for r in body], dtype=np.int64)
    t = np.array([float(r[2]) for r in body])
    tid = np.array([int(r[3]) for r in body], dtype=np.int64)
    if space.is_finite:
        X = np.array([[float(space.labels.index(r[4]))] for r in body]).reshape(-1, 1)
    else:
        X = np.array([[float(v) for v in r[4:4 + d]] for r in body]).reshape(-1, d)
    cnt = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return SnapshotTable(space, K, rep, snap, t, tid, X, cnt)


def read_events(path) -> tuple[dict, EventLog]:
    p = Path(path)
    try:
        with open(p, encoding="utf-8") as fh:
            head = json.loads(fh.readline())
            if head.get("format") != EVENTS_FORMAT or head.get("version") != FORMAT_VERSION:
                raise OutputError(f"{p}: not a version-{FORMAT_VERSION} branchsim event log")
            recs = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise OutputError(f"{p}: cannot read ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise OutputError(f"{p}: malformed event record ({exc})") from None
    ev = EventLog(np.array([r["t"] for r in recs], dtype=float),
                  np.array([KIND_CODES[r["kind"]] for r in recs], dtype=np.int64),
                  np.array([r["parent"] for r in recs], dtype=np.int64),
                  np.array([r["child"] for r in recs], dtype=np.int64),
                  np.array([r["k"] for r in recs], dtype=np.int64))
    return head, ev


def load_run(run_dir) -> tuple[Scenario, RunManifest, list[Trajectory]]:
    """Rebuild trajectories from a run directory for offline diagnostics."""
    d = Path(run_dir)
    man = read_manifest(d)
    scen = parse_scenario(man.scenario_text)
    if "summary.csv" not in man.files:
        return scen, man, []
    rows = read_summary(d / "summary.csv")
    snaps = read_snapshots(d / "snapshots.csv") if "snapshots.csv" in man.files else None
    by_rep: dict[int, list[dict]] = {}
    for r in rows:
        by_rep.setdefault(r["replicate"], []).append(r)
    trajs = []
    space = scen.space
    for rep in sorted(by_rep):
        rs = sorted(by_rep[rep], key=lambda r: r["snapshot"])
        ev_name = f"events/rep_{rep:06d}.ndjson"
        traits = None
        events = None
        chash = ""
        if ev_name in man.files:
            head, events = read_events(d / ev_name)
            traits = np.array(head["traits"], dtype=float).reshape(-1, max(space.dimension, 1))
            chash = head["config_hash"]
        off = tid = mult = None
        if snaps is not None:
            sel = snaps.replicate == rep
            s_snap, s_tid, s_X, s_m = (snaps.snapshot[sel], snaps.trait_id[sel],
                                       snaps.traits[sel], snaps.count[sel])
            if traits is None:
                n_tr = int(s_tid.max()) + 1 if len(s_tid) else 0
                traits = np.zeros((n_tr, space.dimension))
                traits[s_tid] = s_X
            counts = np.bincount(s_snap, minlength=len(rs))
            off = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
            order = np.argsort(s_snap, kind="stable")
            tid, mult = s_tid[order], s_m[order]
        if traits is None:
            traits = np.zeros((0, space.dimension))
        r0 = rs[0]
        stats = {k: r0[k] for k in ("events", "proposals", "mass_time", "kcap_hits",
                                    "final_N")}
        trajs.append(Trajectory(chash, space, man.K, traits,
                                np.array([r["t"] for r in rs]),
                                np.array([r["N"] for r in rs], dtype=np.int64),
                                np.array([r["sup_N"] for r in rs], dtype=np.int64),
                                np.array([r["area"] for r in rs]), off, tid, mult, events,
                                r0["exit"], r0["exit_time"], stats, rep))
    return scen, man, trajs


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

@dataclass
class ReplayResult:
    identical: bool
    mismatched: list[str]
    missing: list[str]
    extra: list[str]
    code_version_match: bool

    def summary(self) -> str:
        if self.identical:
            return "PASS replay: all data files byte-identical"
        parts = []
        if self.mismatched:
            parts.append("differ: " + ", ".join(self.mismatched))
        if self.missing:
            parts.append("not regenerated: " + ", ".join(self.missing))
        if self.extra:
            parts.append("unexpected: " + ", ".join(self.extra))
        if not self.code_version_match:
            parts.append("manifest was written by a different code version")
        return "FAIL replay: " + "; ".join(parts)


def replay(manifest_path, threads: int = 1, out_dir=None) -> ReplayResult:
    """Re-execute a run from its manifest and compare every data-file digest."""
    man = read_manifest(manifest_path)
    scen = parse_scenario(man.scenario_text)
    tmp = None
    if out_dir is None:
        tmp = tempfile.mkdtemp(prefix="branchsim-replay-")
        out_dir = tmp
    try:
        cfg = scen.sim_config(man.K)
        w = RunWriter(out_dir, scen, man.K, threads)
        for tr in iter_replicates(cfg, man.substreams, threads):
            w.add(tr)
        new = w.close(man.extra)
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
    mism = sorted(k for k in man.files if k in new.files and new.files[k] != man.files[k])
    missing = sorted(k for k in man.files if k not in new.files)
    extra = sorted(k for k in new.files if k not in man.files)
    ok_version = man.code_version == __version__
    return ReplayResult(not (mism or missing or extra), mism, missing, extra, ok_version)
