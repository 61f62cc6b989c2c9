import json

import numpy as np
import pytest

from branchsim import __version__
from branchsim.engine import run_replicates
from branchsim.outputs import (SNAPSHOT_HEADER, SUMMARY_HEADER, OutputError, load_run,
                               read_events, read_manifest, read_snapshots, read_summary, replay,
                               run_scenario, run_sweep, write_outputs)
from branchsim.scenario import preset_scenario, scenario_from_dict


@pytest.fixture
def feller():
    return preset_scenario("feller", replicates=6)


def test_empty_run_writes_manifest_only(tmp_path, feller):
    man = write_outputs(tmp_path, feller, 200.0, [])
    assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.json"]
    assert man.files == {} and man.replicates == 0


def test_manifest_contents(tmp_path, feller):
    man, _ = run_scenario(feller, tmp_path, 200.0)
    d = json.loads((tmp_path / "manifest.json").read_text())
    assert d["format"] == "branchsim-manifest" and d["version"] == 1
    assert d["code_version"] == __version__
    assert d["scenario_hash"] == feller.digest()
    assert d["substreams"] == list(range(6))
    assert len(d["exit_flags"]) == 6
    assert d["output_hash"] == man.output_hash
    assert set(d["files"]) == {"summary.csv", "snapshots.csv"} | {
        f"events/rep_{i:06d}.ndjson" for i in range(6)}
    assert read_manifest(tmp_path).to_json() == d


def test_versioned_headers(tmp_path, feller):
    run_scenario(feller, tmp_path, 200.0)
    assert (tmp_path / "summary.csv").read_text().splitlines()[0] == SUMMARY_HEADER
    assert (tmp_path / "snapshots.csv").read_text().splitlines()[0] == SNAPSHOT_HEADER
    head = json.loads((tmp_path / "events/rep_000000.ndjson").read_text().splitlines()[0])
    assert head["format"] == "branchsim-events" and head["version"] == 1


def test_event_logs_only_when_recorded(tmp_path):
    s = preset_scenario("feller", replicates=4, record_events=False)
    man, _ = run_scenario(s, tmp_path, 200.0)
    assert not (tmp_path / "events").exists()
    assert set(man.files) == {"summary.csv", "snapshots.csv"}
    n_snap = len(s.sim_config(200.0).snapshot_times)
    assert len(read_summary(tmp_path / "summary.csv")) == 4 * n_snap == 16


def test_snapshot_round_trip_population(tmp_path):
    s = preset_scenario("logistic", replicates=3)
    trs = run_replicates(s.sim_config(100.0), 3)
    write_outputs(tmp_path, s, 100.0, trs)
    tab = read_snapshots(tmp_path / "snapshots.csv")
    for tr in trs:
        for i in range(len(tr.snapshot_times)):
            assert tab.population(tr.replicate, i) == tr.snapshot(i)


def test_finite_space_snapshot_round_trip(tmp_path):
    s = preset_scenario("two_trait", replicates=2)
    trs = run_replicates(s.sim_config(100.0), 2)
    write_outputs(tmp_path, s, 100.0, trs)
    tab = read_snapshots(tmp_path / "snapshots.csv")
    assert tab.population(1, 3) == trs[1].snapshot(3)


def test_events_round_trip(tmp_path, feller):
    _, trs = run_scenario(feller, tmp_path, 200.0, keep=True)
    head, ev = read_events(tmp_path / "events/rep_000002.ndjson")
    assert head["replicate"] == 2
    for name in ("t", "kind", "parent", "child", "k"):
        assert np.array_equal(getattr(ev, name), getattr(trs[2].events, name))


def test_reals_use_shortest_repr(tmp_path, feller):
    _, trs = run_scenario(feller, tmp_path, 200.0, keep=True)
    rows = read_summary(tmp_path / "summary.csv")
    areas = [r["area"] for r in rows if r["replicate"] == 0]
    assert areas == trs[0].snap_area.tolist()


def test_load_run_rebuilds_trajectories(tmp_path, feller):
    _, trs = run_scenario(feller, tmp_path, 200.0, keep=True)
    scen, man, back = load_run(tmp_path)
    assert scen == feller and man.K == 200.0
    for a, b in zip(trs, back):
        assert np.array_equal(a.snap_N, b.snap_N)
        assert np.array_equal(a.snap_area, b.snap_area)
        assert a.exit == b.exit
        assert a.snapshot(2) == b.snapshot(2)


def test_replay_identical(tmp_path, feller):
    run_scenario(feller, tmp_path, 200.0)
    res = replay(tmp_path / "manifest.json", threads=2)
    assert res.identical, res.summary()
    assert res.summary().startswith("PASS")


def test_replay_detects_tampering(tmp_path, feller):
    run_scenario(feller, tmp_path, 200.0)
    p = tmp_path / "summary.csv"
    p.write_text(p.read_text() + "tampered\n")
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["files"]["summary.csv"] = "0" * 64
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    res = replay(tmp_path)
    assert not res.identical and res.mismatched == ["summary.csv"]
    assert res.summary().startswith("FAIL")


def test_rerun_replaces_stale_files(tmp_path, feller):
    run_scenario(feller, tmp_path, 200.0)
    s = feller.with_overrides({"record_events": False})
    man, _ = run_scenario(s, tmp_path, 200.0)
    assert not (tmp_path / "events").exists()
    assert "events/rep_000000.ndjson" not in man.files


def test_sweep_writes_runs(tmp_path):
    data = dict(preset_scenario("deterministic", replicates=2).data)
    data.pop("K")
    data.update(K_list=[100.0, 1000.0], snapshot_times=[0.0, 1.0], horizon=1.0)
    index = run_sweep(scenario_from_dict(data), tmp_path)
    assert [r["dir"] for r in index["runs"]] == ["K=100", "K=1000"]
    assert json.loads((tmp_path / "sweep.json").read_text())["format"] == "branchsim-sweep"
    assert read_manifest(tmp_path / "K=1000").K == 1000.0


def test_io_errors_have_paths(tmp_path):
    with pytest.raises(OutputError, match="manifest"):
        read_manifest(tmp_path)
    bad = tmp_path / "summary.csv"
    bad.write_text("not a header\n")
    with pytest.raises(OutputError, match="summary.csv"):
        read_summary(bad)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OutputError, match="file"):
        write_outputs(blocker / "sub", preset_scenario("feller"), 200.0, [])
