import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from graspforge import cli
from graspforge.aggregate import AggregationConfig, aggregate_full, visual_aggregate_hand, visual_aggregate_object
from graspforge.heatmap import load_binary
from graspforge.mesh import bbox_keypoints_27
from graspforge.sample import CandidateSet
from graspforge.scenario import Scenario
from graspforge.schema_io import dumps, read_json


@pytest.fixture(scope="module")
def scenario_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scn")
    assert cli.main(["scenario", "gen", "--template", "pinch-sphere", "--seed", "0", "-o", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def pipeline_runs(scenario_dir, tmp_path_factory):
    out = {}
    for t in (1, 8):
        d = tmp_path_factory.mktemp(f"run{t}")
        assert cli.main(["pipeline", "-i", str(scenario_dir / "scenario.json"), "--seed", "0", "-o", str(d),
                         "--threads", str(t), "--csv"]) == 0
        out[t] = d
    return out


def test_scenario_gen_outputs(scenario_dir):
    assert {p.name for p in scenario_dir.iterdir()} >= {"scenario.json", "object.obj", "hand.obj"}
    assert Scenario.load(scenario_dir / "scenario.json").template == "pinch-sphere"


def test_pipeline_smoke(pipeline_runs):
    d = pipeline_runs[1]
    m = read_json(d / "metrics.json")
    assert np.isfinite(m["pose"]["MJE"])
    assert (d / "metrics.csv").read_text().startswith("name,MJE")
    for name in ("forces.json", "candidates_hand.json", "candidates_object.json", "aggregation.json",
                 "metrics.json"):
        doc = read_json(d / name)
        assert doc["schema"].startswith("graspforge.") and len(doc["config_hash"]) == 64 and "seed" in doc


def test_pipeline_thread_invariant(pipeline_runs):
    a, b = pipeline_runs[1], pipeline_runs[8]
    for name in ("aggregation.json", "metrics.json", "candidates_hand.json", "candidates_object.json",
                 "heatmaps_hand.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_missing_input_is_io_error(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "scenario.json"
    assert cli.main(["solve-forces", "-i", str(missing), "-o", str(tmp_path / "r.json")]) == 5
    assert str(missing) in capsys.readouterr().err


def test_console_script(tmp_path):
    r = subprocess.run([sys.executable, "-m", "graspforge.cli", "eval", "--pred", str(tmp_path / "p.json"),
                        "--scenario", str(tmp_path / "s.json"), "-o", str(tmp_path / "m.json")],
                       capture_output=True, text=True)
    assert r.returncode == 5 and "s.json" in r.stderr
    r = subprocess.run([sys.executable, "-m", "graspforge.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()


def test_schema_error_exit(scenario_dir, tmp_path, capsys):
    d = read_json(scenario_dir / "scenario.json")
    del d["hand"]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    assert cli.main(["solve-forces", "-i", str(p), "-o", str(tmp_path / "r.json")]) == 3
    assert "hand" in capsys.readouterr().err
    p.write_text("{")
    assert cli.main(["solve-forces", "-i", str(p), "-o", str(tmp_path / "r.json")]) == 3


def test_numeric_error_exit(tmp_path, capsys):
    cli.main(["scenario", "gen", "--template", "hover-no-contact", "-o", str(tmp_path)])
    rc = cli.main(["solve-forces", "-i", str(tmp_path / "scenario.json"), "-o", str(tmp_path / "r.json")])
    assert rc == 4 and "AllAnchorsFrozen" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["gen-candidates", "-i", "x", "-o", "y", "--entity", "hand", "--n", "0"],
    ["heatmaps", "-i", "x", "-o", "y", "--corrupt", "blur=1"],
    ["scenario", "gen", "--template", "juggle", "-o", "y"],
    ["solve-forces", "-o", "y"],
])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as e:
        cli.main(argv)
    assert e.value.code == 2


def test_threads_env(monkeypatch):
    monkeypatch.setenv("GRASPFORGE_THREADS", "6")
    assert cli.build_parser().parse_args(["pipeline", "-i", "a", "-o", "b"]).threads == 6
    monkeypatch.setenv("GRASPFORGE_THREADS", "junk")
    assert cli.build_parser().parse_args(["pipeline", "-i", "a", "-o", "b"]).threads == 1


def test_stage_seeds_distinct():
    s = {cli.stage_seed(0, n) for n in ("candidates/hand", "candidates/object", "heatmaps/hand")}
    assert len(s) == 3 and all(0 <= x < 2**64 for x in s)
    assert cli.stage_seed(1, "candidates/hand") != cli.stage_seed(0, "candidates/hand")


def test_solve_forces_svg(scenario_dir, tmp_path):
    rc = cli.main(["solve-forces", "-i", str(scenario_dir / "scenario.json"), "-o", str(tmp_path / "r.json"),
                   "--svg", str(tmp_path / "f.svg"), "--seed", "3"])
    assert rc == 0
    rep = read_json(tmp_path / "r.json")
    assert rep["converged"] and rep["seed"] == 3
    root = ET.parse(tmp_path / "f.svg").getroot()
    strokes = [e.get("stroke") for e in root.iter() if e.tag.endswith("line")]
    assert "blue" in strokes and "gold" in strokes


def test_heatmaps_command(scenario_dir, tmp_path):
    for entity, c in (("hand", 21), ("object", 27)):
        out = tmp_path / f"{entity}.bin"
        assert cli.main(["heatmaps", "-i", str(scenario_dir / "scenario.json"), "-o", str(out), "--entity",
                         entity, "--corrupt", "noise=0.02,dropout=0.1", "--svg", str(tmp_path / "h.svg")]) == 0
        assert load_binary(out).channels == c
        ET.parse(tmp_path / "h.svg")


def _stage_inputs(scn_path, d):
    for entity in ("hand", "object"):
        assert cli.main(["gen-candidates", "-i", str(scn_path), "--entity", entity, "--n", "40", "--seed", "2",
                         "--generator", "perturbation", "-o", str(d / f"c_{entity}.json")]) == 0
        assert cli.main(["heatmaps", "-i", str(scn_path), "--entity", entity, "-o", str(d / f"h_{entity}.bin")]) == 0
    return ([str(d / "c_hand.json"), str(d / "c_object.json")],
            [str(d / "h_hand.bin"), str(d / "h_object.bin")])


def test_aggregate_no_physics_parity(scenario_dir, tmp_path):
    scn_path = scenario_dir / "scenario.json"
    cands, maps = _stage_inputs(scn_path, tmp_path)
    out = tmp_path / "va.json"
    assert cli.main(["aggregate", "-i", str(scn_path), "--candidates", *cands, "--heatmaps", *maps,
                     "--no-physics", "--n", "40", "-o", str(out)]) == 0

    # fixture built straight from the library
    scn = Scenario.load(scn_path)
    hc, oc = (CandidateSet.from_json(read_json(p)) for p in cands)
    hh, oh = (load_binary(p) for p in maps)
    cfg = AggregationConfig(n=40, physics=False)
    doc = aggregate_full(scn, hc, oc, hh, oh, cfg).to_json()
    doc["inputs"] = {"scenario": scn.name}
    fixture = dumps(doc)
    assert out.read_text() == fixture

    hva = visual_aggregate_hand(hc.hand_theta(), scn.pose.trans, hh, scn.intrinsics, scn.shape, 30)
    ova = visual_aggregate_object(oc.rotations(), oc.trans, oh, scn.intrinsics, bbox_keypoints_27(scn.object_mesh()))
    got = read_json(out)
    assert np.array_equal(np.array(got["hand"]["theta"]), hva.theta)
    assert np.array_equal(np.array(got["object"]["R"]), ova.R) and np.array_equal(np.array(got["object"]["T"]), ova.T)
    assert got["physics"] is None

    full = tmp_path / "full.json"
    assert cli.main(["aggregate", "-i", str(scn_path), "--candidates", *cands, "--heatmaps", *maps, "--n", "40",
                     "-o", str(full)]) == 0
    assert read_json(full)["visual"] == got["visual"]


def test_aggregate_rejects_mismatched_inputs(scenario_dir, tmp_path):
    scn_path = scenario_dir / "scenario.json"
    cands, maps = _stage_inputs(scn_path, tmp_path)
    rc = cli.main(["aggregate", "-i", str(scn_path), "--candidates", cands[0], cands[0], "--heatmaps", *maps,
                   "-o", str(tmp_path / "a.json")])
    assert rc == 3


def test_eval_version_mismatch(scenario_dir, pipeline_runs, tmp_path):
    pred = read_json(pipeline_runs[1] / "aggregation.json")
    pred["schema"] = "graspforge.aggregation.v9"
    (tmp_path / "p.json").write_text(json.dumps(pred))
    assert cli.main(["eval", "--pred", str(tmp_path / "p.json"), "--scenario", str(scenario_dir / "scenario.json"),
                     "-o", str(tmp_path / "m.json")]) == 3


def test_eval_ground_truth(scenario_dir, pipeline_runs, tmp_path):
    scn = Scenario.load(scenario_dir / "scenario.json")
    pred = read_json(pipeline_runs[1] / "aggregation.json")
    pred["hand"] = {"theta": scn.pose.theta.tolist(), "trans": scn.pose.trans.tolist()}
    pred["object"] = {"R": scn.R.tolist(), "T": scn.T.tolist()}
    (tmp_path / "p.json").write_text(json.dumps(pred))
    assert cli.main(["eval", "--pred", str(tmp_path / "p.json"), "--scenario", str(scenario_dir / "scenario.json"),
                     "-o", str(tmp_path / "m.json"), "--csv", str(tmp_path / "m.csv")]) == 0
    m = read_json(tmp_path / "m.json")
    assert m["pose"]["MJE"] == 0.0 and m["pose"]["ADD"] == 0.0 and m["pose"]["ADD_0.1d"] == 100.0
    assert m["physics"]["stability"] <= 1e-2
