#!/usr/bin/env python3
"""Tests for the measurement/pose file formats and the command line driver."""
import sys
from pathlib import Path

import numpy as np
import pytest

# add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from averaging.cli import main
from averaging.cover import ViewingGraph
from averaging.errors import FormatError
from averaging.geom import CameraPose, axis_angle
from averaging.nview import build_from_poses
from averaging.storage import (
    atomic_write,
    read_measurements,
    read_poses,
    write_measurements,
    write_poses,
)
from averaging.synthbench import SceneSpec, generate_scene


def _records(path):
    lines = [l for l in Path(path).read_text().splitlines() if l.strip() and not l.startswith("#")]
    return lines[0], lines[1:]


def _run(tmp_path, capsys, *argv):
    code = main(["--config", str(tmp_path / "missing.json"), *argv])
    out = capsys.readouterr().out
    values = dict(line.split(" ", 1) for line in out.splitlines() if " " in line)
    return code, values


# Files

def test_measurement_round_trip(tmp_path):
    scene = generate_scene(SceneSpec(n=6, sigma_R=0.01, scale_pairs=True, missing_fraction=0.2, seed=1))
    path = tmp_path / "meas.txt"
    write_measurements(path, scene.graph)
    back = read_measurements(path)
    assert back.n == 6
    assert sorted(back.edges) == sorted(scene.graph.edges)
    for key, (w, M) in scene.graph.edges.items():
        assert back.edges[key][0] == w
        assert np.array_equal(back.edges[key][1], M)


def test_pose_round_trip_with_unposed_views(tmp_path):
    poses = [CameraPose(axis_angle([1, 2, 3], 0.4), [1.0, 2.0, 3.0]), None,
             CameraPose(np.eye(3), [0.1, -0.2, 1e-17])]
    path = tmp_path / "poses.txt"
    write_poses(path, poses)
    header, records = _records(path)
    assert header == "POSES 1 3" and len(records) == 2
    back = read_poses(path)
    assert back[1] is None
    assert np.array_equal(back[0].rotation, poses[0].rotation)
    assert np.array_equal(back[2].center, poses[2].center)


EYE = " ".join(["1", "0", "0", "0", "1", "0", "0", "0", "1"])


@pytest.mark.parametrize("text", [
    "",
    "POSES 1 3\n",
    "ESSENTIAL 2 3\n",
    "ESSENTIAL 1 x\n",
    "ESSENTIAL 1 3\n0 1 1 2 3\n",
    f"ESSENTIAL 1 3\n0 3 {EYE} 1\n",
    f"ESSENTIAL 1 3\n1 0 {EYE} 1\n",
    f"ESSENTIAL 1 3\n0 1 {EYE} 1\n0 1 {EYE} 1\n",
    f"ESSENTIAL 1 3\n0 1 {EYE.replace('1', 'nan', 1)} 1\n",
    f"ESSENTIAL 1 3\n0 1 {EYE} -1\n",
    f"ESSENTIAL 1 3\n0 1 {EYE} one\n",
    "ESSENTIAL 1 1\n",
])
def test_malformed_measurements(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(FormatError):
        read_measurements(path)


def test_comments_and_blank_lines_are_skipped(tmp_path):
    path = tmp_path / "meas.txt"
    path.write_text(f"# generated\nESSENTIAL 1 3\n\n# pair\n0 2 {EYE} 0.5\n")
    graph = read_measurements(path)
    assert graph.has_edge(0, 2) and graph.weight(0, 2) == 0.5


def test_pose_file_rejects_non_rotation(tmp_path):
    path = tmp_path / "poses.txt"
    path.write_text("POSES 1 2\n0 2 0 0 0 1 0 0 0 1 0 0 0\n")
    with pytest.raises(FormatError):
        read_poses(path)
    path.write_text(f"POSES 1 2\n0 {EYE} 0 0 0\n0 {EYE} 1 1 1\n")
    with pytest.raises(FormatError):
        read_poses(path)


def test_pose_rotation_tolerance(tmp_path):
    path = tmp_path / "poses.txt"
    off = EYE.replace("1", "1.0000001", 1)
    path.write_text(f"POSES 1 1\n0 {off} 0 0 0\n")
    with pytest.raises(FormatError):
        read_poses(path)
    assert read_poses(path, tol=1e-6)[0].center.tolist() == [0.0, 0.0, 0.0]


def test_atomic_write_leaves_no_temporary_files(tmp_path):
    target = tmp_path / "out" / "table.csv"
    atomic_write(target, "a,b\n1,2\n")
    atomic_write(target, "a,b\n3,4\n")
    assert target.read_text() == "a,b\n3,4\n"
    assert [p.name for p in target.parent.iterdir()] == ["table.csv"]


# Command line

def test_synth_writes_records_deterministically(tmp_path, capsys):
    args = ["synth", "--n", "10", "--missing", "0.2", "--sigma-r", "0.01", "--seed", "3"]
    code, _ = _run(tmp_path, capsys, *args, "--out", str(tmp_path / "a.txt"), "--gt", str(tmp_path / "gt.txt"))
    assert code == 0
    header, records = _records(tmp_path / "a.txt")
    assert header == "ESSENTIAL 1 10" and len(records) == 36
    assert len(_records(tmp_path / "gt.txt")[1]) == 10

    _run(tmp_path, capsys, *args, "--out", str(tmp_path / "b.txt"))
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_check_exit_codes(tmp_path, capsys):
    clean = tmp_path / "clean.txt"
    _run(tmp_path, capsys, "synth", "--n", "6", "--out", str(clean))
    code, out = _run(tmp_path, capsys, "check", str(clean))
    assert code == 0
    assert out["essential_ok"] == "1" and out["mode"] == "scaled"

    noisy = tmp_path / "noisy.txt"
    _run(tmp_path, capsys, "synth", "--n", "6", "--sigma-r", "0.05", "--out", str(noisy))
    code, out = _run(tmp_path, capsys, "check", str(noisy), "--mode", "strict")
    assert code == 1 and out["essential_ok"] == "0"

    partial = tmp_path / "partial.txt"
    _run(tmp_path, capsys, "synth", "--n", "6", "--missing", "0.2", "--out", str(partial))
    assert _run(tmp_path, capsys, "check", str(partial))[0] == 4

    invalid = tmp_path / "invalid.txt"
    invalid.write_text(f"ESSENTIAL 1 3\n0 1 {EYE} 1\n0 2 {EYE} 1\n1 2 {EYE} 1\n")
    assert _run(tmp_path, capsys, "check", str(invalid))[0] == 3


def test_counterexample_command(tmp_path, capsys):
    path = tmp_path / "ce.txt"
    code, out = _run(tmp_path, capsys, "counterexample", "--seed", "2", "--out", str(path))
    assert code == 0
    assert out["fundamental_ok"] == "1" and out["essential_ok"] == "0"
    code, out = _run(tmp_path, capsys, "check", str(path))
    assert code == 1
    assert out["fundamental_ok"] == "1" and out["pairing_holds"] == "1"


def test_average_then_eval(tmp_path, capsys):
    meas, gt, est = tmp_path / "meas.txt", tmp_path / "gt.txt", tmp_path / "est.txt"
    _run(tmp_path, capsys, "synth", "--n", "10", "--scale-pairs", "--seed", "4", "--out", str(meas), "--gt", str(gt))
    code, _ = _run(tmp_path, capsys, "--threads", "2", "average", str(meas), "--out", str(est),
                   "--trace", str(tmp_path / "trace.csv"))
    assert code == 0
    assert (tmp_path / "trace.csv").read_text().startswith("iteration,objective")
    code, out = _run(tmp_path, capsys, "eval", str(est), str(gt), "--table", str(tmp_path / "errors.csv"))
    assert code == 0
    assert float(out["R_d_mean"]) < 1e-5
    assert float(out["relative_center_max"]) < 1e-6


def test_average_is_repeatable_and_rejects_disconnected_graph(tmp_path, capsys):
    meas = tmp_path / "meas.txt"
    _run(tmp_path, capsys, "synth", "--n", "7", "--sigma-r", "0.01", "--out", str(meas))
    for name in ("a.txt", "b.txt"):
        _run(tmp_path, capsys, "average", str(meas), "--out", str(tmp_path / name), "--max-iters", "30")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    split = tmp_path / "split.txt"
    poses = generate_scene(SceneSpec(n=6, seed=9)).poses
    write_measurements(split, ViewingGraph.from_multiview(
        build_from_poses(poses, mask=[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)])))
    assert _run(tmp_path, capsys, "average", str(split), "--out", str(tmp_path / "c.txt"))[0] == 7


def test_recover_and_bench(tmp_path, capsys):
    meas, gt, est = tmp_path / "meas.txt", tmp_path / "gt.txt", tmp_path / "est.txt"
    _run(tmp_path, capsys, "synth", "--n", "6", "--seed", "5", "--out", str(meas), "--gt", str(gt))
    assert _run(tmp_path, capsys, "recover", str(meas), "--out", str(est))[0] == 0
    code, out = _run(tmp_path, capsys, "eval", str(est), str(gt))
    assert code == 0 and float(out["R_d_mean"]) < 1e-6

    code, out = _run(tmp_path, capsys, "bench", "--n", "8", "--seed", "1", "--no-baseline",
                     "--csv", str(tmp_path / "bench.csv"))
    assert code == 0
    assert out["n"] == "8" and float(out["R_d_mean"]) < 1e-5
    assert (tmp_path / "bench.csv").read_text().splitlines()[0].startswith("n,")


def test_eval_single_rotated_view(tmp_path, capsys):
    scene = generate_scene(SceneSpec(n=10, seed=5))
    bent = list(scene.poses)
    bent[3] = CameraPose(bent[3].rotation @ axis_angle([0, 1, 0], np.radians(1.0)), bent[3].center)
    write_poses(tmp_path / "gt.txt", scene.poses)
    write_poses(tmp_path / "est.txt", bent)
    code, out = _run(tmp_path, capsys, "eval", str(tmp_path / "est.txt"), str(tmp_path / "gt.txt"))
    assert code == 0
    assert float(out["R_d_mean"]) == pytest.approx(0.1, abs=1e-6)
    assert float(out["R_d_median"]) == pytest.approx(0.0, abs=1e-6)


def test_usage_and_io_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["check"])
    assert info.value.code == 2
    assert _run(tmp_path, capsys, "synth", "--n", "2", "--out", str(tmp_path / "x.txt"))[0] == 2
    assert _run(tmp_path, capsys, "--threads", "0", "check", str(tmp_path / "x.txt"))[0] == 2
    assert _run(tmp_path, capsys, "check", str(tmp_path / "does-not-exist.txt"))[0] == 6


def test_bad_inputs_map_to_exit_codes(tmp_path, capsys):
    single = tmp_path / "single.txt"
    single.write_text("ESSENTIAL 1 1\n")
    assert _run(tmp_path, capsys, "average", str(single), "--out", str(tmp_path / "p.txt"))[0] == 3

    meas = tmp_path / "meas.txt"
    _run(tmp_path, capsys, "synth", "--n", "6", "--out", str(meas))
    for name, text in (("unknown.json", '{"cover": {"tree_cnt": 3}}'), ("broken.yaml", "cover: [unclosed\n")):
        config = tmp_path / name
        config.write_text(text)
        assert main(["--config", str(config), "check", str(meas)]) == 2
    capsys.readouterr()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
