import csv
import json

import pytest

from strep.cli import CHECKPOINT_NAME, Console, main
from strep.datafiles import write_dataset, write_poses
from strep.geometry import Pose

TINY = {"train": {"iters": 2, "eval_every": 1, "occupancy_beams": 8, "s_per_beam": 2}, "model": {"latent_dim": 4}}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("STREP_OUT", raising=False)
    monkeypatch.delenv("STREP_THREADS", raising=False)
    return tmp_path


@pytest.fixture
def run():
    def invoke(*argv: str) -> int:
        return main(list(argv), console=Console(interactive=False))

    return invoke


@pytest.fixture
def tiny_config_file(workdir):
    path = workdir / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture
def dataset_file(workdir, corridor_sequence):
    return str(write_dataset(workdir / "corridor.strepds", corridor_sequence))


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_unknown_command_and_flag_exit_one(run, workdir):
    assert run("teleport") == 1
    assert run("gradcheck", "--bogus") == 1
    assert run("train") == 1


def test_missing_config_file_exits_one(run, workdir, dataset_file, capsys):
    assert run("eval", "--data", dataset_file, "--poses", "p.csv", "--config", "absent.json") == 1
    assert "absent.json" in capsys.readouterr().err


def test_corrupt_dataset_exits_two(run, workdir):
    (workdir / "broken.strepds").write_bytes(b"STREP-DATASET\n{not json\n")
    assert run("plot", "--data", "broken.strepds") == 2


def test_missing_pose_file_exits_two(run, workdir, dataset_file):
    assert run("eval", "--data", dataset_file, "--poses", "absent.csv") == 2


def test_eval_of_ground_truth_scores_zero(run, workdir, dataset_file, corridor_sequence):
    write_poses(workdir / "gt.csv", corridor_sequence.gt_poses)
    assert run("eval", "--data", dataset_file, "--poses", "gt.csv", "--out", "ev") == 0
    (row,) = _rows(workdir / "ev" / "report.csv")
    assert float(row["ate"]) < 1e-9
    assert float(row["point_dist"]) < 1e-9
    assert row["num_frames"] == str(len(corridor_sequence))


def test_eval_needs_matching_lengths(run, workdir, dataset_file):
    write_poses(workdir / "short.csv", [Pose.identity(2)])
    assert run("eval", "--data", dataset_file, "--poses", "short.csv") == 1


def test_config_echo_and_env_output_dir(run, workdir, dataset_file, monkeypatch):
    monkeypatch.setenv("STREP_OUT", str(workdir / "from-env"))
    assert run("plot", "--data", dataset_file, "--seed", "12") == 0
    echoed = json.loads((workdir / "from-env" / "config.json").read_text())
    assert echoed["seed"] == 12
    assert echoed["model"]["latent_dim"] == 16
    assert (workdir / "from-env" / "registration.svg").exists()


def test_bad_thread_count_from_env(run, workdir, dataset_file, monkeypatch):
    monkeypatch.setenv("STREP_THREADS", "many")
    assert run("plot", "--data", dataset_file) == 1


def test_train_adapt_plot_pipeline(run, workdir, dataset_file, tiny_config_file, corridor_sequence):
    assert run("train", "--data", dataset_file, "--config", tiny_config_file, "--out", "tr") == 0
    out = workdir / "tr"
    for name in (CHECKPOINT_NAME, "history.csv", "poses_00.csv", "report.csv", "config.json"):
        assert (out / name).exists(), name
    assert [row["iteration"] for row in _rows(out / "history.csv")] == ["0", "1"]

    checkpoint = str(out / CHECKPOINT_NAME)
    assert run("adapt", "--data", dataset_file, "--checkpoint", checkpoint, "--config", tiny_config_file, "--out", "ad") == 0
    assert len(_rows(workdir / "ad" / "poses.csv")) == len(corridor_sequence)

    assert run("train", "--data", dataset_file, "--checkpoint", checkpoint, "--config", tiny_config_file, "--out", "tr2") == 0
    assert run("plot", "--data", dataset_file, "--poses", str(out / "poses_00.csv"), "--out", "pl") == 0
    assert (workdir / "pl" / "registration.svg").read_bytes().startswith(b"<?xml")


def test_train_is_reproducible(run, workdir, dataset_file, tiny_config_file):
    for out in ("a", "b"):
        assert run("train", "--data", dataset_file, "--config", tiny_config_file, "--out", out, "--threads", "1") == 0
    for name in ("history.csv", "poses_00.csv", "report.csv"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()
    # the header echoes the output directory; the weights must match exactly
    payload_a = (workdir / "a" / CHECKPOINT_NAME).read_bytes().split(b"\n", 2)[2]
    payload_b = (workdir / "b" / CHECKPOINT_NAME).read_bytes().split(b"\n", 2)[2]
    assert payload_a == payload_b


def test_ablate_writes_one_row_per_mode_and_seed(run, workdir, dataset_file, tiny_config_file):
    assert run("ablate", "--data", dataset_file, "--seeds", "2", "--config", tiny_config_file, "--iters", "1", "--out", "ab") == 0
    rows = _rows(workdir / "ab" / "summary.csv")
    assert [(row["mode"], row["seed"]) for row in rows] == [
        ("fused", "0"),
        ("independent", "0"),
        ("fused", "1"),
        ("independent", "1"),
    ]


def test_ablate_rejects_zero_seeds(run, workdir, dataset_file):
    assert run("ablate", "--data", dataset_file, "--seeds", "0") == 1


def test_simulate_is_deterministic(run, workdir):
    config = workdir / "sim.json"
    config.write_text(json.dumps({"trajectory": {"num_frames": 3, "beams": 16}}))
    for out in ("s1", "s2"):
        assert run("simulate", "--config", str(config), "--per-env", "1", "--seed", "4", "--out", out) == 0
    produced = sorted(p.name for p in (workdir / "s1").iterdir())
    assert "manifest.json" in produced and "maps" in produced
    datasets = sorted(p.name for p in (workdir / "s1").glob("*.strepds"))
    assert len(datasets) == 3
    for name in datasets + ["manifest.json"]:
        assert (workdir / "s1" / name).read_bytes() == (workdir / "s2" / name).read_bytes()
    assert (workdir / "s1" / "maps" / "corridor_loop.pgm").read_bytes().startswith(b"P5")


def test_gradcheck_command(run, workdir):
    assert run("gradcheck", "--seeds", "1", "--out", "gc") == 0
    rows = _rows(workdir / "gc" / "gradcheck.csv")
    assert rows and all(row["passed"] == "True" for row in rows)
