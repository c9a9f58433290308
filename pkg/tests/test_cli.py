import numpy as np
import pytest

from eventvo import cli, io_eval
from eventvo.estimator.solver import EstimationDivergence

SCENE = "[scene]\nduration = {duration}\nrevolutions_per_s = {rev}\n"


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    (d / "scene.ini").write_text(SCENE.format(duration=2.0, rev=0.1))
    assert cli.main(["synth", "--config", str(d / "scene.ini"), "--seed", "1", "--out", str(d)]) == 0
    return d


def run(d, out, *extra):
    return cli.main(["run", "--config", str(d / "config.ini"), "--gt", str(d / "groundtruth.txt"),
                     "--out", str(out), *extra])


def test_synth_writes_fixtures(fixture_dir):
    for name in ("groundtruth.txt", "tracks.txt", "landmarks_gt.txt", "config.ini", "events.txt"):
        assert (fixture_dir / name).stat().st_size > 0
    cfg = io_eval.read_config(fixture_dir / "config.ini")
    assert cfg.scene.duration == 2.0


def test_run_tracks_and_eval(fixture_dir, tmp_path, capsys):
    assert run(fixture_dir, tmp_path, "--tracks", str(fixture_dir / "tracks.txt")) == 0
    m = io_eval.read_metrics(tmp_path / "metrics.ini")
    assert m["initialized"] == "True" and np.isfinite(float(m["rms_rte"]))
    states = io_eval.read_trajectory(tmp_path / "trajectory.txt")
    assert len(states) > 50
    assert io_eval.read_landmarks(tmp_path / "landmarks.txt")
    capsys.readouterr()
    assert cli.main(["eval", str(tmp_path / "trajectory.txt"), "--gt", str(fixture_dir / "groundtruth.txt")]) == 0
    printed = dict(line.split() for line in capsys.readouterr().out.strip().splitlines())
    assert float(printed["rms_rte"]) == pytest.approx(float(m["rms_rte"]), rel=1e-5)


def test_threads_give_identical_trajectories(fixture_dir, tmp_path):
    for n in (1, 2):
        assert run(fixture_dir, tmp_path / f"t{n}", "--events", str(fixture_dir / "events.txt"),
                   "--threads", str(n)) == 0
    a = (tmp_path / "t1" / "trajectory.txt").read_bytes()
    assert io_eval.read_metrics(tmp_path / "t1" / "metrics.ini")["initialized"] == "True"
    assert a == (tmp_path / "t2" / "trajectory.txt").read_bytes()
    assert (tmp_path / "t1" / "tracks.txt").read_bytes() == (tmp_path / "t2" / "tracks.txt").read_bytes()


def test_config_error_exit_code(fixture_dir, tmp_path):
    (tmp_path / "bad.ini").write_text("[estimator]\nwhat = 1\n")
    assert cli.main(["run", "--config", str(tmp_path / "bad.ini"), "--events", str(fixture_dir / "events.txt"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_parse_error_exit_code(fixture_dir, tmp_path):
    (tmp_path / "ev.txt").write_text("0.1 1 2 1\nnot an event\n")
    assert cli.main(["run", "--events", str(tmp_path / "ev.txt"), "--strict",
                     "--out", str(tmp_path / "o")]) == cli.EXIT_PARSE
    assert cli.main(["run", "--events", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "o")]) == cli.EXIT_PARSE
    assert cli.main(["eval", str(tmp_path / "ev.txt"), "--gt", str(fixture_dir / "groundtruth.txt")]) == cli.EXIT_PARSE


def test_lenient_parse_skips_bad_lines(tmp_path):
    (tmp_path / "ev.txt").write_text("0.1 1 2 1\nnot an event\n0.2 3 4 0\n")
    assert cli.main(["run", "--events", str(tmp_path / "ev.txt"), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "trajectory.txt").exists()


def test_divergence_exit_code(fixture_dir, tmp_path, monkeypatch):
    def boom(window, options=None):
        raise EstimationDivergence("forced", {"n_landmarks": 0})

    monkeypatch.setattr("eventvo.estimator.core.solve", boom)
    code = run(fixture_dir, tmp_path, "--tracks", str(fixture_dir / "tracks.txt"))
    assert code == cli.EXIT_DIVERGED
    assert (tmp_path / "divergence.json").exists()


def test_pipeline_rejects_bad_thread_count():
    with pytest.raises(ValueError):
        cli.Pipeline(io_eval.PipelineConfig(), threads=3)
