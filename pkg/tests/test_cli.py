import pytest

import cli
import manager
from solvers.errors import GapViolationError


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ("BLOCHBEAM_OUTPUT_DIR", "BLOCHBEAM_WORKERS", "BLOCHBEAM_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


def test_bands(free_study_file, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["bands", "--config", str(free_study_file), "--out", str(out)]) == cli.EXIT_OK
    assert (out / "bands.csv").exists()


def test_alias(free_study_file, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["b", "--config", str(free_study_file), "--out", str(out)]) == cli.EXIT_OK
    assert (out / "bands.csv").exists()


def test_converge_single_epsilon(free_study_file, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("BLOCHBEAM_LOG_LEVEL", "WARNING")
    out = tmp_path / "out"
    code = cli.main(["converge", "--config", str(free_study_file), "--out", str(out),
                     "--epsilon", "0.0625", "--serial", "--verbose"])
    assert code == cli.EXIT_OK
    assert "0.0625" in capsys.readouterr().out
    assert (out / "convergence.csv").exists()


def test_incomplete_study_exits_with_one(free_study_file, tmp_path, capsys, monkeypatch):
    def gap_closes(*args, **kwargs):
        raise GapViolationError(0.5, 1, 2, 0.0, 1e-6)

    monkeypatch.setattr(manager, "propagate_beams", gap_closes)
    code = cli.main(["converge", "--config", str(free_study_file), "--out", str(tmp_path), "--serial"])
    assert code == cli.EXIT_INCOMPLETE
    captured = capsys.readouterr()
    assert "GapViolationError" in captured.out
    assert "2 epsilon value(s) did not complete" in captured.err


def test_bad_config_lists_every_problem(tmp_path, capsys):
    path = tmp_path / "broken.cfg"
    path.write_text("potential.model = plane_wave\nT = soon\ncolour = blue\n")
    assert cli.main(["converge", "--config", str(path)]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert f"{path}:2: malformed value for 'T'" in err
    assert f"{path}:3: unknown key 'colour'" in err


def test_missing_config(tmp_path, capsys):
    assert cli.main(["bands", "--config", str(tmp_path / "nope.cfg")]) == cli.EXIT_CONFIG
    assert "cannot read study config" in capsys.readouterr().err


def test_unknown_action(free_study_file):
    with pytest.raises(SystemExit) as info:
        cli.main(["explode", "--config", str(free_study_file)])
    assert info.value.code == 2


def test_help_lists_environment(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    assert "BLOCHBEAM_OUTPUT_DIR" in out
    assert "converge (conv)" in out
