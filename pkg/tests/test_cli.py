from pathlib import Path

from click.testing import Result
from typer.testing import CliRunner

from src.cli import EXIT_MAX_STEPS, app
from src.score_net import init_net
from src.storage import files
from src.storage.checkpoint import save_checkpoint


runner = CliRunner()

TINY_TRAIN = "DATA__N=4\nNET__WIDTH=16\nNET__DEPTH=1\nSCHEDULE__STEPS=3\nTRAIN__MAX_STEPS=5\nTRAIN__LR=1e-8\nTRAIN__EPS_TRAIN=1e-12\n"


def _write_config(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "experiment.env"
    path.write_text("RUN_NAME=cli\n" + text, encoding="utf-8")
    return path


def _invoke(command: str, tmp_path: Path, text: str = "", *extra: str) -> Result:
    config = _write_config(tmp_path, text)
    return runner.invoke(app, [command, "--config", str(config), "--out", str(tmp_path / "runs"), *extra])


def test_oracle_command(tmp_path: Path) -> None:
    result = _invoke("oracle", tmp_path, "ORACLE__N_VALUES=[25,50]\n")
    assert result.exit_code == 0, result.output
    assert "command='oracle'" in result.output
    frame = files.read_csv(tmp_path / "runs" / "cli" / "oracle.csv")
    assert list(frame["N"]) == [25, 50]
    assert (tmp_path / "runs" / "cli" / "meta.json").exists()


def test_compare_schedules_command(tmp_path: Path) -> None:
    result = _invoke("compare-schedules", tmp_path, "DATA__SIGMA=0.1\nCOMPARE__N_VALUES=[1,100]\n")
    assert result.exit_code == 0, result.output
    frame = files.read_csv(tmp_path / "runs" / "cli" / "compare_schedules.csv")
    assert frame["sampling_dominant_winner"].isna().iloc[0]
    assert frame["sampling_dominant_winner"].iloc[1] == "exp"
    assert (tmp_path / "runs" / "cli" / "rho_sweep.csv").exists()


def test_train_command_reports_max_steps(tmp_path: Path) -> None:
    result = _invoke("train", tmp_path, TINY_TRAIN)
    assert result.exit_code == EXIT_MAX_STEPS, result.output
    assert "status=max_steps" in result.output
    assert (tmp_path / "runs" / "cli" / "checkpoint.vesn").exists()


def test_sample_command_binary_output(tmp_path: Path) -> None:
    result = _invoke("sample", tmp_path, "SAMPLE__TRAJECTORIES=32\n", "--format", "bin", "--seed", "3")
    assert result.exit_code == 0, result.output
    assert files.read_matrix_bin(tmp_path / "runs" / "cli" / "samples.bin").shape == (32, 2)


def test_sample_command_rejects_unknown_format(tmp_path: Path) -> None:
    result = _invoke("sample", tmp_path, "SAMPLE__TRAJECTORIES=4\n", "--format", "npz")
    assert result.exit_code == 2


def test_sample_command_rejects_mismatched_checkpoint(tmp_path: Path) -> None:
    checkpoint = save_checkpoint(init_net(d=5, m=4, L=1, seed=0), tmp_path / "net.vesn")
    result = _invoke("sample", tmp_path, "SAMPLE__TRAJECTORIES=4\n", "--checkpoint", str(checkpoint))
    assert result.exit_code == 2


def test_invalid_config_exits_with_usage_error(tmp_path: Path) -> None:
    result = _invoke("oracle", tmp_path, "SCHEDULE__VARIANCE=edm\nSCHEDULE__GRID=exponential\n")
    assert result.exit_code == 2
    result = _invoke("oracle", tmp_path, "NOT_A_KEY=1\n")
    assert result.exit_code == 2


def test_probe_bell_command(tmp_path: Path) -> None:
    result = _invoke("probe-bell", tmp_path, "PROBE__POINTS=5\nNET__WIDTH=16\n")
    assert result.exit_code == 0, result.output
    assert len(files.read_csv(tmp_path / "runs" / "cli" / "bell_probe.csv")) == 5


def test_report_command(tmp_path: Path) -> None:
    result = _invoke("report", tmp_path, "SCHEDULE__STEPS=20\n")
    assert result.exit_code == 0, result.output
    assert "bound" in result.output
    assert (tmp_path / "runs" / "cli" / "report.csv").exists()


def test_train_without_trainable_layers_is_a_usage_error(tmp_path: Path) -> None:
    result = _invoke("train", tmp_path, TINY_TRAIN.replace("NET__DEPTH=1", "NET__DEPTH=0"))
    assert result.exit_code == 2
    assert not (tmp_path / "runs" / "cli" / "checkpoint.vesn").exists()


def test_invalid_pairing_writes_nothing(tmp_path: Path) -> None:
    result = _invoke("train", tmp_path, TINY_TRAIN + "SCHEDULE__VARIANCE=song\nSCHEDULE__GRID=polynomial\n")
    assert result.exit_code == 2
    assert not (tmp_path / "runs").exists()


def test_train_and_sample_are_reproducible_from_config_and_seed(tmp_path: Path) -> None:
    config = _write_config(tmp_path, TINY_TRAIN + "SAMPLE__TRAJECTORIES=64\n")
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        arguments = ["--config", str(config), "--out", str(out), "--seed", "5"]
        trained = runner.invoke(app, ["train", *arguments])
        assert trained.exit_code == EXIT_MAX_STEPS, trained.output
        checkpoint = out / "cli" / "checkpoint.vesn"
        sampled = runner.invoke(app, ["sample", *arguments, "--checkpoint", str(checkpoint), "--format", "bin"])
        assert sampled.exit_code == 0, sampled.output
        outputs.append((checkpoint.read_bytes(), (out / "cli" / "samples.bin").read_bytes()))
    assert outputs[0] == outputs[1]
