#!/usr/bin/env python3
"""
HierLoc command line tests
Configuration resolution and the pretrain/train/evaluate/sweep/predict commands
"""

import io
import sys
import json
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / 'src'))

try:
    import pandas as pd
    from pydantic import ValidationError
    from config import ConfigError, SweepSpec, resolve_config
    from dataset import load_ujiindoorloc, normalize_rssi
    from hierloc_model import load_model, predict
    from cli import main
except ImportError as e:
    print(f"❌ Import error: {e}")
    print("Make sure you're running from the project root and dependencies are installed")
    sys.exit(1)

SMALL = [
    "input_width=24", "sae_layers=16,8", "common_layers=8,8", "rnn_hidden=8",
    "bf_head_layers=8,1", "position_layers=8,8,2",
    "sae_epochs=5", "bf_epochs=2", "position_epochs=2",
]


def _args(workdir: Path, *extra: str) -> list:
    args = ["--out", str(workdir)]
    for pair in SMALL + [f"train_path={workdir / 'train.csv'}", f"test_path={workdir / 'test.csv'}"]:
        args += ["--set", pair]
    return args + list(extra)


def _run(argv) -> tuple:
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def _synthesize(workdir: Path) -> None:
    code, _, err = _run(["synthesize", *_args(workdir), "--records", "300", "--test-records", "60"])
    assert code == 0, err


def test_config_precedence():
    with tempfile.TemporaryDirectory() as temp_dir:
        path = Path(temp_dir) / "run.conf"
        path.write_text("# run settings\nbatch_size=64\nseed=5\nsae_layers=32,16\nfloor_penalty=3\n", encoding="utf-8")
        config = resolve_config(path, ["batch_size=16"], seed=9)
    assert config.hyperparams.batch_size == 16
    assert config.seed == 9
    assert config.hyperparams.sae_layers == [32, 16]
    assert config.penalties.floor_penalty == 3.0
    assert resolve_config().hyperparams.batch_size == 32


def test_config_errors():
    for overrides in (["batch_sise=16"], ["batch_size=zero"], ["bf_dropout"], ["bf_head_layers=8,2"]):
        try:
            resolve_config(None, overrides)
        except ConfigError:
            continue
        raise AssertionError(f"{overrides} was accepted")
    try:
        resolve_config("/nonexistent/run.conf")
    except ConfigError as e:
        assert "/nonexistent/run.conf" in str(e)
    else:
        raise AssertionError("missing config file was accepted")


def test_sweep_spec():
    assert SweepSpec(axis="bf_dropout", values="0,0.1,0.2,0.3,0.4,0.5").values == ["0", "0.1", "0.2", "0.3", "0.4", "0.5"]
    for bad in (dict(axis="lr", values="0.1"), dict(axis="rnn_kind", values="gru"),
                dict(axis="bf_dropout", values="1.5"), dict(axis="batch_size", values="")):
        try:
            SweepSpec(**bad)
        except ValidationError:
            continue
        raise AssertionError(f"{bad} was accepted")


def test_missing_training_file():
    with tempfile.TemporaryDirectory() as temp_dir:
        code, _, err = _run(["train", *_args(Path(temp_dir))])
    assert code == 1
    assert "train.csv" in err


def test_pretrain_train_evaluate_predict():
    with tempfile.TemporaryDirectory() as temp_dir:
        workdir = Path(temp_dir)
        _synthesize(workdir)

        code, _, err = _run(["pretrain", *_args(workdir)])
        assert code == 0, err
        encoder = workdir / "encoder.hloc"
        first = encoder.read_bytes()
        log = json.loads((workdir / "encoder.log.json").read_text())
        assert len(log["stages"]["sae"]["val_losses"]) >= 5
        assert _run(["pretrain", *_args(workdir)])[0] == 1
        assert _run(["pretrain", *_args(workdir), "--force"])[0] == 0
        assert encoder.read_bytes() == first

        code, _, err = _run(["train", *_args(workdir)])
        assert code == 0, err
        model_path = workdir / "model.hloc"
        assert model_path.exists()
        logs = json.loads((workdir / "model.log.json").read_text())
        assert len(logs["stages"]["bf"]["val_losses"]) <= 2
        assert len(logs["stages"]["position"]["val_losses"]) <= 2
        code, _, err = _run(["train", *_args(workdir)])
        assert code == 1 and "--force" in err

        code, _, err = _run(["evaluate", *_args(workdir)])
        assert code == 0, err
        report = json.loads((workdir / "report.json").read_text())
        for key in ("building_hit_rate", "floor_hit_rate", "building_floor_hit_rate",
                    "mean_2d_error", "mean_3d_error", "errors_2d", "errors_3d", "config"):
            assert key in report
        assert report["config"]["seed"] == 0
        first_report = (workdir / "report.json").read_bytes()
        assert _run(["evaluate", *_args(workdir)])[0] == 0
        assert (workdir / "report.json").read_bytes() == first_report
        assert (workdir / "report.txt").exists() and (workdir / "errors.csv").exists()
        assert json.loads((workdir / "errors.json").read_text())["seed"] == 0

        record = load_ujiindoorloc(workdir / "test.csv", ap_count=24)[0]
        rows = workdir / "rows.csv"
        rows.write_text(",".join(repr(float(v)) for v in record.rssi) + "\n", encoding="utf-8")
        code, out, err = _run(["predict", *_args(workdir), "--input", str(rows)])
        assert code == 0, err
        lines = out.strip().splitlines()
        assert len(lines) == 1 and len(lines[0].split(",")) == 4
        expected = predict(load_model(model_path), normalize_rssi(record.rssi))
        building, floor, x, y = lines[0].split(",")
        assert (int(building), int(floor)) == (int(expected.building_id[0]), int(expected.floor[0]))
        assert (float(x), float(y)) == (float(expected.xy[0, 0]), float(expected.xy[0, 1]))

        rows.write_text("", encoding="utf-8")
        code, out, _ = _run(["predict", *_args(workdir), "--input", str(rows)])
        assert code == 0 and out == ""

        rows.write_text("1,2,3\n", encoding="utf-8")
        code, _, err = _run(["predict", *_args(workdir), "--input", str(rows)])
        assert code == 1 and "row 1" in err

        rows.write_text(",".join(["-70.0"] * 23 + ["nan"]) + "\n", encoding="utf-8")
        code, _, err = _run(["predict", *_args(workdir), "--input", str(rows)])
        assert code == 1 and "row 1" in err and "non-finite" in err


def test_train_is_byte_reproducible():
    with tempfile.TemporaryDirectory() as temp_dir:
        workdir = Path(temp_dir)
        _synthesize(workdir)
        assert _run(["train", *_args(workdir)])[0] == 0
        first_model = (workdir / "model.hloc").read_bytes()
        first_log = (workdir / "model.log.json").read_bytes()
        code, _, err = _run(["train", *_args(workdir), "--force"])
        assert code == 0, err
        assert (workdir / "model.hloc").read_bytes() == first_model
        assert (workdir / "model.log.json").read_bytes() == first_log


def test_sweep_matches_standalone_run():
    with tempfile.TemporaryDirectory() as temp_dir:
        workdir = Path(temp_dir)
        _synthesize(workdir)
        code, _, err = _run(["sweep", *_args(workdir), "--axis", "rnn_kind", "--values", "standard,lstm"])
        assert code == 0, err
        table = pd.read_csv(workdir / "sweep_rnn_kind.csv")
        assert list(table.columns) == ["value", "building_hit", "floor_hit", "bf_hit", "err2d", "err3d"]
        assert list(table["value"]) == ["standard", "lstm"]
        sidecar = json.loads((workdir / "sweep_rnn_kind.json").read_text())
        assert sidecar["seeds"] == [0]

        assert _run(["train", *_args(workdir)])[0] == 0
        assert _run(["evaluate", *_args(workdir)])[0] == 0
        report = json.loads((workdir / "report.json").read_text())
        lstm = table[table["value"] == "lstm"].iloc[0]
        assert abs(lstm["floor_hit"] - report["floor_hit_rate"]) < 1e-6
        assert abs(lstm["err3d"] - report["mean_3d_error"]) < 1e-6


def test_sweep_rejects_bad_values_before_training():
    with tempfile.TemporaryDirectory() as temp_dir:
        workdir = Path(temp_dir)
        code, _, err = _run(["sweep", *_args(workdir), "--axis", "bf_dropout", "--values", "0.1,2.0"])
        assert code == 1 and "2.0" in err
        assert not (workdir / "train.csv").exists()


def test_gradcheck_command():
    code, out, _ = _run(["gradcheck"])
    assert code == 0
    assert "hierloc-lstm" in out and "❌" not in out


TESTS = [obj for name, obj in list(globals().items()) if name.startswith("test_") and callable(obj)]


def main_runner():
    """Run all tests"""
    print("🖥️  HierLoc command line tests\n")
    failed = 0
    for test in TESTS:
        try:
            test()
            print(f"✅ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"❌ {test.__name__}: {e!r}")
    print("\n" + "=" * 50)
    print("🎉 All command line tests passed!" if not failed else f"❌ {failed} test(s) failed")
    return 0 if not failed else 1


if __name__ == "__main__":
    sys.exit(main_runner())
