#!/usr/bin/env python3
"""
HierLoc command line
Pretraining, training, evaluation, sweeps and prediction over UJIIndoorLoc-format data
"""

import os
import sys
import json
import logging
import argparse
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from tensor_core import HierLocError
from dataset import (
    FingerprintRecord,
    features_and_targets,
    load_ujiindoorloc,
    normalize_rssi,
    split_train_val,
    synthesize_records,
    write_ujiindoorloc,
)
from hierloc_model import (
    HierLocModel,
    TrainLog,
    fit,
    load_encoder,
    load_model,
    predict,
    pretrain_sae,
    save_encoder,
    save_model,
    standard_gradient_checks,
)
from evaluation import EvalReport, evaluate, render_text, report_to_json, write_error_csv
from config import ConfigError, RunConfig, SweepSpec, resolve_config

logger = logging.getLogger("hierloc")

GRADCHECK_TOLERANCE = 1e-4
SWEEP_COLUMNS = ["value", "building_hit", "floor_hit", "bf_hit", "err2d", "err3d"]

USAGE = """
📡 HierLoc - hierarchical Wi-Fi indoor localization

Usage: python src/cli.py <command> [options]

Commands:
  pretrain      - Pretrain the stacked autoencoder, write encoder weights
  train         - Train building/floor and position stages, write the model file
  evaluate      - Score a model on the test file (JSON + text report, error CSV)
  sweep         - Train and evaluate one pipeline per value of a hyperparameter
  predict       - Predict building, floor, x, y for raw RSSI rows
  synthesize    - Write a synthetic 3-building/5-floor dataset
  gradcheck     - Compare analytic and finite-difference gradients

Examples:
  python src/cli.py train --config hierloc.conf --seed 7
  python src/cli.py evaluate --out runs/lstm
  python src/cli.py sweep --axis bf_dropout --values 0,0.1,0.2,0.3,0.4,0.5
  python src/cli.py train --set rnn_kind=standard --set batch_size=64 --force
"""


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def _write_json(path: Path, payload: dict) -> Path:
    return _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError(f"{path} already exists; pass --force to overwrite it")


def _logs_payload(config: RunConfig, logs: Dict[str, TrainLog]) -> dict:
    return {"config": config.to_dict(), "seed": config.seed, "stages": {k: v.to_dict() for k, v in logs.items()}}


def _load_training_split(config: RunConfig):
    hp = config.hyperparams
    records = load_ujiindoorloc(config.train_path, config.building_count, config.floor_count, hp.input_width)
    return split_train_val(records, hp.val_ratio, hp.seed, config.building_count, config.floor_count)


def cmd_pretrain(config: RunConfig, force: bool = False) -> Path:
    path = config.resolved_encoder_path
    _refuse_overwrite(path, force)
    split = _load_training_split(config)
    model = HierLocModel(config.hyperparams, split.meta)
    train = features_and_targets(split.train)
    val = features_and_targets(split.validation)
    _, log = pretrain_sae(model, train.features, val.features)
    save_encoder(model, path, config.to_dict())
    _write_json(path.with_suffix(".log.json"), _logs_payload(config, {"sae": log}))
    print(f"✅ Encoder written to {path} ({log.stop_epoch} epochs, best {log.best_epoch})")
    return path


def cmd_train(config: RunConfig, force: bool = False) -> HierLocModel:
    path = config.resolved_model_path
    _refuse_overwrite(path, force)
    split = _load_training_split(config)
    model = HierLocModel(config.hyperparams, split.meta)
    if config.encoder_path is not None:
        load_encoder(model, config.encoder_path)
    model, logs = fit(split, config.hyperparams, model)
    save_model(model, path, config.to_dict())
    _write_json(path.with_suffix(".log.json"), _logs_payload(config, logs))
    for name, log in logs.items():
        print(f"📈 {name}: {log.stop_epoch} epochs, best epoch {log.best_epoch}, val {min(log.val_losses):.6f}")
    print(f"✅ Model written to {path}")
    return model


def _check_model_meta(model: HierLocModel, config: RunConfig) -> None:
    meta = model.meta
    if (meta.building_count, meta.floor_count) != (config.building_count, config.floor_count):
        raise ConfigError(
            f"model was trained for {meta.building_count} buildings / {meta.floor_count} floors, "
            f"data is configured for {config.building_count} / {config.floor_count}"
        )


def _evaluate_model(model: HierLocModel, config: RunConfig, records: List[FingerprintRecord]) -> EvalReport:
    report = evaluate(model, records, config.penalties)
    report.config["run"] = config.to_dict()
    return report


def cmd_evaluate(config: RunConfig) -> EvalReport:
    model = load_model(config.resolved_model_path)
    _check_model_meta(model, config)
    records = load_ujiindoorloc(config.test_path, config.building_count, config.floor_count, model.params.input_width)
    report = _evaluate_model(model, config, records)
    out = config.out_dir
    _write_text(out / "report.json", report_to_json(report) + "\n")
    text = render_text(report)
    _write_text(out / "report.txt", text)
    write_error_csv(report, out / "errors.csv")
    print(text, end="")
    print(f"📄 Reports written to {out}")
    return report


def _sweep_value(config: RunConfig, spec: SweepSpec, value: str, test: List[FingerprintRecord], records) -> dict:
    runs = []
    for repetition in range(spec.repetitions):
        hp = spec.hyperparams_for(config.hyperparams, value, repetition)
        split = split_train_val(records, hp.val_ratio, hp.seed, config.building_count, config.floor_count)
        model, _ = fit(split, hp)
        report = evaluate(model, test, config.penalties)
        runs.append({
            "seed": hp.seed,
            "building_hit": report.building_hit_rate,
            "floor_hit": report.floor_hit_rate,
            "bf_hit": report.building_floor_hit_rate,
            "err2d": report.mean_2d_error,
            "err3d": report.mean_3d_error,
        })
        logger.info(f"🔁 {spec.axis}={value} repetition {repetition}: {runs[-1]}")
    row = {"value": value}
    for column in SWEEP_COLUMNS[1:]:
        row[column] = float(np.mean([run[column] for run in runs]))
    return {"row": row, "runs": runs}


def cmd_sweep(config: RunConfig, spec: SweepSpec, force: bool = False) -> pd.DataFrame:
    """One independent pipeline per value; rows follow the order of the value list"""
    # every value is validated before any training starts
    for value in spec.values:
        try:
            spec.hyperparams_for(config.hyperparams, value)
        except ValidationError as e:
            raise ConfigError(f"invalid value {value!r} for sweep axis {spec.axis}: {e.errors()[0]['msg']}") from None
    csv_path = config.out_dir / f"sweep_{spec.axis}.csv"
    _refuse_overwrite(csv_path, force)

    hp = config.hyperparams
    records = load_ujiindoorloc(config.train_path, config.building_count, config.floor_count, hp.input_width)
    test = load_ujiindoorloc(config.test_path, config.building_count, config.floor_count, hp.input_width)
    results = [_sweep_value(config, spec, value, test, records) for value in spec.values]

    table = pd.DataFrame([r["row"] for r in results], columns=SWEEP_COLUMNS)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = csv_path.with_name(csv_path.name + ".tmp")
    table.to_csv(tmp, index=False, float_format="%.6f")
    os.replace(tmp, csv_path)
    _write_json(csv_path.with_suffix(".json"), {
        "config": config.to_dict(),
        "sweep": spec.model_dump(mode="json"),
        "seeds": [config.seed + r for r in range(spec.repetitions)],
        "results": results,
    })
    print(table.to_string(index=False))
    print(f"📊 Sweep table written to {csv_path}")
    return table


def parse_rssi_rows(lines: Sequence[str], width: int) -> np.ndarray:
    """Comma-separated raw RSSI rows; blank lines are skipped"""
    rows = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cells = line.strip().split(",")
        if len(cells) != width:
            raise ConfigError(f"input row {number} has {len(cells)} values, expected {width}")
        try:
            values = [float(cell) for cell in cells]
        except ValueError:
            raise ConfigError(f"input row {number} contains a non-numeric value") from None
        if not np.all(np.isfinite(values)):
            raise ConfigError(f"input row {number} contains a non-finite value")
        rows.append(values)
    return np.array(rows, dtype=np.float64).reshape(len(rows), width)


def cmd_predict(config: RunConfig, source: TextIO, sink: Optional[TextIO] = None) -> int:
    model = load_model(config.resolved_model_path)
    sink = sink or sys.stdout
    raw = parse_rssi_rows(source.read().splitlines(), model.params.input_width)
    if raw.shape[0] == 0:
        return 0
    decoded = predict(model, normalize_rssi(raw))
    for building, floor, x, y in decoded.rows():
        sink.write(f"{building},{floor},{x!r},{y!r}\n")
    return raw.shape[0]


def cmd_synthesize(config: RunConfig, train_count: int, test_count: int, extent: float, force: bool = False) -> None:
    hp = config.hyperparams
    for path in (config.train_path, config.test_path):
        _refuse_overwrite(Path(path), force)
    train = synthesize_records(train_count, hp.seed, hp.input_width, config.building_count, config.floor_count, extent)
    test = synthesize_records(test_count, hp.seed + 1, hp.input_width, config.building_count, config.floor_count, extent)
    write_ujiindoorloc(train, config.train_path)
    write_ujiindoorloc(test, config.test_path)
    print(f"✅ Synthetic data: {train_count} training rows in {config.train_path}, {test_count} test rows in {config.test_path}")


def cmd_gradcheck(seed: int = 0) -> bool:
    results = standard_gradient_checks(seed)
    ok = True
    for name, error in results.items():
        passed = error <= GRADCHECK_TOLERANCE
        ok = ok and passed
        print(f"{'✅' if passed else '❌'} {name:<16} max relative error {error:.3e}")
    return ok


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", help="output directory for artifacts")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")

    parser = argparse.ArgumentParser(
        prog="hierloc", description=USAGE, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("pretrain", parents=[common], help="pretrain the autoencoder")
    commands.add_parser("train", parents=[common], help="train the full model")
    commands.add_parser("evaluate", parents=[common], help="evaluate a trained model")
    sweep = commands.add_parser("sweep", parents=[common], help="sweep one hyperparameter")
    sweep.add_argument("--axis", required=True, help="rnn_kind, bf_dropout, position_dropout or batch_size")
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--repetitions", type=int, default=1)
    pred = commands.add_parser("predict", parents=[common], help="predict from raw RSSI rows")
    pred.add_argument("--input", help="file with one comma-separated RSSI row per line (default stdin)")
    synth = commands.add_parser("synthesize", parents=[common], help="write a synthetic dataset")
    synth.add_argument("--records", type=int, default=3000)
    synth.add_argument("--test-records", type=int, default=500)
    synth.add_argument("--extent", type=float, default=20.0)
    commands.add_parser("gradcheck", parents=[common], help="verify analytic gradients")
    return parser


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args.config, args.overrides, args.seed, args.out)
    if args.command == "pretrain":
        cmd_pretrain(config, args.force)
    elif args.command == "train":
        cmd_train(config, args.force)
    elif args.command == "evaluate":
        cmd_evaluate(config)
    elif args.command == "sweep":
        try:
            spec = SweepSpec(axis=args.axis, values=args.values, repetitions=args.repetitions)
        except ValueError as e:
            raise ConfigError(f"invalid sweep: {e}") from None
        cmd_sweep(config, spec, args.force)
    elif args.command == "predict":
        if args.input:
            with open(args.input, "r", encoding="utf-8") as source:
                cmd_predict(config, source)
        else:
            cmd_predict(config, sys.stdin)
    elif args.command == "synthesize":
        cmd_synthesize(config, args.records, args.test_records, args.extent, args.force)
    elif args.command == "gradcheck":
        return 0 if cmd_gradcheck(config.seed) else 1
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("HIERLOC_LOG_LEVEL", "INFO").upper(),
        format='%(asctime)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (HierLocError, OSError) as e:
        logger.error(f"Command {args.command} failed: {e}")
        print(f"❌ Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
