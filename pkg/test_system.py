#!/usr/bin/env python3
"""
HierLoc System Test
Validates the installation and runs the full pipeline on synthetic data
"""

import sys
import importlib
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / 'src'))

try:
    from dataset import split_train_val, synthesize_records
    from hierloc_model import HyperParams, fit
    from evaluation import evaluate, render_text
except ImportError as e:
    print(f"❌ Import error: {e}")
    print("Make sure you're running from the project root and dependencies are installed")
    sys.exit(1)

AP = 24
SUITES = ["test_tensor_core", "test_neuralnet", "test_dataset", "test_hierloc_model", "test_evaluation", "test_cli"]


def test_dependencies():
    """Required packages import"""
    print("📦 Testing dependencies...")
    for name in ("numpy", "pandas", "pydantic", "dotenv", "tqdm"):
        importlib.import_module(name)
        print(f"✅ {name} available")


def test_synthetic_pipeline():
    """Noiseless 3-building/5-floor data: full hits and sub-meter planar error"""
    print("🏢 Training on synthetic fingerprints...")
    records = synthesize_records(4000, seed=0, ap_count=AP, extent=20.0)
    test = synthesize_records(500, seed=1, ap_count=AP, extent=20.0)
    split = split_train_val(records, 0.9, seed=0)
    params = HyperParams(
        input_width=AP, sae_layers=[64, 64, 32], sae_epochs=30, common_layers=[64, 64], rnn_hidden=32,
        bf_head_layers=[16, 1], position_layers=[64, 64, 2], position_dropout=0.0,
        position_epochs=120, patience=10,
    )
    model, logs = fit(split, params)
    for name, log in logs.items():
        print(f"   📈 {name}: {log.stop_epoch} epochs, best {log.best_epoch}")

    report = evaluate(model, test)
    print(render_text(report))
    assert report.building_hit_rate == 1.0
    assert report.floor_hit_rate >= 0.99
    assert report.mean_2d_error <= 1.0


def run_suites() -> bool:
    all_passed = True
    for name in SUITES:
        print(f"\n🧪 {name}")
        module = importlib.import_module(name)
        runner = getattr(module, "main_runner", None) or module.main
        if runner() != 0:
            all_passed = False
    return all_passed


def main():
    """Run all tests"""
    print("📡 HierLoc System Test\n")

    all_passed = True
    for test in (test_dependencies, test_synthetic_pipeline):
        try:
            test()
        except Exception as e:
            print(f"❌ {test.__name__} failed: {e!r}")
            all_passed = False
        print()

    if not run_suites():
        all_passed = False

    print("\n" + "=" * 50)
    if all_passed:
        print("🎉 All tests passed! HierLoc is ready to use.")
        print("\nNext steps:")
        print("1. Put trainingData.csv and validationData.csv into data/ (or set HIERLOC_DATA_DIR)")
        print("2. Train with: python src/cli.py train")
        print("3. Evaluate with: python src/cli.py evaluate")
    else:
        print("❌ Some tests failed. Check the output above for details.")
        print("Try running: pip install -r requirements.txt")

    return 0 if all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
