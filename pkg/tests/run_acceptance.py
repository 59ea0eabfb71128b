"""Desk-scale acceptance runs on synthetic corpora (does not require pytest).

Each check prints OK or FAIL with the measured numbers; the exit code is the
number of failed checks. ``--quick`` shrinks corpora and epochs for a smoke run.
"""
import argparse
import json
import logging
import math
import os
import sys
import tempfile
import time

# Ensure project root is on sys.path when run from tests/ folder
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from core import model as mdl
from core import pipeline
from core.experiments import run_transfer_experiment
from core.manifest import load_manifest
from core.run_config import parse_run_config

UNIFORM_24_RMSE = math.sqrt(23) / 24


def _config(seed, epochs, batch_size=130):
    return parse_run_config(f"seed={seed}\ntrain.epochs={epochs}\ntrain.batch_size={batch_size}\n")


def _corpus(workdir, name, n, scheme, seed, duration):
    out = os.path.join(workdir, name)
    pipeline.cmd_synth(out, n, scheme, seed, duration)
    return os.path.join(out, "manifest.csv")


def _check(results, name, ok, detail):
    results.append((name, bool(ok)))
    print(f"{name}: {'OK' if ok else 'FAIL'}  {detail}")


def _evaluate(ckpt, manifest, config, features, split="val", experiment="basic"):
    return pipeline.cmd_evaluate(ckpt, manifest, config, experiment, features, split=split)["reports"]


def run(workdir, quick=False, seed=7):
    n_binary = 10 if quick else 20
    duration = 12.0 if quick else 30.0
    epochs = 15 if quick else 120
    config = _config(seed, epochs)
    results = []

    # End-to-end learning on binary2
    started = time.perf_counter()
    binary = _corpus(workdir, "binary2", n_binary, "binary2", seed, duration)
    binary_features = os.path.join(workdir, "binary2_features")
    pipeline.cmd_extract(binary, config, binary_features)
    trained = pipeline.cmd_train(binary, config, binary_features, os.path.join(workdir, "binary.ckpt"))
    train_acc = _evaluate(trained["checkpoint"], binary, config, binary_features, "train")[0]["accuracy"]
    val_report = _evaluate(trained["checkpoint"], binary, config, binary_features)[0]
    _check(results, "end-to-end learning", train_acc >= 0.95 and val_report["accuracy"] >= 0.80,
           f"train acc {train_acc:.3f}, val acc {val_report['accuracy']:.3f} "
           f"({time.perf_counter() - started:.0f}s)")

    # Severity head against the uniform predictor
    severity = _corpus(workdir, "severity24", 72 if quick else 144, "severity24", seed, duration)
    severity_features = os.path.join(workdir, "severity24_features")
    pipeline.cmd_extract(severity, config, severity_features)
    sev = pipeline.cmd_train(severity, config, severity_features, os.path.join(workdir, "severity.ckpt"))
    sev_rmse = _evaluate(sev["checkpoint"], severity, config, severity_features)[0]["rmse"]
    _check(results, "severity head", sev_rmse < UNIFORM_24_RMSE,
           f"val rmse {sev_rmse:.4f} vs uniform {UNIFORM_24_RMSE:.4f}")

    # Augmentation effect
    augmented = pipeline.cmd_augment(binary, config, os.path.join(workdir, "binary2_augmented"))["manifest"]
    aug_features = os.path.join(workdir, "binary2_augmented_features")
    pipeline.cmd_extract(augmented, config, aug_features)
    aug = pipeline.cmd_train(augmented, config, aug_features, os.path.join(workdir, "augmented.ckpt"))
    aug_acc = _evaluate(aug["checkpoint"], augmented, config, aug_features)[0]["accuracy"]
    _check(results, "augmentation effect", aug_acc >= val_report["accuracy"] - 0.02,
           f"augmented val acc {aug_acc:.3f} vs plain {val_report['accuracy']:.3f}")

    # Transfer protocol
    emotions = _corpus(workdir, "emotion8", 24 if quick else 40, "emotion8", seed + 1, duration)
    emotion_features = os.path.join(workdir, "emotion8_features")
    pipeline.cmd_extract(emotions, config, emotion_features)
    em_manifest = load_manifest(emotions)
    bin_manifest = load_manifest(binary)
    transfer = run_transfer_experiment(
        pipeline.load_participants(em_manifest, emotion_features, "train"),
        pipeline.load_participants(em_manifest, emotion_features, "val"),
        pipeline.load_participants(bin_manifest, binary_features, "train"),
        pipeline.load_participants(bin_manifest, binary_features, "val"),
        config.arch, config.train_config("pretrain"), config.train_config("finetune"))
    tuned_acc = transfer["fine_tuned_report"].accuracy
    random_acc = transfer["random_lstm_report"].accuracy
    _check(results, "transfer protocol", transfer["frozen_hash_equal"] and tuned_acc >= random_acc,
           f"frozen hash equal {transfer['frozen_hash_equal']}, fine-tuned {tuned_acc:.3f} "
           f"vs random LSTM {random_acc:.3f}")

    # Noise robustness
    noise = _evaluate(trained["checkpoint"], binary, config, binary_features, experiment="noise")
    clean, *corrupted = noise
    finite = all(math.isfinite(r["accuracy"]) and math.isfinite(r["rmse"]) for r in noise)
    differ = all(r["rmse"] != clean["rmse"] for r in corrupted)
    no_gain = all(r["accuracy"] <= clean["accuracy"] + 0.02 for r in corrupted)
    _check(results, "noise robustness", len(noise) == 3 and finite and differ and no_gain,
           ", ".join(f"{r['metadata']['fraction']:.0%}: acc {r['accuracy']:.3f}" for r in noise))

    # Generalization to BDI-II labels
    bdi = _corpus(workdir, "bdi", 8, "bdi", seed + 2, duration)
    gen = pipeline.cmd_evaluate(trained["checkpoint"], bdi, config, "generalize")["reports"]
    by_task = {r["metadata"]["task"]: r for r in gen}
    partition = by_task["both"]["n_samples"] == by_task["taskA"]["n_samples"] + by_task["taskB"]["n_samples"]
    _check(results, "generalization protocol", partition,
           ", ".join(f"{t}: acc {r['accuracy']:.3f}" for t, r in by_task.items()))

    # Determinism and persistence
    again = pipeline.cmd_train(binary, config, binary_features, os.path.join(workdir, "binary_again.ckpt"))
    with open(trained["checkpoint"], "rb") as a, open(again["checkpoint"], "rb") as b:
        first_bytes = a.read()
        same_bytes = first_bytes == b.read()
    report_again = _evaluate(again["checkpoint"], binary, config, binary_features)[0]
    round_trip = mdl.checkpoint_to_bytes(mdl.load_checkpoint(trained["checkpoint"])) == first_bytes
    _check(results, "determinism and persistence",
           same_bytes and round_trip and json.dumps(report_again) == json.dumps(val_report),
           f"checkpoint bytes equal {same_bytes}, round trip {round_trip}")

    failed = [name for name, ok in results if not ok]
    print("\nResult: {}\n".format("ALL OK" if not failed else "FAILED: " + ", ".join(failed)))
    return len(failed)


def main(argv=None):
    parser = argparse.ArgumentParser(description="Synthetic-corpus acceptance runs.")
    parser.add_argument("--quick", action="store_true", help="small corpora and few epochs")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--workdir", help="keep outputs here instead of a temporary folder")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.workdir:
        os.makedirs(args.workdir, exist_ok=True)
        return run(args.workdir, args.quick, args.seed)
    with tempfile.TemporaryDirectory() as tmp:
        return run(tmp, args.quick, args.seed)


if __name__ == '__main__':
    sys.exit(main())
