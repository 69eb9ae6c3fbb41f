"""Generate the tiny synthetic dataset, train the tiny preset and evaluate it.

Run from the repository root:

    python demos/tiny_walkthrough.py [workdir]

Takes a few minutes on one CPU core.
"""
import sys
import time
from pathlib import Path

from egosag.config import load_config
from egosag.data import generate_dataset, synth_preset
from egosag.engine import class_accuracy, evaluate, load_samples, train

work = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/walkthrough")
train_m, val_m = generate_dataset(synth_preset("tiny"), work / "data")
print(f"dataset: {len(train_m.pairs)} train pairs, {len(val_m.pairs)} val pairs")

cfg = load_config(preset="tiny")
cache = {}
train_s = load_samples(train_m, cfg, cache)
val_s = load_samples(val_m, cfg, cache)

t0 = time.time()
res = train(cfg, train_s, val_s, work / "run")
hist = res["history"]
print(f"trained {len(hist)} steps in {time.time() - t0:.0f}s; loss {hist[0]['total']:.3f} -> {hist[-1]['total']:.3f}")

for name, samples in (("train", train_s), ("val", val_s)):
    report, preds = evaluate(res["model"], samples, cfg.loss.tau, cfg.loss.top_k or None)
    print(f"\n{name}: clip class accuracy {class_accuracy(preds, samples):.2f}")
    print(report.table(train_m.affordance_catalog))
