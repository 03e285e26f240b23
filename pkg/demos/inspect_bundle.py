"""Load a trained bundle, draw class-conditional samples and counterfactuals.

Usage: python demos/inspect_bundle.py runs/mnist-desk

The bundle directory is what ``genrobust train`` + ``genrobust calibrate``
produce. Images are written next to the bundle under ``demo/``.
"""
import sys
from pathlib import Path

import numpy as np

from genrobust import pipeline
from genrobust.config import load_config
from genrobust.interpret import (counterfactual, fid, fit_class_gaussian, generate_class_samples,
                                 generation_budget, sample_seeds)
from genrobust.io import save_image_grid

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/mnist-desk")
exp = pipeline.Experiment(load_config(out / "manifest.json"), out)
gc = exp.load_classifier()
train, test = exp.dataset("train"), exp.dataset("test")
extractor = pipeline.feature_extractor(exp)
print("calibration offsets", np.round(gc.calib.numpy(), 4))

for step_size in (0.05, 0.2, 1.0):
    budget = generation_budget(steps=7, step_size=step_size)
    for k in range(gc.num_classes):
        real = train.images[train.labels == k]
        seeds = sample_seeds(fit_class_gaussian(real), 36, np.random.default_rng(k))
        samples = generate_class_samples(gc, k, 36, budget, seeds=seeds)
        save_image_grid(samples, out / "demo" / f"generate_step{step_size}_class{k}.png", 6)
        print(f"step {step_size} class {k}: FID seeds {float(fid(extractor, real, seeds)):7.2f}  "
              f"samples {float(fid(extractor, real, samples)):7.2f}")

# counterfactuals: move test images of other classes toward class 0
x = test.images[test.labels != 0][:36]
cf = counterfactual(gc, x, 0, generation_budget(steps=10, step_size=1.0))
save_image_grid(x, out / "demo" / "counterfactual_inputs.png", 6)
save_image_grid(cf.images, out / "demo" / "counterfactual_to_class0.png", 6)
print(f"counterfactuals: {cf.flipped.float().mean():.2f} flipped to class 0, mean L2 change {cf.norms.mean():.2f}")
