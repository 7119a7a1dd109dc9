"""A miniature three-stage run: train, predict, score and probe.

The model is small and the stages are a few hundred iterations, so this
finishes in a couple of minutes on one core.  The numbers are far from
converged; the point is to show every piece of the pipeline in order.

Run: python3 demos/03_tiny_pipeline.py
"""

import numpy as np

from cass import evalkit
from cass.shapegen import generate_dataset
from cass.train import Trainer, TrainConfig, TrainingData, build_model, stage_loss_summary

ds = generate_dataset(categories=("bowl", "laptop"), instances_per_category=30,
                      views_per_instance=3, n_points=64, obs_points=48)
cfg = TrainConfig(latent_dim=16, n_points=64, obs_points=48, iters_s1=300, iters_s2=300,
                  iters_s3=100, lr_decay_every=200, log_every=20)
data = TrainingData.from_dataset(ds, cfg)
model, plan = build_model(cfg)
untrained, _ = build_model(cfg)
print(f"{sum(p.data.size for p in model.params.values())} parameters, "
      f"{len(data.obs_points)} training observations")

trainer = Trainer(cfg, data, model, plan)
for stage in (1, 2, 3):
    rows = trainer.run_stage(stage)
    first, last = stage_loss_summary(rows, stage)
    print(f"stage {stage}: loss {first:.4f} -> {last:.4f}")

_, test = ds.split(cfg.test_fraction)
preds = evalkit.predict_records(model, ds, test, obs_points=ds.obs_points)
report = evalkit.metric_report(preds)
cols = ["n", "IoU25", "10d5cm", "10d10cm", "CD", "rot_median_deg", "trans_median_cm"]
print("\n" + "category".ljust(10) + "".join(c.rjust(16) for c in cols))
for cat, row in report.rows.items():
    print(cat.ljust(10) + "".join(f"{row[c]:16.3f}" for c in cols))

probe = evalkit.factorization_probe(model, ds, reference=untrained)
print("\nlinear rotation probe, median error in degrees")
for k, v in probe.median_error.items():
    print(f"  {k:6s} trained {v:6.1f}   untrained {probe.untrained[k]:6.1f}")
print(f"  noise features {probe.chance:.1f}")
