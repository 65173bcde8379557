#!/usr/bin/env python
# Train the FCN with and without the adversarial term on a handful of
# small phantoms, then compare Dice and component counts on held-out ones.
# Takes a few minutes on one core; raise the patch count for better
# networks.
import logging

from advseg.data import DatasetConfig, PhantomSpec, make_dataset
from advseg.evaluation import build_report
from advseg.nets import build
from advseg.training import TrainingConfig, train_adversarial, train_baseline

logging.basicConfig(level=logging.INFO, format="%(message)s")

ds = make_dataset(DatasetConfig(phantom=PhantomSpec(size=(64, 64)), n_train=4, n_test=3, seed=1))
spec = build("fcn", ds.class_count)
cfg = TrainingConfig(batch_baseline=30, batch_adversarial_each=10, patches_per_class_per_image=16, epochs=3)

base = train_baseline(ds.train, spec, cfg)
adv = train_adversarial(ds.train, spec, None, TrainingConfig(**{**cfg.to_dict(), "adversarial": True}))
print("last losses, baseline", base.losses[-1], "adversarial", adv.losses[-1])

report = build_report(base.seg, adv.seg, ds.test, names=("baseline", "adversarial"))
for name, m in report.models.items():
    print(f"{name:12s} dice {m.dice_mean:.3f} +- {m.dice_std:.3f}   components {m.components_mean:.1f}")
print("paired t on mean Dice:", report.t_tests["mean"])
