"""Baseline-versus-adversarial comparison runs on a phantom dataset."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

from .data import Dataset, DatasetConfig, make_dataset
from .evaluation import MetricsReport, build_report
from .nets import build
from .training import TrainingConfig, train_adversarial, train_baseline

log = logging.getLogger(__name__)

# Desk-scale schedule: same 3:1 batch split and learning rates as the
# published one, fewer patches and smaller batches so that a run takes
# minutes on one CPU core.
DESK = dict(batch_baseline=60, batch_adversarial_each=20, patches_per_class_per_image=24, epochs=5)


def desk_config(seed: int = 0, **kw) -> TrainingConfig:
    return TrainingConfig(**{**DESK, "seed": seed, **kw})


@dataclass
class Comparison:
    net: str
    seed: int
    report: MetricsReport
    seconds: float

    @property
    def dice(self) -> tuple[float, float]:
        m = self.report.models
        return m["baseline"].dice_mean, m["adversarial"].dice_mean

    @property
    def components(self) -> tuple[float, float]:
        m = self.report.models
        return m["baseline"].components_mean, m["adversarial"].components_mean

    @property
    def directional(self) -> bool:
        """Adversarial Dice within 0.005 of baseline and fewer components."""
        (db, da), (cb, ca) = self.dice, self.components
        return da >= db - 0.005 and ca < cb

    def line(self) -> str:
        (db, da), (cb, ca) = self.dice, self.components
        return (f"{self.net:8s} seed {self.seed}: dice {db:.4f} -> {da:.4f}, "
                f"components {cb:.1f} -> {ca:.1f}  [{'ok' if self.directional else 'miss'}] ({self.seconds:.0f}s)")


def compare(net: str, seed: int, dataset: Dataset | None = None, config: TrainingConfig | None = None) -> Comparison:
    """Train ``net`` with and without the adversarial term and score both on
    the test split."""
    ds = dataset or make_dataset(DatasetConfig())
    cfg = config or desk_config(seed)
    spec = build(net, ds.class_count)
    t0 = time.perf_counter()
    base = train_baseline(ds.train, spec, cfg)
    log.info("%s seed %d: baseline done after %.0fs", net, seed, time.perf_counter() - t0)
    adv = train_adversarial(ds.train, spec, None, cfg)
    report = build_report(base.seg, adv.seg, ds.test, names=("baseline", "adversarial"))
    return Comparison(net, seed, report, time.perf_counter() - t0)
