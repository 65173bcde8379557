"""Losses, RMSprop, class-balanced patch sampling and the training loops.

Baseline training minimises the average per-pixel cross entropy ``L_s``
with minibatches of 300 patches.  Adversarial training splits every 300
patches into three minibatches of 100 and cycles

* ``L_s`` - cross entropy, segmentation parameters only;
* ``L_d`` - discriminator on 50 manual (one-hot) + 50 generated (softmax)
  label patches, discriminator parameters only;
* ``L_a`` - discriminator on generated patches, with a gradient-reversal
  node between segmentation and discriminator so that one backward pass
  descends the discriminator and ascends the segmentation network.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import LabeledImage, reflect_pad
from .nets import Network, NetworkSpec, build_discriminator, receptive_field

log = logging.getLogger(__name__)

LABEL_PATCH = 21
IMAGE_PATCH = 25
MANUAL, GENERATED = 1, 0  # discriminator target indices
CLIP = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    lr_seg: float = 1e-3
    lr_disc: float = 1e-5
    lr_adv: float | None = None  # theta_s rate in the L_a step; None = lr_seg
    batch_baseline: int = 300
    batch_adversarial_each: int = 100
    epochs: int = 5
    patches_per_class_per_image: int = 2000
    seed: int = 0
    adversarial: bool = False
    freeze_d_during_adv: bool = False
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only
    reversal: bool = True  # off only for sign tests

    def __post_init__(self):
        if self.lr_seg <= 0 or self.lr_disc <= 0 or (self.lr_adv is not None and self.lr_adv <= 0):
            raise ValueError("learning rates must be positive")
        if self.batch_baseline <= 0 or self.batch_adversarial_each <= 0:
            raise ValueError("batch sizes must be positive")
        if self.epochs < 0 or self.patches_per_class_per_image <= 0:
            raise ValueError("epochs must be >= 0 and patches_per_class_per_image > 0")
        if self.batch_adversarial_each % 2:
            raise ValueError("batch_adversarial_each must be even (half manual, half generated)")

    @classmethod
    def paper(cls, **kw) -> "TrainingConfig":
        """The published schedule: 50,000 patches per class per image."""
        return cls(patches_per_class_per_image=50_000, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainingConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def samples_per_step(self) -> int:
        return 3 * self.batch_adversarial_each if self.adversarial else self.batch_baseline


# ---------------------------------------------------------------------------
# losses


def cross_entropy_map(prob: np.ndarray, labels: np.ndarray):
    """Mean over batch and positions of ``-log p(true class)``.

    ``prob`` is (n, C, h, w) softmax output, ``labels`` (n, h, w) integers.
    Probabilities are clamped to [1e-7, 1] before the log.  Returns
    ``(loss, d loss / d prob)``.
    """
    n, C, h, w = prob.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match prediction {(n, h, w)}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    idx = labels[:, None].astype(np.intp)
    p = np.take_along_axis(prob, idx, axis=1)
    clipped = np.clip(p, CLIP, 1.0)
    m = n * h * w
    loss = float(-np.log(clipped.astype(np.float64)).sum() / m)
    grad = np.zeros_like(prob)
    gp = np.where(p >= CLIP, -1.0 / (m * clipped.astype(np.float64)), 0.0).astype(prob.dtype)
    np.put_along_axis(grad, idx, gp, axis=1)
    return loss, grad


def cross_entropy(tape, prob: ad.Var, labels) -> ad.Var:
    loss, grad = cross_entropy_map(prob.value, labels)
    out = np.asarray(loss, dtype=prob.value.dtype)
    return tape.record("cross_entropy", (prob,), out, lambda g: (grad * g,))


def one_hot(labels: np.ndarray, C: int, dtype=np.float32) -> np.ndarray:
    """(n, h, w) integers -> (n, C, h, w) one-hot."""
    return (np.arange(C)[None, :, None, None] == labels[:, None]).astype(dtype)


# ---------------------------------------------------------------------------
# RMSprop


def rmsprop_step(acc: np.ndarray, param: np.ndarray, grad: np.ndarray, lr: float, decay: float = 0.9,
                 eps: float = 1e-8, direction: str = "descend") -> np.ndarray:
    """In-place update ``acc <- decay*acc + (1-decay)*g^2``,
    ``param <- param - lr*g / (sqrt(acc) + eps)``.  Returns the applied delta."""
    if direction not in ("descend", "ascend"):
        raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    if not (acc.shape == param.shape == grad.shape):
        raise ValueError(f"shape mismatch: acc {acc.shape}, param {param.shape}, grad {grad.shape}")
    g = grad if direction == "descend" else -grad
    acc *= decay
    acc += (1 - decay) * g * g
    delta = -(lr * g) / (np.sqrt(acc) + eps)
    delta = delta.astype(param.dtype, copy=False)
    param += delta
    return delta


class RMSprop:
    """One optimizer per parameter set; accumulators keyed by param name."""

    def __init__(self, params, lr: float, decay: float = 0.9, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.decay, self.eps = lr, decay, eps
        self.acc = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self, direction: str = "descend") -> dict[str, np.ndarray]:
        return {
            p.name: rmsprop_step(self.acc[p.name], p.value, p.grad, self.lr, self.decay, self.eps, direction)
            for p in self.params
        }

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for k, v in self.acc.items()}

    def load_state(self, prefix: str, state: dict[str, np.ndarray]) -> None:
        for k, v in self.acc.items():
            v[...] = state[f"{prefix}.{k}"].reshape(v.shape)


# ---------------------------------------------------------------------------
# patch sampling


@dataclass
class PatchBatch:
    inputs: np.ndarray  # (n, 1, S, S), S = rf + 20
    labels: np.ndarray  # (n, 21, 21)
    images: np.ndarray  # (n, 1, 25, 25) central crop of inputs
    classes: np.ndarray  # (n,) label of each central pixel
    centers: np.ndarray  # (n, 3) image index, row, col

    def __len__(self):
        return len(self.classes)

    def __getitem__(self, sl: slice) -> "PatchBatch":
        return PatchBatch(self.inputs[sl], self.labels[sl], self.images[sl], self.classes[sl], self.centers[sl])


def plan_centers(images: list[LabeledImage], C: int, count_per_class: int, rng: np.random.Generator) -> np.ndarray:
    """Balanced, shuffled patch centres as rows ``(image, row, col, class)``.

    Every (image, class) pair contributes ``count_per_class`` centres whose
    label is the class.  When a class is missing from an image its quota is
    drawn from the images that contain it.
    """
    pools = [[np.flatnonzero(im.labels.ravel() == c) for c in range(C)] for im in images]
    rows = []
    for i, im in enumerate(images):
        w = im.labels.shape[1]
        for c in range(C):
            if len(pools[i][c]):
                owners = np.full(count_per_class, i)
            else:
                donors = [j for j in range(len(images)) if len(pools[j][c])]
                if not donors:
                    raise ValueError(f"class {c} is absent from every image")
                owners = np.asarray(donors)[rng.integers(0, len(donors), count_per_class)]
            for j in np.unique(owners):
                k = int((owners == j).sum())
                pix = pools[j][c][rng.integers(0, len(pools[j][c]), k)]
                wj = images[j].labels.shape[1]
                rows.append(np.stack([np.full(k, j), pix // wj, pix % wj, np.full(k, c)], axis=1))
    plan = np.concatenate(rows).astype(np.int64)
    return plan[rng.permutation(len(plan))]


class PatchExtractor:
    """Cuts input/label/image patches around planned centres.

    Images are reflect-padded by half the input patch so any pixel can be a
    centre.
    """

    def __init__(self, images: list[LabeledImage], net_spec: NetworkSpec):
        self.size = receptive_field(net_spec) + LABEL_PATCH - 1
        self.half = self.size // 2
        self.images = [reflect_pad(im.image.astype(np.float32), self.half) for im in images]
        self.labels = [reflect_pad(im.labels, self.half) for im in images]

    def extract(self, centers: np.ndarray) -> PatchBatch:
        n, S, h = len(centers), self.size, self.half
        inputs = np.empty((n, 1, S, S), np.float32)
        labels = np.empty((n, LABEL_PATCH, LABEL_PATCH), np.int64)
        lh = LABEL_PATCH // 2
        for j in np.unique(centers[:, 0]):
            sel = np.flatnonzero(centers[:, 0] == j)
            r, c = centers[sel, 1], centers[sel, 2]
            inputs[sel, 0] = sliding_window_view(self.images[j], (S, S))[r, c]
            labels[sel] = sliding_window_view(self.labels[j], (LABEL_PATCH, LABEL_PATCH))[r + h - lh, c + h - lh]
        o = h - IMAGE_PATCH // 2
        images = np.ascontiguousarray(inputs[:, :, o : o + IMAGE_PATCH, o : o + IMAGE_PATCH])
        return PatchBatch(inputs, labels, images, centers[:, 3].copy(), centers[:, :3].copy())


def sample_patches(images: list[LabeledImage], net_spec: NetworkSpec, count_per_class: int,
                   rng: np.random.Generator) -> PatchBatch:
    """Class-balanced patches (central-pixel label defines the class)."""
    plan = plan_centers(images, net_spec.class_count, count_per_class, rng)
    return PatchExtractor(images, net_spec).extract(plan)


def epoch_plan(images, C, config: TrainingConfig, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 1, epoch])
    return plan_centers(images, C, config.patches_per_class_per_image, rng)


# ---------------------------------------------------------------------------
# update steps


def seg_step(seg: Network, opt: RMSprop, batch: PatchBatch, key) -> float:
    """One L_s update of the segmentation parameters."""
    tape = ad.Tape()
    logits = seg.forward(batch.inputs, tape, "train", key)
    loss = cross_entropy(tape, ad.softmax(tape, logits), batch.labels)
    opt.zero_grad()
    tape.backward(loss)
    opt.step()
    return float(loss.value)


def generate(seg: Network, inputs: np.ndarray, key) -> np.ndarray:
    """Softmax segmentation with train-mode statistics, detached from θ_s."""
    logits = seg.forward(inputs, None, "train", key, update_stats=False)
    return ad.softmax(None, logits).value


def disc_step(seg: Network, disc: Network, opt: RMSprop, batch: PatchBatch, key) -> float:
    """One L_d update: half manual (one-hot), half generated; θ_d only."""
    half = len(batch) // 2
    C = seg.spec.class_count
    manual = one_hot(batch.labels[:half], C)
    fake = generate(seg, batch.inputs[half:], key)
    segs = np.concatenate([manual, fake.astype(np.float32)])
    targets = np.r_[np.full(half, MANUAL), np.full(len(batch) - half, GENERATED)].reshape(-1, 1, 1)
    tape = ad.Tape()
    logits = disc.forward(segs, tape, "train", key, image=batch.images)
    loss = cross_entropy(tape, ad.softmax(tape, logits), targets)
    opt.zero_grad()
    tape.backward(loss)
    opt.step()
    return float(loss.value)


def adversarial_step(seg: Network, disc: Network, seg_opt: RMSprop, disc_opt: RMSprop, batch: PatchBatch, key,
                     reversal: bool = True, freeze_disc: bool = False):
    """One L_a update of the whole network.

    The discriminator is scored on generated patches with their true target
    ("generated"); the reversal node makes θ_s ascend that loss while θ_d
    descends it.  Returns ``(loss, seg_deltas, disc_deltas)``.
    """
    tape = ad.Tape()
    prob = ad.softmax(tape, seg.forward(batch.inputs, tape, "train", key))
    if reversal:
        prob = ad.gradient_reversal(tape, prob)
    logits = disc.forward(prob, tape, "train", key, image=batch.images)
    targets = np.full((len(batch), 1, 1), GENERATED)
    loss = cross_entropy(tape, ad.softmax(tape, logits), targets)
    seg_opt.zero_grad()
    disc_opt.zero_grad()
    tape.backward(loss)
    ds = seg_opt.step()
    dd = {} if freeze_disc else disc_opt.step()
    return float(loss.value), ds, dd


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    seg: Network
    disc: Network | None
    losses: list[tuple[int, float, float, float]] = field(default_factory=list)
    steps: int = 0


class Trainer:
    """Drives baseline or adversarial training with resumable checkpoints.

    Every random choice derives from ``config.seed`` and the step index
    (epoch plans from ``(seed, epoch)``, dropout masks from
    ``(net seed, layer, step, phase)``), so a run resumed from a checkpoint
    ends in the same state as an uninterrupted one.
    """

    def __init__(self, images: list[LabeledImage], net_spec: NetworkSpec, config: TrainingConfig,
                 disc_spec: NetworkSpec | None = None):
        self.images = images
        self.config = config
        self.C = net_spec.class_count
        self.seg = Network(net_spec, seed=config.seed)
        self.seg_opt = RMSprop(self.seg.params, config.lr_seg, config.rms_decay, config.rms_eps)
        self.disc = None
        if config.adversarial:
            disc_spec = disc_spec or build_discriminator(self.C)
            if disc_spec.class_count != self.C:
                raise ValueError(f"discriminator built for {disc_spec.class_count} classes, network has {self.C}")
            self.disc = Network(disc_spec, seed=config.seed + 1)
            self.disc_opt = RMSprop(self.disc.params, config.lr_disc, config.rms_decay, config.rms_eps)
            # ascent on θ_s through L_a runs on its own optimizer at the segmentation rate
            lr_adv = config.lr_seg if config.lr_adv is None else config.lr_adv
            self.adv_opt = RMSprop(self.seg.params, lr_adv, config.rms_decay, config.rms_eps)
        self.extractor = PatchExtractor(images, net_spec)
        self.step = 0
        self.losses: list[tuple[int, float, float, float]] = []
        self._plans: dict[int, np.ndarray] = {}

    # -- bookkeeping ------------------------------------------------------

    @property
    def steps_per_epoch(self) -> int:
        total = len(self.images) * self.C * self.config.patches_per_class_per_image
        return total // self.config.samples_per_step

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.config.epochs

    def batch_for(self, step: int) -> PatchBatch:
        epoch, i = divmod(step, self.steps_per_epoch)
        if epoch not in self._plans:
            self._plans = {epoch: epoch_plan(self.images, self.C, self.config, epoch)}
        B = self.config.samples_per_step
        return self.extractor.extract(self._plans[epoch][i * B : (i + 1) * B])

    def networks(self) -> dict[str, Network]:
        return {"seg": self.seg} if self.disc is None else {"seg": self.seg, "disc": self.disc}

    def save(self, path) -> Path:
        state = self.seg_opt.state("seg_opt")
        if self.disc is not None:
            state.update(self.disc_opt.state("disc_opt"))
            state.update(self.adv_opt.state("adv_opt"))
        meta = {
            "config": self.config.to_dict(),
            "step": self.step,
            "total_steps": self.total_steps,
            "losses": [list(r) for r in self.losses],
        }
        return save_checkpoint(path, self.networks(), state, meta)

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.meta.get("config") != self.config.to_dict():
            raise ValueError("checkpoint was written with a different training config")
        for key, net in self.networks().items():
            if key not in ckpt.networks or ckpt.networks[key].spec != net.spec:
                raise ValueError(f"checkpoint network {key!r} does not match the requested spec")
            src = ckpt.networks[key]
            for p, q in zip(net.params, src.params):
                p.value[...] = q.value
            for name, arr in net.buffers().items():
                arr[...] = src.buffers()[name]
        self.seg_opt.load_state("seg_opt", ckpt.state)
        if self.disc is not None:
            self.disc_opt.load_state("disc_opt", ckpt.state)
            self.adv_opt.load_state("adv_opt", ckpt.state)
        self.step = int(ckpt.meta["step"])
        self.losses = [tuple(r) for r in ckpt.meta["losses"]]

    # -- loop -------------------------------------------------------------

    def train_step(self) -> tuple[int, float, float, float]:
        cfg, s = self.config, self.step
        batch = self.batch_for(s)
        if self.disc is None:
            row = (s, seg_step(self.seg, self.seg_opt, batch, (s, 0)), math.nan, math.nan)
        else:
            b = cfg.batch_adversarial_each
            ls = seg_step(self.seg, self.seg_opt, batch[0:b], (s, 0))
            ld = disc_step(self.seg, self.disc, self.disc_opt, batch[b : 2 * b], (s, 1))
            la, _, _ = adversarial_step(self.seg, self.disc, self.adv_opt, self.disc_opt, batch[2 * b : 3 * b],
                                        (s, 2), cfg.reversal, cfg.freeze_d_during_adv)
            row = (s, ls, ld, la)
        checked = row[1:] if self.disc is not None else row[1:2]
        if not all(math.isfinite(v) for v in checked):
            raise TrainingDiverged(f"non-finite loss at step {s}: L_s={row[1]}, L_d={row[2]}, L_a={row[3]}")
        self.losses.append(row)
        self.step += 1
        return row

    def run(self, checkpoint_path=None, stop_after: int | None = None) -> TrainResult:
        """Train to completion (or for ``stop_after`` more steps)."""
        end = self.total_steps if stop_after is None else min(self.total_steps, self.step + stop_after)
        every = self.config.checkpoint_every
        while self.step < end:
            row = self.train_step()
            if self.step % 50 == 0 or self.step == end:
                log.info("step %d/%d  L_s=%.4f  L_d=%.4f  L_a=%.4f", self.step, self.total_steps, *row[1:])
            if checkpoint_path is not None and every and self.step % every == 0:
                self.save(checkpoint_path)
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return TrainResult(self.seg, self.disc, list(self.losses), self.step)


def train_baseline(images, net_spec: NetworkSpec, config: TrainingConfig, checkpoint_path=None) -> TrainResult:
    if config.adversarial:
        config = TrainingConfig.from_dict({**config.to_dict(), "adversarial": False})
    return Trainer(images, net_spec, config).run(checkpoint_path)


def train_adversarial(images, net_spec: NetworkSpec, disc_spec: NetworkSpec | None, config: TrainingConfig,
                      checkpoint_path=None) -> TrainResult:
    if not config.adversarial:
        config = TrainingConfig.from_dict({**config.to_dict(), "adversarial": True})
    return Trainer(images, net_spec, config, disc_spec).run(checkpoint_path)


def resume(images, checkpoint_path, disc_spec: NetworkSpec | None = None, stop_after: int | None = None) -> TrainResult:
    ckpt = load_checkpoint(checkpoint_path)
    config = TrainingConfig.from_dict(ckpt.meta["config"])
    trainer = Trainer(images, ckpt.seg.spec, config, disc_spec or (ckpt.disc.spec if ckpt.disc else None))
    trainer.restore(ckpt)
    return trainer.run(checkpoint_path, stop_after)


def write_loss_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L_s", "L_d", "L_a"])
        for s, ls, ld, la in rows:
            w.writerow([s, repr(ls), "" if math.isnan(ld) else repr(ld), "" if math.isnan(la) else repr(la)])
