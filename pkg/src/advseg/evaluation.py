"""Whole-image inference and the evaluation battery: Dice, connected
components, paired t-tests and the JSON metrics report."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, special

from .checkpoint import Checkpoint
from .data import LabeledImage
from .nets import Network, receptive_field


class ZeroVarianceError(ValueError):
    """Paired differences have zero variance; the t statistic is undefined."""


def _seg_network(model) -> Network:
    net = model.seg if isinstance(model, Checkpoint) else model
    if not isinstance(net, Network) or net.spec.is_discriminator:
        raise ValueError("segment_image needs a segmentation network or a checkpoint holding one")
    if net.spec.in_channels != 1:
        raise ValueError(f"network expects {net.spec.in_channels} input channels; images are single-channel")
    return net


def predict_proba(model, image: np.ndarray) -> np.ndarray:
    """(C, h, w) softmax map for a 2-D image, reflect-padded by the RF radius."""
    net = _seg_network(model)
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ValueError(f"expected a non-empty 2-D image, got shape {image.shape}")
    r = receptive_field(net.spec) // 2
    # np.pad reflects repeatedly when the margin exceeds the image
    padded = np.pad(image, r, mode="reflect") if min(image.shape) > 1 else np.pad(image, r, mode="edge")
    logits = net.forward(padded[None, None], mode="infer").value
    e = np.exp(logits[0] - logits[0].max(axis=0))
    return e / e.sum(axis=0)


def segment_image(model, image: np.ndarray) -> np.ndarray:
    """Per-pixel argmax label map, same shape as ``image``.

    Ties go to the lower class index.
    """
    net = _seg_network(model)
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ValueError(f"expected a non-empty 2-D image, got shape {image.shape}")
    r = receptive_field(net.spec) // 2
    padded = np.pad(image, r, mode="reflect") if min(image.shape) > 1 else np.pad(image, r, mode="edge")
    logits = net.forward(padded[None, None], mode="infer").value[0]
    return logits.argmax(axis=0)


def dice(pred: np.ndarray, truth: np.ndarray, c: int) -> float:
    """2|P∩T| / (|P| + |T|) for class ``c``; 1.0 when both are empty."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    p, t = pred == c, truth == c
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


_STRUCT = {4: ndimage.generate_binary_structure(2, 1), 8: ndimage.generate_binary_structure(2, 2)}


def count_components(labels: np.ndarray, connectivity: int = 4) -> int:
    """Number of maximal connected same-label regions, background included."""
    if connectivity not in _STRUCT:
        raise ValueError("connectivity must be 4 or 8")
    labels = np.asarray(labels)
    total = 0
    for v in np.unique(labels):
        total += ndimage.label(labels == v, structure=_STRUCT[connectivity])[1]
    return int(total)


@dataclass(frozen=True)
class TTest:
    t: float
    dof: int
    p: float

    @property
    def marker(self) -> str:
        """``"**"`` for p < 0.01, ``"*"`` for p < 0.05."""
        return "**" if self.p < 0.01 else "*" if self.p < 0.05 else ""


def t_sf2(t: float, dof: int) -> float:
    """Two-sided tail probability P(|T| >= |t|) of Student's t."""
    x = dof / (dof + t * t)
    return float(special.betainc(dof / 2.0, 0.5, x))


def paired_t_test(a, b) -> TTest:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        raise ZeroVarianceError("differences have zero variance")
    t = d.mean() / (sd / math.sqrt(n))
    return TTest(float(t), n - 1, t_sf2(t, n - 1))


# ---------------------------------------------------------------------------
# report


@dataclass
class ModelScores:
    dice: dict[str, list[float]]  # class -> per-image Dice
    class_mean_dice: list[float]  # per image, averaged over foreground classes
    dice_mean: float
    dice_std: float
    components: list[int]
    components_mean: float
    components_std: float


@dataclass
class MetricsReport:
    class_count: int
    classes: list[int]
    image_ids: list[str]
    models: dict[str, ModelScores]
    t_tests: dict[str, dict] = field(default_factory=dict)
    connectivity: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["models"] = {k: ModelScores(**v) for k, v in d["models"].items()}
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def _std(x) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def score_model(model, images: list[LabeledImage], C: int, connectivity: int = 4, predictions=None) -> ModelScores:
    classes = list(range(1, C))
    preds = predictions if predictions is not None else [segment_image(model, im.image) for im in images]
    per_class = {str(c): [dice(p, im.labels, c) for p, im in zip(preds, images)] for c in classes}
    class_mean = [float(np.mean([per_class[str(c)][i] for c in classes])) for i in range(len(images))]
    comps = [count_components(p, connectivity) for p in preds]
    return ModelScores(per_class, class_mean, float(np.mean(class_mean)), _std(class_mean), comps,
                       float(np.mean(comps)), _std(comps))


def _ttest_entry(a, b) -> dict:
    try:
        r = paired_t_test(a, b)
    except ZeroVarianceError as err:
        return {"error": str(err)}
    return {"t": r.t, "dof": r.dof, "p": r.p, "marker": r.marker}


def build_report(model_a, model_b, images: list[LabeledImage], names=("a", "b"), connectivity: int = 4) -> MetricsReport:
    """Score two models on the same images.  t-tests compare ``b`` against
    ``a`` (positive t means ``b`` scored higher)."""
    if not images:
        raise ValueError("empty test set")
    ca, cb = _seg_network(model_a).spec.class_count, _seg_network(model_b).spec.class_count
    if ca != cb:
        raise ValueError(f"models disagree on class count ({ca} vs {cb})")
    sa = score_model(model_a, images, ca, connectivity)
    sb = score_model(model_b, images, ca, connectivity)
    tests = {c: _ttest_entry(sb.dice[c], sa.dice[c]) for c in sa.dice}
    tests["mean"] = _ttest_entry(sb.class_mean_dice, sa.class_mean_dice)
    tests["components"] = _ttest_entry(sb.components, sa.components)
    return MetricsReport(ca, list(range(1, ca)), [im.id for im in images], {names[0]: sa, names[1]: sb}, tests,
                         connectivity)
