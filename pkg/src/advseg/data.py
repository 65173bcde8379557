"""Labelled 2-D images, synthetic phantoms, PGM/PPM IO and dataset folders."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

# background, WM, cGM, BGT, CB, BS, lvCSF, pCSF
PALETTE = np.array(
    [
        (0, 0, 0),
        (0, 0, 255),
        (255, 255, 0),
        (0, 160, 0),
        (139, 69, 19),
        (128, 0, 128),
        (255, 140, 0),
        (255, 0, 0),
    ],
    dtype=np.uint8,
)

MIN_SIZE = 62  # twice the smallest network receptive field (31)


class PhantomError(RuntimeError):
    pass


@dataclass
class LabeledImage:
    image: np.ndarray  # (h, w) float32
    labels: np.ndarray  # (h, w) int
    id: str = ""

    def __post_init__(self):
        if self.image.shape != self.labels.shape or self.image.ndim != 2:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} must be equal 2-D shapes")


@dataclass
class PhantomSpec:
    """Nested perturbed ellipses, one shell per foreground class.

    ``radii`` are fractions of the outer ellipse for classes 1..C-1 (descending);
    empty means evenly spaced from 1.0 to 0.25.
    """

    C: int = 7
    size: tuple[int, int] = (128, 128)
    class_means: tuple[float, ...] = ()
    class_stds: tuple[float, ...] = ()
    noise_std: float = 0.35
    radii: tuple[float, ...] = ()
    outer_axes: tuple[float, float] = (0.47, 0.39)  # semi-axes as fractions of (h, w)
    eccentricity_jitter: float = 0.04
    perturbation: float = 0.05
    center_jitter: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(self.size)
        if self.C < 2:
            raise ValueError("phantoms need at least two classes")
        if not self.class_means:
            # interleaved so neighbouring shells never have adjacent means
            order = np.r_[np.arange(0, self.C, 2), np.arange(1, self.C, 2)]
            means = np.empty(self.C)
            means[order] = np.linspace(0.0, 1.0 * (self.C - 1), self.C)
            self.class_means = tuple(float(m) for m in means)
        if not self.class_stds:
            self.class_stds = (0.15,) * self.C
        if not self.radii:
            self.radii = tuple(float(r) for r in np.linspace(1.0, 0.25, self.C - 1))
        self.class_means = tuple(self.class_means)
        self.class_stds = tuple(self.class_stds)
        self.radii = tuple(self.radii)
        if len(self.class_means) != self.C or len(self.class_stds) != self.C or len(self.radii) != self.C - 1:
            raise ValueError("class_means/class_stds need C entries and radii C-1 entries")
        if len(set(self.class_means)) != self.C:
            raise ValueError("class means must be distinct")
        if min(self.size) < MIN_SIZE:
            raise ValueError(f"phantom size {self.size} below minimum {MIN_SIZE}")
        if any(a <= b for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError("radii must be strictly decreasing")

    def target_fractions(self) -> np.ndarray:
        """Expected per-class pixel fractions of the unperturbed geometry."""
        h, w = self.size
        outer = np.pi * self.outer_axes[0] * h * self.outer_axes[1] * w / (h * w)
        areas = outer * np.square(np.r_[self.radii, 0.0])
        frac = np.empty(self.C)
        frac[0] = 1.0 - areas[0]
        frac[1:] = areas[:-1] - areas[1:]
        return frac

    def to_dict(self) -> dict:
        return asdict(self)


def _label_geometry(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2 + rng.uniform(-1, 1) * spec.center_jitter * h
    cx = w / 2 + rng.uniform(-1, 1) * spec.center_jitter * w
    labels = np.zeros((h, w), dtype=np.int64)
    for cls, r in enumerate(spec.radii, start=1):
        ay = spec.outer_axes[0] * h * r * (1 + rng.uniform(-1, 1) * spec.eccentricity_jitter)
        ax = spec.outer_axes[1] * w * r * (1 + rng.uniform(-1, 1) * spec.eccentricity_jitter)
        # shells shift a little relative to each other
        oy = cy + rng.uniform(-1, 1) * spec.center_jitter * h * r
        ox = cx + rng.uniform(-1, 1) * spec.center_jitter * w * r
        theta = np.arctan2((yy - oy) / ay, (xx - ox) / ax)
        rho = np.hypot((yy - oy) / ay, (xx - ox) / ax)
        bump = np.zeros_like(theta)
        for k in range(2, 6):
            bump += rng.uniform(-1, 1) * spec.perturbation / (k - 1) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
        labels[rho <= 1 + bump] = cls
    return labels


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator | None = None, id: str = "") -> LabeledImage:
    """Draw one phantom.  Deterministic given ``spec.seed`` (or ``rng``).

    Retries the geometry with a fresh stream when a class covers < 1% of the
    image; gives up after 10 attempts.
    """
    h, w = spec.size
    for attempt in range(10):
        gen = rng if rng is not None and attempt == 0 else np.random.default_rng([spec.seed, attempt])
        labels = _label_geometry(spec, gen)
        counts = np.bincount(labels.ravel(), minlength=spec.C)
        if counts.min() >= 0.01 * h * w:
            break
    else:
        raise PhantomError(f"degenerate phantom geometry after 10 attempts (seed {spec.seed})")
    means = np.asarray(spec.class_means)[labels]
    stds = np.asarray(spec.class_stds)[labels]
    image = means + stds * gen.standard_normal((h, w)) + spec.noise_std * gen.standard_normal((h, w))
    return LabeledImage(image.astype(np.float32), labels, id)


def normalize(image: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Zero mean, unit variance; a constant image maps to all zeros."""
    img = np.asarray(image, dtype=np.float64)
    centred = img - img.mean()
    std = centred.std()
    if std < eps:
        return np.zeros_like(img, dtype=np.float32)
    return (centred / std).astype(np.float32)


def reflect_pad(image: np.ndarray, margin: int) -> np.ndarray:
    """Mirror padding that does not repeat the edge pixel."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if margin >= min(image.shape[-2:]):
        raise ValueError(f"margin {margin} must be smaller than the image sides {image.shape[-2:]}")
    pad = [(0, 0)] * (image.ndim - 2) + [(margin, margin), (margin, margin)]
    return np.pad(image, pad, mode="reflect")


# ---------------------------------------------------------------------------
# PGM / PPM


def _read_token(buf: bytes, pos: int):
    while True:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("malformed PNM header: unexpected end of file")
    return buf[start:pos], pos


def _read_pnm(path, magic: bytes):
    buf = Path(path).read_bytes()
    tok, pos = _read_token(buf, 0)
    if tok != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, found {tok[:2]!r}")
    try:
        fields = []
        for _ in range(3):
            tok, pos = _read_token(buf, pos)
            fields.append(int(tok))
    except ValueError as err:
        raise ValueError(f"{path}: malformed header ({err})") from None
    w, h, maxval = fields
    if maxval not in (255, 65535):
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace before the raster
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype(np.uint8)
    chans = 3 if magic == b"P6" else 1
    need = w * h * chans * dtype.itemsize
    if len(buf) - pos < need:
        raise ValueError(f"{path}: raster truncated")
    data = np.frombuffer(buf, dtype=dtype, count=w * h * chans, offset=pos)
    shape = (h, w, 3) if chans == 3 else (h, w)
    return data.reshape(shape).astype(np.uint16 if maxval == 65535 else np.uint8), maxval


def import_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM with maxval 255 or 65535."""
    return _read_pnm(path, b"P5")[0]


def import_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6")[0]


def quantize16(image: np.ndarray) -> np.ndarray:
    """Linearly map a real image onto 0..65535."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros(img.shape, np.uint16)
    return np.round((img - lo) / (hi - lo) * 65535).astype(np.uint16)


def export_pgm(image: np.ndarray, path, maxval: int | None = None) -> None:
    """Write a P5 PGM.  Integer arrays are stored as-is (8-bit if they fit,
    else 16-bit); real arrays are quantized to 16 bits first."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError("PGM export needs a 2-D array")
    if not np.issubdtype(arr.dtype, np.integer):
        arr = quantize16(arr)
        maxval = 65535
    if arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise ValueError("PGM values must lie in 0..65535")
    if maxval is None:
        maxval = 255 if arr.dtype.itemsize == 1 else 65535
    if maxval not in (255, 65535):
        raise ValueError(f"unsupported maxval {maxval}")
    raster = arr.astype(np.uint8 if maxval == 255 else ">u2").tobytes()
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + raster)


def colorize(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= len(PALETTE)):
        raise ValueError(f"labels must lie in 0..{len(PALETTE) - 1} for the colour palette")
    return PALETTE[labels]


def export_label_ppm(labels: np.ndarray, path) -> None:
    rgb = colorize(labels)
    h, w = rgb.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    class_count: int
    train: list[LabeledImage] = field(default_factory=list)
    test: list[LabeledImage] = field(default_factory=list)

    def split(self, name: str) -> list[LabeledImage]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass
class DatasetConfig:
    """What ``synth`` writes: phantom geometry plus split sizes."""

    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_train: int = 15
    n_test: int = 10
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        ph = dict(d.pop("phantom", {}))
        unknown = set(d) - {"n_train", "n_test", "seed"}
        if unknown:
            raise ValueError(f"unknown dataset config keys {sorted(unknown)}")
        return cls(phantom=PhantomSpec(**ph), **d)


def make_dataset(cfg: DatasetConfig) -> Dataset:
    """Phantoms with disjoint ids; phantom ``i`` is seeded by ``(seed, i)``."""
    base = cfg.phantom
    images = []
    for i in range(cfg.n_train + cfg.n_test):
        seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
        spec = PhantomSpec(**{**asdict(base), "seed": seed})
        ph = generate_phantom(spec, id=f"ph{i:03d}")
        images.append(LabeledImage(normalize(ph.image), ph.labels, ph.id))
    return Dataset(base.C, images[: cfg.n_train], images[cfg.n_train :])


def save_dataset(ds: Dataset, root, meta: dict | None = None) -> None:
    root = Path(root)
    splits = {}
    for split in ("train", "test"):
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        splits[split] = []
        for item in ds.split(split):
            export_pgm(quantize16(item.image), d / f"{item.id}_img.pgm", maxval=65535)
            export_pgm(item.labels.astype(np.uint8), d / f"{item.id}_lbl.pgm", maxval=255)
            splits[split].append(item.id)
    manifest = {"class_count": ds.class_count, "splits": splits, **(meta or {})}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    C = int(manifest["class_count"])
    ds = Dataset(C)
    for split, ids in manifest["splits"].items():
        for id_ in ids:
            img = import_pgm(root / split / f"{id_}_img.pgm").astype(np.float64)
            lbl = import_pgm(root / split / f"{id_}_lbl.pgm").astype(np.int64)
            if lbl.max() >= C:
                raise ValueError(f"{id_}: label {lbl.max()} >= class count {C}")
            ds.split(split).append(LabeledImage(normalize(img), lbl, id_))
    return ds
