"""Declarative network specs, their static analyses, and runtime networks.

The two segmentation networks are plain stacks of valid convolutions, so
their receptive field is ``1 + sum((k - 1) * d)`` and a patch of side ``n``
maps to an output of side ``n - rf + 1``.  The discriminator has an image
branch whose output is concatenated with the segmentation before the trunk.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensor as T

DILATED_SCHEDULE = (1, 1, 2, 4, 8, 16, 1)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | dense
    kernel: int = 3
    dilation: int = 1
    out_channels: int = 0
    repeat: int = 1
    has_batchnorm: bool = True
    has_dropout: bool = False
    relu: bool = True
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "pool", "dense"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.repeat < 1 or self.kernel < 1 or self.dilation < 1 or self.stride < 1:
            raise ValueError(f"invalid layer spec {self}")
        if self.kernel == 1 and self.dilation != 1:
            raise ValueError("1x1 kernels must use dilation 1")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    in_channels: int
    class_count: int
    layers: tuple[LayerSpec, ...]
    image_branch: tuple[LayerSpec, ...] = ()
    patch: int = 0  # image patch side for two-branch (discriminator) specs
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")

    @property
    def is_discriminator(self) -> bool:
        return bool(self.image_branch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**l) for l in d["layers"])
        d["image_branch"] = tuple(LayerSpec(**l) for l in d.get("image_branch", ()))
        return cls(**d)


def expand(layers) -> list[LayerSpec]:
    """One entry per physical layer (``repeat`` unrolled)."""
    return [l for l in layers for _ in range(l.repeat)]


# ---------------------------------------------------------------------------
# builders


def build_fcn(C: int, width: int = 32, hidden: int = 256, depth: int = 15) -> NetworkSpec:
    return NetworkSpec(
        name="fcn",
        in_channels=1,
        class_count=C,
        layers=(
            LayerSpec("conv", 3, 1, width, depth),
            LayerSpec("conv", 1, 1, hidden, 1, has_dropout=True),
            LayerSpec("conv", 1, 1, C, 1, has_batchnorm=False, has_dropout=True, relu=False),
        ),
    )


def build_dilated(C: int, width: int = 32) -> NetworkSpec:
    rows = [LayerSpec("conv", 3, 1, width, 2)]
    rows += [LayerSpec("conv", 3, d, width, 1) for d in DILATED_SCHEDULE[2:]]
    rows.append(LayerSpec("conv", 1, 1, C, 1, has_batchnorm=False, has_dropout=True, relu=False))
    return NetworkSpec(name="dilated", in_channels=1, class_count=C, layers=tuple(rows))


def build_discriminator(C: int, width: int = 32, dense: int = 256, patch: int = 25) -> NetworkSpec:
    # max-pool stride 3 takes the 15x15 trunk map to 5x5, two convs then reach 1x1
    return NetworkSpec(
        name="discriminator",
        in_channels=1,
        class_count=C,
        image_branch=(LayerSpec("conv", 3, 1, width, 2),),
        layers=(
            LayerSpec("conv", 3, 1, width, 3),
            LayerSpec("pool", 3, has_batchnorm=False, relu=False, stride=3),
            LayerSpec("conv", 3, 1, width, 2),
            LayerSpec("dense", out_channels=dense, has_batchnorm=False),
            LayerSpec("dense", out_channels=2, has_batchnorm=False, relu=False),
        ),
        patch=patch,
    )


def build(name: str, C: int, **kw) -> NetworkSpec:
    builders = {"fcn": build_fcn, "dilated": build_dilated, "discriminator": build_discriminator}
    if name not in builders:
        raise ValueError(f"unknown network {name!r}; choose from {sorted(builders)}")
    return builders[name](C, **kw)


# ---------------------------------------------------------------------------
# static analyses


def _layer_out(l: LayerSpec, size: int) -> int:
    if l.kind == "dense":
        return 1
    out = (size - 1 - (l.kernel - 1) * l.dilation) // l.stride + 1
    if size < 1 + (l.kernel - 1) * l.dilation:
        raise ValueError(f"input {size} smaller than layer extent {1 + (l.kernel - 1) * l.dilation}")
    return out


def trace(layers, size: int) -> list[int]:
    """Spatial side after each physical layer, starting with ``size``."""
    sizes = [size]
    for l in expand(layers):
        sizes.append(_layer_out(l, sizes[-1]))
    return sizes


def receptive_field(spec: NetworkSpec) -> int:
    """Receptive field of the (segmentation) conv stack."""
    rf, jump = 1, 1
    for l in expand(spec.layers):
        if l.kind == "dense":
            raise ValueError("receptive field undefined past a dense layer")
        rf += (l.kernel - 1) * l.dilation * jump
        jump *= l.stride
    return rf


def output_size(spec: NetworkSpec, input_size: int) -> int:
    rf = receptive_field(spec)
    if input_size < rf:
        raise ValueError(f"input size {input_size} smaller than receptive field {rf}")
    return trace(spec.layers, input_size)[-1]


def discriminator_trace(spec: NetworkSpec) -> tuple[list[int], list[int]]:
    """(image-branch sizes, trunk sizes) for the spec's patch side."""
    img = trace(spec.image_branch, spec.patch)
    trunk = trace(spec.layers, img[-1])
    return img, trunk


def _layer_shapes(spec: NetworkSpec):
    """Yield (branch, index, LayerSpec, in_channels, in_size) per physical layer."""
    if spec.is_discriminator:
        img_sizes, trunk_sizes = discriminator_trace(spec)
        c = spec.in_channels
        for i, l in enumerate(expand(spec.image_branch)):
            yield "img", i, l, c, img_sizes[i]
            c = l.out_channels
        c = spec.class_count + c
        sizes = trunk_sizes
    else:
        c = spec.in_channels
        sizes = None
    for i, l in enumerate(expand(spec.layers)):
        yield "main", i, l, c, None if sizes is None else sizes[i]
        if l.kind != "pool":
            c = l.out_channels


def _weight_shape(l: LayerSpec, cin: int, size):
    if l.kind == "conv":
        return (l.out_channels, cin, l.kernel, l.kernel)
    if l.kind == "dense":
        return (l.out_channels, cin * size * size)
    return None


def param_count(spec: NetworkSpec) -> int:
    """Convolution and dense weights plus biases (batch-norm excluded)."""
    total = 0
    for _, _, l, cin, size in _layer_shapes(spec):
        shape = _weight_shape(l, cin, size)
        if shape is not None:
            total += int(np.prod(shape)) + l.out_channels
    return total


def batchnorm_param_count(spec: NetworkSpec) -> int:
    return sum(2 * l.out_channels for _, _, l, _, _ in _layer_shapes(spec) if l.has_batchnorm and l.kind != "pool")


def summary(spec: NetworkSpec) -> dict:
    info = {
        "name": spec.name,
        "class_count": spec.class_count,
        "trainable_conv_params": param_count(spec),
        "batchnorm_params": batchnorm_param_count(spec),
    }
    if spec.is_discriminator:
        img, trunk = discriminator_trace(spec)
        info["image_branch_trace"] = img
        info["trunk_trace"] = trunk
    else:
        rf = receptive_field(spec)
        info["receptive_field"] = rf
        info["train_input"] = rf + 20
        info["train_output"] = output_size(spec, rf + 20)
    return info


# ---------------------------------------------------------------------------
# runtime


@dataclass
class _Layer:
    spec: LayerSpec
    index: int
    w: ad.Param | None = None
    b: ad.Param | None = None
    gamma: ad.Param | None = None
    beta: ad.Param | None = None
    bn: T.BatchNormState | None = None


class Network:
    """Instantiated parameters for a :class:`NetworkSpec`.

    ``group`` is ``"s"`` for segmentation networks and ``"d"`` for the
    discriminator.  Dropout masks are drawn from a generator seeded by
    ``(seed, layer index, *key)`` so a forward pass is reproducible from
    its key alone.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0, group: str | None = None, dtype=T.DTYPE):
        self.spec = spec
        self.seed = seed
        self.group = group or ("d" if spec.is_discriminator else "s")
        self.prefix = "disc" if spec.is_discriminator else "seg"
        self.params = ad.ParamStore()
        self.branch: list[_Layer] = []
        self.layers: list[_Layer] = []
        rng = np.random.default_rng(seed)
        for n, (where, i, l, cin, size) in enumerate(_layer_shapes(spec)):
            layer = _Layer(l, n)
            name = f"{self.prefix}.{where}{i}"
            shape = _weight_shape(l, cin, size)
            if shape is not None:
                fan_in = int(np.prod(shape[1:]))
                w = (rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)).astype(dtype)
                layer.w = self.params.add(f"{name}.w", self.group, w)
                layer.b = self.params.add(f"{name}.b", self.group, np.zeros(l.out_channels, dtype))
            if l.has_batchnorm and l.kind != "pool":
                layer.bn = T.BatchNormState.create(l.out_channels, dtype)
                layer.gamma = self.params.add(f"{name}.gamma", self.group, layer.bn.gamma)
                layer.beta = self.params.add(f"{name}.beta", self.group, layer.bn.beta)
            (self.branch if where == "img" else self.layers).append(layer)

    # -- forward ----------------------------------------------------------

    def _run(self, layers, x: ad.Var, tape, mode, key, update_stats) -> ad.Var:
        for layer in layers:
            l = layer.spec
            if l.has_dropout:
                rng = np.random.default_rng([self.seed, layer.index, *key]) if mode == "train" else None
                x = ad.dropout(tape, x, self.spec.dropout_rate, mode, rng)
            if l.kind == "pool":
                x = ad.maxpool3(tape, x, l.stride)
                continue
            w = tape.param(layer.w) if tape is not None else ad.Var(layer.w.value)
            b = tape.param(layer.b) if tape is not None else ad.Var(layer.b.value)
            if l.kind == "conv":
                x = ad.conv2d(tape, x, w, b, l.dilation)
            else:
                x = ad.dense(tape, x, w, b)
            if layer.bn is not None:
                g = tape.param(layer.gamma) if tape is not None else ad.Var(layer.gamma.value)
                be = tape.param(layer.beta) if tape is not None else ad.Var(layer.beta.value)
                x = ad.batchnorm(tape, x, g, be, layer.bn, mode, update_stats)
            if l.relu:
                x = ad.relu(tape, x)
        return x

    def forward(self, x, tape: ad.Tape | None = None, mode: str = "infer", key=(0,), update_stats: bool = True,
                image=None) -> ad.Var:
        """Run the network.  ``x`` is the input tensor (or a :class:`Var`);
        discriminators additionally take the image patch as ``image``.

        Returns the logits as a :class:`Var` of shape (n, out, h', w').
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        x = x if isinstance(x, ad.Var) else ad.Var(np.asarray(x))
        _check_input(x.value, self.spec.class_count if self.spec.is_discriminator else self.spec.in_channels)
        if self.spec.is_discriminator:
            if image is None:
                raise ValueError("discriminator needs an image patch")
            image = image if isinstance(image, ad.Var) else ad.Var(np.asarray(image))
            _check_input(image.value, self.spec.in_channels)
            feats = self._run(self.branch, image, tape, mode, key, update_stats)
            x = ad.concat_channels(tape, x, feats)
        return self._run(self.layers, x, tape, mode, key, update_stats)

    __call__ = forward

    # -- buffers ----------------------------------------------------------

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state (batch-norm running statistics)."""
        out = {}
        for layer in self.branch + self.layers:
            if layer.bn is not None:
                base = layer.gamma.name.rsplit(".", 1)[0]
                out[f"{base}.running_mean"] = layer.bn.running_mean
                out[f"{base}.running_var"] = layer.bn.running_var
        return out


def _check_input(x: np.ndarray, channels: int) -> None:
    if x.ndim != 4:
        raise T.ShapeError(f"network input must be rank 4, got {x.shape}")
    if x.shape[1] != channels:
        raise T.ShapeError(f"network expects {channels} input channels, got {x.shape[1]}")
