"""Architecture specifications and builders for the model zoo."""

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

from .common import DimensionError, InputError, InvariantError
from .tensor import conv_output_size


class LayerKind(Enum):
    CONV = "conv"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    MAXPOOL = "maxpool"
    GAP = "gap"
    LINEAR = "linear"


# layers a channel subset flows through unchanged on its way to the consumer
PASSTHROUGH = (LayerKind.BATCHNORM, LayerKind.RELU, LayerKind.MAXPOOL, LayerKind.GAP)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    prunable: bool = False
    bias: bool = False
    # conv/bn on a residual shortcut branch
    shortcut: bool = False

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        n = self.name
        if self.kind == LayerKind.CONV:
            shapes = {
                f"{n}.weight": (
                    self.out_channels,
                    self.in_channels,
                    self.kernel,
                    self.kernel,
                )
            }
            if self.bias:
                shapes[f"{n}.bias"] = (self.out_channels,)
            return shapes
        if self.kind == LayerKind.BATCHNORM:
            c = (self.out_channels,)
            return {
                f"{n}.gamma": c,
                f"{n}.beta": c,
                f"{n}.running_mean": c,
                f"{n}.running_var": c,
            }
        if self.kind == LayerKind.LINEAR:
            shapes = {f"{n}.weight": (self.out_channels, self.in_channels)}
            if self.bias:
                shapes[f"{n}.bias"] = (self.out_channels,)
            return shapes
        return {}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "pad": self.pad,
            "prunable": self.prunable,
            "bias": self.bias,
            "shortcut": self.shortcut,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**{**d, "kind": LayerKind(d["kind"])})


@dataclass(frozen=True)
class ResidualBlock:
    main: tuple[int, ...]
    shortcut: tuple[int, ...] = ()

    @property
    def kind(self) -> str:
        return "projection" if self.shortcut else "identity"

    @property
    def start(self) -> int:
        return self.main[0]

    @property
    def end(self) -> int:
        return max(self.main + self.shortcut)

    def to_dict(self) -> dict:
        return {"main": list(self.main), "shortcut": list(self.shortcut)}

    @classmethod
    def from_dict(cls, d: dict) -> "ResidualBlock":
        return cls(tuple(d["main"]), tuple(d["shortcut"]))


@dataclass(frozen=True)
class ModelGraph:
    arch: str
    layers: tuple[LayerSpec, ...]
    num_classes: int
    input_shape: tuple[int, int, int]
    blocks: tuple[ResidualBlock, ...] = ()

    def block_at(self, index: int) -> Optional[ResidualBlock]:
        for b in self.blocks:
            if b.start == index:
                return b
        return None

    def conv_indices(self) -> list[int]:
        """Main-path conv layers; filter totals and per-layer reports count these."""
        return [
            i
            for i, l in enumerate(self.layers)
            if l.kind == LayerKind.CONV and not l.shortcut
        ]

    def prunable_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.prunable]

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.tensor_shapes())
        return shapes

    def with_layer(self, index: int, **changes) -> "ModelGraph":
        layers = list(self.layers)
        layers[index] = replace(layers[index], **changes)
        return replace(self, layers=tuple(layers))

    def segments(self):
        """Yields ``int`` layer indices and whole ``ResidualBlock`` objects in
        execution order."""
        i = 0
        while i < len(self.layers):
            block = self.block_at(i)
            if block is not None:
                yield block
                i = block.end + 1
            else:
                yield i
                i += 1

    def feature_shapes(self) -> list[tuple[int, ...]]:
        """Output shape (without batch dim) of every layer."""
        shapes: list[Optional[tuple[int, ...]]] = [None] * len(self.layers)

        def run(index: int, shape: tuple[int, ...]) -> tuple[int, ...]:
            layer = self.layers[index]
            if len(shape) == 3 and layer.kind != LayerKind.LINEAR:
                c, h, w = shape
                if c != layer.in_channels:
                    raise DimensionError(
                        f"{layer.name}: channel mismatch",
                        (layer.in_channels,),
                        (c,),
                    )
                if layer.kind == LayerKind.CONV:
                    out = (
                        layer.out_channels,
                        conv_output_size(h, layer.kernel, layer.stride, layer.pad),
                        conv_output_size(w, layer.kernel, layer.stride, layer.pad),
                    )
                elif layer.kind == LayerKind.MAXPOOL:
                    if h % 2 or w % 2:
                        raise DimensionError(f"{layer.name}: odd spatial size", shape)
                    out = (c, h // 2, w // 2)
                elif layer.kind == LayerKind.GAP:
                    out = (c,)
                else:
                    out = shape
            elif len(shape) == 1 and layer.kind == LayerKind.LINEAR:
                if shape[0] != layer.in_channels:
                    raise DimensionError(
                        f"{layer.name}: feature mismatch", (layer.in_channels,), shape
                    )
                out = (layer.out_channels,)
            else:
                raise DimensionError(
                    f"{layer.name}: {layer.kind.value} cannot take input", shape
                )
            shapes[index] = out
            return out

        shape: tuple[int, ...] = tuple(self.input_shape)
        for seg in self.segments():
            if isinstance(seg, ResidualBlock):
                block_in = shape
                for i in seg.main:
                    shape = run(i, shape)
                short = block_in
                for i in seg.shortcut:
                    short = run(i, short)
                if short != shape:
                    raise DimensionError(
                        f"residual block at layer {seg.start}: branch shapes differ",
                        shape,
                        short,
                    )
            else:
                shape = run(seg, shape)
        return shapes

    def validate(self):
        """Raises ``InvariantError``/``DimensionError`` if the graph is not
        consistent. Reused after every structural rewrite."""
        for layer in self.layers:
            if layer.in_channels < 1 or layer.out_channels < 1:
                raise InvariantError(f"{layer.name}: channel counts must be positive")
            if layer.kind == LayerKind.CONV:
                if layer.kernel < 1 or layer.stride < 1 or layer.pad < 0:
                    raise InvariantError(f"{layer.name}: invalid conv geometry")
            elif layer.prunable:
                raise InvariantError(f"{layer.name}: only conv layers may be prunable")
            if layer.kind in PASSTHROUGH and layer.in_channels != layer.out_channels:
                raise InvariantError(f"{layer.name}: {layer.kind.value} changes channels")

        covered: set[int] = set()
        for b in self.blocks:
            idx = b.main + b.shortcut
            if list(idx) != list(range(b.start, b.end + 1)):
                raise InvariantError(f"residual block at {b.start} is not contiguous")
            if covered & set(idx):
                raise InvariantError(f"residual block at {b.start} overlaps another")
            covered |= set(idx)
            main_convs = [i for i in b.main if self.layers[i].kind == LayerKind.CONV]
            protected = main_convs[1:] + [
                i for i in b.shortcut if self.layers[i].kind == LayerKind.CONV
            ]
            for i in protected:
                if self.layers[i].prunable:
                    raise InvariantError(
                        f"{self.layers[i].name}: only the first conv of a residual "
                        "block may be prunable"
                    )

        shapes = self.feature_shapes()
        if shapes[-1] != (self.num_classes,):
            raise InvariantError(
                f"graph output {shapes[-1]} does not match num_classes={self.num_classes}"
            )

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "blocks": [b.to_dict() for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        return cls(
            arch=d["arch"],
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d["input_shape"]),
            blocks=tuple(ResidualBlock.from_dict(b) for b in d["blocks"]),
        )


# builders

_M = "M"

VGG_CONFIGS = {
    "vgg11": [64, _M, 128, _M, 256, 256, _M, 512, 512, _M, 512, 512, _M],
    "vgg16": [64, 64, _M, 128, 128, _M, 256, 256, 256, _M]
    + [512, 512, 512, _M, 512, 512, 512, _M],
    "vgg19": [64, 64, _M, 128, 128, _M, 256, 256, 256, 256, _M]
    + [512, 512, 512, 512, _M, 512, 512, 512, 512, _M],
    "toy-cnn": [8, _M, 16, _M, 32],
}

RESNET_DEPTHS = {"resnet20": 20, "resnet32": 32, "resnet56": 56, "resnet110": 110}

ARCHITECTURES = tuple(VGG_CONFIGS) + tuple(RESNET_DEPTHS)


class _GraphBuilder:
    def __init__(self):
        self.layers: list[LayerSpec] = []
        self.counts: dict[str, int] = {}

    def _name(self, prefix: str) -> str:
        n = self.counts.get(prefix, 0)
        self.counts[prefix] = n + 1
        return f"{prefix}{n}"

    def add(self, kind: LayerKind, cin: int, cout: int, prefix: str, **kw) -> int:
        self.layers.append(LayerSpec(self._name(prefix), kind, cin, cout, **kw))
        return len(self.layers) - 1

    def conv_bn(self, cin, cout, *, k=3, stride=1, pad=1, prunable, shortcut=False):
        first = self.add(
            LayerKind.CONV,
            cin,
            cout,
            "conv",
            kernel=k,
            stride=stride,
            pad=pad,
            prunable=prunable,
            shortcut=shortcut,
        )
        self.add(LayerKind.BATCHNORM, cout, cout, "bn", shortcut=shortcut)
        return first

    def relu(self, c):
        return self.add(LayerKind.RELU, c, c, "relu")

    def head(self, c, num_classes):
        self.add(LayerKind.GAP, c, c, "gap")
        self.add(LayerKind.LINEAR, c, num_classes, "fc", bias=True)


def _build_vgg(arch, num_classes, input_shape) -> ModelGraph:
    cfg = VGG_CONFIGS[arch]
    pools = cfg.count(_M)
    _, h, w = input_shape
    if h % (2**pools) or w % (2**pools):
        raise InputError(
            f"{arch}: input spatial dims {h}x{w} must be divisible by {2**pools}"
        )
    b = _GraphBuilder()
    c = input_shape[0]
    for v in cfg:
        if v == _M:
            b.add(LayerKind.MAXPOOL, c, c, "pool")
        else:
            b.conv_bn(c, v, prunable=True)
            b.relu(v)
            c = v
    b.head(c, num_classes)
    return ModelGraph(arch, tuple(b.layers), num_classes, tuple(input_shape))


def _build_resnet(arch, num_classes, input_shape) -> ModelGraph:
    depth = RESNET_DEPTHS[arch]
    per_stage = (depth - 2) // 6
    b = _GraphBuilder()
    # the stem conv feeds every residual add of the first stage
    b.conv_bn(input_shape[0], 16, prunable=False)
    b.relu(16)
    blocks = []
    c = 16
    for stage, width in enumerate((16, 32, 64)):
        for n in range(per_stage):
            stride = 2 if stage > 0 and n == 0 else 1
            start = b.conv_bn(c, width, stride=stride, prunable=True)
            b.relu(width)
            b.conv_bn(width, width, prunable=False)
            main = tuple(range(start, len(b.layers)))
            shortcut = ()
            if stride != 1 or c != width:
                s0 = b.conv_bn(
                    c, width, k=1, stride=stride, pad=0, prunable=False, shortcut=True
                )
                shortcut = tuple(range(s0, len(b.layers)))
            blocks.append(ResidualBlock(main, shortcut))
            c = width
    b.head(c, num_classes)
    return ModelGraph(
        arch, tuple(b.layers), num_classes, tuple(input_shape), tuple(blocks)
    )


def build(
    arch: str, num_classes: int = 10, input_shape: tuple[int, int, int] = (3, 32, 32)
) -> ModelGraph:
    if num_classes < 1:
        raise InputError(f"num_classes must be positive: {num_classes}")
    if arch in VGG_CONFIGS:
        graph = _build_vgg(arch, num_classes, input_shape)
    elif arch in RESNET_DEPTHS:
        graph = _build_resnet(arch, num_classes, input_shape)
    else:
        raise InputError(
            f"Unknown arch: '{arch}' (supported: {', '.join(ARCHITECTURES)})"
        )
    graph.validate()
    return graph
