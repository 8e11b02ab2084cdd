import json
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import defaults
from .common import CheckpointFormatError, DimensionError, InvariantError
from .graph import LayerKind, ModelGraph
from .layers import Network

logger = logging.getLogger(__name__)

_HEADER_LEN = struct.Struct("<Q")


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _header_crc(header: dict) -> int:
    """crc32 of the canonical header without its own checksum field."""
    return zlib.crc32(_header_bytes({k: v for k, v in header.items() if k != "header_crc32"}))


@dataclass(frozen=True)
class CheckpointMeta:
    baseline_accuracy: Optional[float] = None
    seed: int = 0
    epoch: int = 0
    dataset_id: str = ""
    snapshot_epochs: tuple[int, ...] = ()
    # accuracy of this checkpoint on the eval split, when known
    accuracy: Optional[float] = None
    # per-channel input normalization the model was trained with
    norm_mean: tuple[float, ...] = ()
    norm_std: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "baseline_accuracy": self.baseline_accuracy,
            "seed": self.seed,
            "epoch": self.epoch,
            "dataset_id": self.dataset_id,
            "snapshot_epochs": list(self.snapshot_epochs),
            "accuracy": self.accuracy,
            "norm_mean": list(self.norm_mean),
            "norm_std": list(self.norm_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CheckpointMeta":
        return cls(
            baseline_accuracy=d.get("baseline_accuracy"),
            seed=int(d.get("seed", 0)),
            epoch=int(d.get("epoch", 0)),
            dataset_id=d.get("dataset_id", ""),
            snapshot_epochs=tuple(d.get("snapshot_epochs", ())),
            accuracy=d.get("accuracy"),
            norm_mean=tuple(d.get("norm_mean", ())),
            norm_std=tuple(d.get("norm_std", ())),
        )


@dataclass(frozen=True)
class Checkpoint:
    """Graph, named float32 tensors and training metadata.

    Tensors are read-only; build a new checkpoint with ``with_tensors``.
    """

    graph: ModelGraph
    tensors: Mapping[str, np.ndarray]
    meta: CheckpointMeta = field(default_factory=CheckpointMeta)

    def __post_init__(self):
        frozen = {}
        for name, t in self.tensors.items():
            arr = np.ascontiguousarray(t, dtype=np.float32)
            if arr is t and t.flags.writeable:
                arr = arr.copy()
            # read-only arrays are shared between checkpoints without copying
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def validate(self):
        self.graph.validate()
        expected = self.graph.tensor_shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise InvariantError(
                f"checkpoint tensors do not match graph (missing={missing}, extra={extra})"
            )
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DimensionError(
                    f"tensor {name} does not match graph", self.tensors[name].shape, shape
                )

    def with_tensors(self, updates: Mapping[str, np.ndarray], graph=None) -> "Checkpoint":
        tensors = dict(self.tensors)
        tensors.update(updates)
        return Checkpoint(graph or self.graph, tensors, self.meta)

    def with_meta(self, **changes) -> "Checkpoint":
        return replace(self, meta=replace(self.meta, **changes))


def he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


def layer_init(layer, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh tensors for one layer: He-normal weights, zero biases,
    BN gamma=1, beta=0 and reset running stats."""
    out = {}
    for name, shape in layer.tensor_shapes().items():
        suffix = name.rsplit(".", 1)[1]
        if suffix == "weight":
            out[name] = he_normal(rng, shape)
        elif suffix in ("gamma", "running_var"):
            out[name] = np.ones(shape, dtype=np.float32)
        else:
            out[name] = np.zeros(shape, dtype=np.float32)
    return out


def init_params(graph: ModelGraph, seed: int = 0) -> Checkpoint:
    graph.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer in graph.layers:
        tensors.update(layer_init(layer, rng))
    return Checkpoint(graph, tensors, CheckpointMeta(seed=seed))


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    directory = []
    offset = 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name]
        directory.append({"name": name, "shape": list(t.shape), "byte_offset": offset})
        offset += 4 * t.size
    payload = b"".join(
        ckpt.tensors[entry["name"]].astype("<f4").tobytes(order="C") for entry in directory
    )
    header = {
        "format_version": defaults.checkpoint_format_version,
        "graph": ckpt.graph.to_dict(),
        "meta": ckpt.meta.to_dict(),
        "tensors": directory,
        "payload_crc32": zlib.crc32(payload),
    }
    header["header_crc32"] = _header_crc(header)
    header_bytes = _header_bytes(header)
    try:
        with open(path, "wb") as f:
            f.write(defaults.checkpoint_magic)
            f.write(_HEADER_LEN.pack(len(header_bytes)))
            f.write(header_bytes)
            f.write(payload)
    except OSError as e:
        raise CheckpointFormatError(f"Cannot write checkpoint '{path}': {e}") from e
    logger.debug("saved checkpoint %s (%d tensors, %d bytes)", path, len(directory), offset)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"Cannot read checkpoint '{path}': {e}") from e

    magic = defaults.checkpoint_magic
    prefix = len(magic) + _HEADER_LEN.size
    if len(raw) < prefix or raw[: len(magic)] != magic:
        raise CheckpointFormatError(
            f"'{path}': not a {magic.decode()} checkpoint (bad magic/version bytes)"
        )
    (header_len,) = _HEADER_LEN.unpack_from(raw, len(magic))
    if prefix + header_len > len(raw):
        raise CheckpointFormatError(f"'{path}': truncated header")
    try:
        header = json.loads(raw[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"'{path}': corrupt header: {e}") from e
    if not isinstance(header, dict):
        raise CheckpointFormatError(f"'{path}': corrupt header: not a JSON object")
    version = header.get("format_version")
    if version != defaults.checkpoint_format_version:
        raise CheckpointFormatError(f"'{path}': unsupported format version {version}")
    if header.get("header_crc32") != _header_crc(header):
        raise CheckpointFormatError(f"'{path}': header checksum mismatch")

    payload = raw[prefix + header_len :]
    expected_size = sum(4 * int(np.prod(e["shape"])) for e in header["tensors"])
    if len(payload) != expected_size:
        raise CheckpointFormatError(
            f"'{path}': payload is {len(payload)} bytes, directory expects {expected_size}"
        )
    if header.get("payload_crc32") != zlib.crc32(payload):
        raise CheckpointFormatError(f"'{path}': payload checksum mismatch")
    tensors = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape))
        start = e["byte_offset"]
        if start < 0 or start + 4 * count > len(payload):
            raise CheckpointFormatError(f"'{path}': tensor {e['name']} out of bounds")
        tensors[e["name"]] = (
            np.frombuffer(payload, dtype="<f4", count=count, offset=start)
            .reshape(shape)
            .astype(np.float32)
        )
    try:
        ckpt = Checkpoint(
            ModelGraph.from_dict(header["graph"]),
            tensors,
            CheckpointMeta.from_dict(header["meta"]),
        )
        ckpt.validate()
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"'{path}': invalid header contents: {e}") from e
    except (InvariantError, DimensionError) as e:
        raise CheckpointFormatError(f"'{path}': {e}") from e
    return ckpt


def forward(ckpt: Checkpoint, batch: np.ndarray) -> np.ndarray:
    """Eval-mode logits of shape (B, num_classes)."""
    return Network(ckpt.graph, ckpt.tensors).forward(batch, train=False)


def conv_weight(ckpt: Checkpoint, layer_index: int) -> np.ndarray:
    layer = ckpt.graph.layers[layer_index]
    if layer.kind != LayerKind.CONV:
        raise InvariantError(f"layer {layer_index} ({layer.name}) is not a conv layer")
    return ckpt.tensors[f"{layer.name}.weight"]
