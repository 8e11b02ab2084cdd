import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import defaults
from .common import DataFormatError, InputError, Split

logger = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_BATCH_RECORDS = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class DatasetHandle:
    id: str
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    num_classes: int
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])

    @property
    def n_train(self) -> int:
        return len(self.train_y)

    @property
    def n_eval(self) -> int:
        return len(self.eval_y)

    def split(self, split) -> tuple[np.ndarray, np.ndarray]:
        if Split.parse(split) == Split.TRAIN:
            return self.train_x, self.train_y
        return self.eval_x, self.eval_y

    def batches(
        self,
        split,
        batch_size: int,
        *,
        shuffle: bool = False,
        seed: int = 0,
        epoch: int = 0,
    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yields (images, labels); the shuffle order depends only on
        (seed, epoch)."""
        x, y = self.split(split)
        order = np.arange(len(y))
        if shuffle:
            order = np.random.default_rng((seed, epoch)).permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start : start + batch_size]
            yield x[idx], y[idx]


def check_normalization(
    mean, std, channels: int
) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Validates stored per-channel constants against the image channels."""
    mean = tuple(float(v) for v in mean)
    std = tuple(float(v) for v in std)
    if len(mean) != channels or len(std) != channels:
        raise InputError(
            f"normalization has {len(mean)} mean / {len(std)} std values for {channels} channels"
        )
    m, s = np.asarray(mean), np.asarray(std)
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s)) and np.all(s > 0)):
        raise InputError(f"invalid normalization constants: mean={mean} std={std}")
    return mean, std


def _normalize(images: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return ((images - m) / s).astype(np.float32)


def read_cifar_batch(
    path, expected_records: Optional[int] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Reads one CIFAR-10 binary batch: 3073-byte records, label byte first,
    then 3072 CHW pixel bytes. Returns (uint8 images (N,3,32,32), labels)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"Cannot read CIFAR batch '{path}': {e}") from e
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
        raise DataFormatError(
            f"'{path}': size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}-byte records"
        )
    n = len(raw) // CIFAR_RECORD_BYTES
    if expected_records is not None and n != expected_records:
        raise DataFormatError(f"'{path}': {n} records, expected {expected_records}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise DataFormatError(f"'{path}': label byte {labels.max()} out of range")
    images = records[:, 1:].reshape(n, 3, 32, 32)
    return images, labels


def load_cifar10(directory=defaults.cifar10_dir, mean=None, std=None) -> DatasetHandle:
    """CIFAR-10 binary distribution, normalized with ``mean``/``std`` or the
    fixed CIFAR constants."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFormatError(f"Invalid CIFAR-10 dir: '{directory}'")
    xs, ys = [], []
    for name in CIFAR_TRAIN_FILES:
        x, y = read_cifar_batch(directory.joinpath(name), CIFAR_BATCH_RECORDS)
        xs.append(x)
        ys.append(y)
    ex, ey = read_cifar_batch(directory.joinpath(CIFAR_TEST_FILE), CIFAR_BATCH_RECORDS)
    if mean is None or std is None:
        mean, std = defaults.cifar10_mean, defaults.cifar10_std
    mean, std = check_normalization(mean, std, 3)
    train_x = _normalize(np.concatenate(xs).astype(np.float32) / 255.0, mean, std)
    eval_x = _normalize(ex.astype(np.float32) / 255.0, mean, std)
    logger.info("loaded CIFAR-10 from %s: %d train / %d eval", directory, len(train_x), len(eval_x))
    return DatasetHandle(
        "cifar10", train_x, np.concatenate(ys), eval_x, ey, 10, mean, std
    )


def class_template(label: int, size: int) -> np.ndarray:
    """Binary pattern for a class: horizontal bar, vertical bar, cross or disc,
    shifted for every further group of four classes."""
    kind = label % 4
    step = max(1, size // 6)
    center = (size // 2 + (label // 4) * step) % size
    half = max(1, size // 16)
    img = np.zeros((size, size), dtype=np.float32)
    rows = slice(max(0, center - half), center + half)
    if kind in (0, 2):
        img[rows, :] = 1.0
    if kind in (1, 2):
        img[:, rows] = 1.0
    if kind == 3:
        yy, xx = np.mgrid[0:size, 0:size]
        img[(yy - center) ** 2 + (xx - center) ** 2 <= (size / 4) ** 2] = 1.0
    return img


def synth_dataset(
    seed: int = 0,
    n_train: int = defaults.synth_n_train,
    n_eval: int = defaults.synth_n_eval,
    classes: int = defaults.synth_classes,
    size: int = defaults.synth_size,
    noise: float = defaults.synth_noise,
    channels: int = 3,
    mean: Optional[Sequence[float]] = None,
    std: Optional[Sequence[float]] = None,
) -> DatasetHandle:
    """Class templates plus seeded Gaussian pixel noise, normalized with the
    train split's per-channel statistics unless ``mean``/``std`` are given."""
    if classes < 2:
        raise InputError(f"classes must be >= 2: {classes}")
    if size < 8:
        raise InputError(f"size must be >= 8: {size}")
    if n_train < 1 or n_eval < 1:
        raise InputError("n_train and n_eval must be >= 1")
    rng = np.random.default_rng(seed)
    templates = np.stack([class_template(k, size) for k in range(classes)])

    def draw(n):
        labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
        base = np.repeat(templates[labels][:, None], channels, axis=1)
        pixels = base + noise * rng.standard_normal(base.shape, dtype=np.float32)
        return pixels.astype(np.float32), labels

    train_x, train_y = draw(n_train)
    eval_x, eval_y = draw(n_eval)
    if mean is None or std is None:
        mean = tuple(float(v) for v in train_x.mean(axis=(0, 2, 3)))
        std = tuple(max(float(v), 1e-6) for v in train_x.std(axis=(0, 2, 3)))
    mean, std = check_normalization(mean, std, channels)
    return DatasetHandle(
        f"synth-s{seed}-n{n_train}-e{n_eval}-c{classes}-z{size}-sd{noise:g}",
        _normalize(train_x, mean, std),
        train_y,
        _normalize(eval_x, mean, std),
        eval_y,
        classes,
        mean,
        std,
    )


def open_dataset(spec: str, mean=None, std=None) -> DatasetHandle:
    """``synth`` or ``synth:seed=1,classes=4,...`` for the synthetic set,
    otherwise a CIFAR-10 binary directory. ``mean``/``std`` replace the
    dataset's own normalization constants."""
    if spec == "synth" or spec.startswith("synth:"):
        params = {}
        _, _, rest = spec.partition(":")
        for item in filter(None, rest.split(",")):
            key, sep, value = item.partition("=")
            if not sep or key not in ("seed", "n_train", "n_eval", "classes", "size", "noise"):
                raise InputError(f"Invalid synthetic dataset option: '{item}'")
            try:
                params[key] = float(value) if key == "noise" else int(value)
            except ValueError:
                raise InputError(f"Invalid synthetic dataset option: '{item}'") from None
        return synth_dataset(**params, mean=mean, std=std)
    return load_cifar10(spec, mean, std)
