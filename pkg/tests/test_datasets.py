import numpy as np
import pytest

from prune_pipeline import *
from prune_pipeline.datasets import CIFAR_RECORD_BYTES, class_template, read_cifar_batch


def test_synth_is_deterministic():
    a = synth_dataset(seed=3, n_train=40, n_eval=20)
    b = synth_dataset(seed=3, n_train=40, n_eval=20)
    xa, ya = next(a.batches(Split.TRAIN, 16, shuffle=True, seed=1, epoch=2))
    xb, yb = next(b.batches(Split.TRAIN, 16, shuffle=True, seed=1, epoch=2))
    np.testing.assert_array_equal(xa, xb)
    np.testing.assert_array_equal(ya, yb)
    assert a.id == b.id
    assert synth_dataset(seed=4, n_train=40, n_eval=20).id != a.id


def test_synth_shapes_and_normalization():
    ds = synth_dataset(seed=0, n_train=64, n_eval=32, classes=5, size=12)
    assert ds.input_shape == (3, 12, 12)
    assert (ds.n_train, ds.n_eval, ds.num_classes) == (64, 32, 5)
    assert ds.train_x.dtype == np.float32
    np.testing.assert_allclose(ds.train_x.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
    assert set(np.unique(ds.train_y)) == set(range(5))


def test_synth_without_noise_is_separable_by_nearest_template():
    classes, size = 6, 16
    ds = synth_dataset(seed=1, n_train=30, n_eval=60, classes=classes, size=size, noise=0.0)
    x, y = ds.split(Split.EVAL)
    templates = np.stack([class_template(k, size) for k in range(classes)])
    mean = np.asarray(ds.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(ds.std, dtype=np.float32)[:, None, None]
    normed = (templates[:, None] - mean) / std
    dist = ((x[:, None] - normed[None]) ** 2).sum(axis=(2, 3, 4))
    assert (dist.argmin(axis=1) == y).mean() == 1.0


def test_class_templates_differ():
    t = [class_template(k, 16) for k in range(8)]
    for i in range(8):
        for j in range(i + 1, 8):
            assert not np.array_equal(t[i], t[j])


def test_synth_argument_errors():
    with pytest.raises(InputError):
        synth_dataset(classes=1)
    with pytest.raises(InputError):
        synth_dataset(size=4)


def test_shuffle_depends_on_epoch(small_synth):
    _, y1 = next(small_synth.batches(Split.TRAIN, 64, shuffle=True, seed=0, epoch=1))
    _, y2 = next(small_synth.batches(Split.TRAIN, 64, shuffle=True, seed=0, epoch=2))
    assert not np.array_equal(y1, y2)
    assert sorted(y1) == sorted(y2)


def test_batches_cover_split_once(small_synth):
    sizes = [len(y) for _, y in small_synth.batches("eval", 10)]
    assert sizes == [10, 10, 10, 2]


def crafted_records(labels):
    rng = np.random.default_rng(0)
    out = bytearray()
    for label in labels:
        out.append(label)
        out.extend(rng.integers(0, 256, 3072, dtype=np.uint8).tobytes())
    return bytes(out)


def test_read_cifar_batch_byte_layout(tmp_path):
    raw = crafted_records([7, 2])
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(raw)
    images, labels = read_cifar_batch(path)
    assert labels.tolist() == [7, 2]
    assert labels[0] == raw[0]
    assert images.shape == (2, 3, 32, 32)
    # CHW: the second record's first green pixel
    assert images[1, 1, 0, 0] == raw[CIFAR_RECORD_BYTES + 1 + 1024]


def test_read_cifar_batch_truncated(tmp_path):
    path = tmp_path / "test_batch.bin"
    path.write_bytes(crafted_records([1, 2])[:-10])
    with pytest.raises(DataFormatError, match="test_batch.bin"):
        read_cifar_batch(path)


def test_read_cifar_batch_record_count(tmp_path):
    path = tmp_path / "data_batch_2.bin"
    path.write_bytes(crafted_records([1, 2]))
    with pytest.raises(DataFormatError, match="expected 10000"):
        read_cifar_batch(path, expected_records=10000)


def test_load_cifar10_missing_dir(tmp_path):
    with pytest.raises(DataFormatError):
        load_cifar10(tmp_path / "missing")


def test_open_dataset_specs():
    ds = open_dataset("synth:seed=2,n_train=20,n_eval=10,classes=3,size=8,noise=0.1")
    assert (ds.n_train, ds.n_eval, ds.num_classes, ds.input_shape) == (20, 10, 3, (3, 8, 8))
    with pytest.raises(InputError):
        open_dataset("synth:colour=red")


def test_synth_with_stored_normalization():
    own = synth_dataset(seed=5, n_train=24, n_eval=12)
    mean, std = (0.5, 0.25, -1.0), (2.0, 1.0, 4.0)
    ds = synth_dataset(seed=5, n_train=24, n_eval=12, mean=mean, std=std)
    assert (ds.mean, ds.std) == (mean, std)
    assert ds.id == own.id

    def raw(handle, x):
        m = np.asarray(handle.mean, dtype=np.float32)[None, :, None, None]
        s = np.asarray(handle.std, dtype=np.float32)[None, :, None, None]
        return x * s + m

    np.testing.assert_allclose(raw(ds, ds.train_x), raw(own, own.train_x), atol=1e-5)
    np.testing.assert_allclose(raw(ds, ds.eval_x), raw(own, own.eval_x), atol=1e-5)
    again = open_dataset("synth:seed=5,n_train=24,n_eval=12", mean, std)
    np.testing.assert_array_equal(again.train_x, ds.train_x)


@pytest.mark.parametrize(
    "mean,std",
    [((0.0, 0.0), (1.0, 1.0)), ((0.0,) * 3, (1.0, 0.0, 1.0)), ((np.nan, 0.0, 0.0), (1.0,) * 3)],
)
def test_stored_normalization_is_validated(mean, std):
    with pytest.raises(InputError):
        synth_dataset(seed=0, n_train=8, n_eval=8, mean=mean, std=std)
