import numpy as np

from potvit.dataset import DatasetConfig, SyntheticDataset, make_dataset


def test_shapes_and_dtypes():
    ds = make_dataset(DatasetConfig(samples=64))
    assert ds.inputs.shape == (64, 16, 16)
    assert ds.inputs.dtype == np.float32
    assert ds.labels.shape == (64,)
    assert set(np.unique(ds.labels)) <= set(range(4))


def test_deterministic_per_seed():
    a = make_dataset(DatasetConfig(seed=5))
    b = make_dataset(DatasetConfig(seed=5))
    c = make_dataset(DatasetConfig(seed=6))
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.inputs, c.inputs)


def test_train_val_split():
    ds = make_dataset(DatasetConfig(samples=100))
    xs, ys = ds.train
    vx, vy = ds.val
    assert len(ys) == 80 and len(vy) == 20
    assert np.array_equal(np.concatenate([xs, vx]), ds.inputs)


def test_calibration_subset_is_train_prefix():
    ds = make_dataset(DatasetConfig())
    cal = ds.calibration(10)
    assert np.array_equal(cal, ds.train[0][:10])


def test_classes_are_separable():
    # class means are +-1 patterns; with modest noise a nearest-mean rule wins
    cfg = DatasetConfig(noise_sigma=0.5, samples=200)
    ds = make_dataset(cfg)
    means = np.stack(
        [ds.inputs[ds.labels == c].mean(axis=0) for c in range(cfg.classes)]
    )
    d = ((ds.inputs[:, None] - means[None]) ** 2).sum(axis=(2, 3))
    pred = d.argmin(axis=1)
    assert (pred == ds.labels).mean() > 0.95


def test_config_json_roundtrip(tmp_path):
    cfg = DatasetConfig(classes=3, samples=10, noise_sigma=0.1, seed=9, tokens=4, dim=8)
    cfg.to_json(tmp_path / "d.json")
    assert DatasetConfig.from_json(tmp_path / "d.json") == cfg
