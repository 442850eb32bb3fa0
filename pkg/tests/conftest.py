import numpy as np
import pytest

from mvfusion.data import MultiViewDataset, ViewSpec


def make_random_dataset(rng, min_samples=4, max_samples=20):
    """Random dataset with mixed temporal/static views and random splits."""
    n = int(rng.integers(min_samples, max_samples + 1))
    t = int(rng.integers(1, 7))
    num_views = int(rng.integers(1, 4))
    views = []
    for v in range(num_views):
        static = bool(rng.random() < 0.3) and v > 0
        channels = int(rng.integers(1, 5))
        shape = (n, channels) if static else (n, t, channels)
        spec = ViewSpec(
            name=f"view{v}",
            channels=channels,
            timesteps=0 if static else t,
            static=static,
        )
        views.append((spec, rng.normal(size=shape).astype(np.float32)))
    if all(spec.static for spec, _ in views):
        spec = ViewSpec(name="anchor", channels=1, timesteps=t, static=False)
        views.append((spec, rng.normal(size=(n, t, 1)).astype(np.float32)))
    labels = rng.integers(0, 2, size=n).astype(np.uint8)
    perm = rng.permutation(n)
    cut1, cut2 = n // 2, n // 2 + n // 4
    splits = {"train": perm[:cut1], "val": perm[cut1:cut2], "test": perm[cut2:]}
    return MultiViewDataset(views, labels, splits, name="random")


def assert_datasets_identical(a: MultiViewDataset, b: MultiViewDataset):
    assert a.view_names == b.view_names
    for name in a.view_names:
        assert a.views[name].shape == b.views[name].shape
        assert a.views[name].tobytes() == b.views[name].tobytes()
        assert a.spec(name) == b.spec(name) or (
            a.spec(name).name == b.spec(name).name
            and a.spec(name).channels == b.spec(name).channels
            and a.spec(name).static == b.spec(name).static
        )
    assert a.labels.tobytes() == b.labels.tobytes()
    for split in ("train", "val", "test"):
        np.testing.assert_array_equal(a.splits[split], b.splits[split])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
