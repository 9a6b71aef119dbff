import gzip
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedscam.data import (
    Dataset,
    DirichletSpec,
    batch_iter,
    class_centers,
    dirichlet_partition,
    generate_synthetic,
    label_histograms,
    load_idx,
    mean_label_entropy,
    write_idx_images,
    write_idx_labels,
)
from fedscam.errors import (
    ConfigError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxParseError,
    IdxTruncatedError,
)


# -- synthetic ---------------------------------------------------------------

def test_synthetic_counts():
    ds = generate_synthetic(10, 8, 100, 0.3, seed=1)
    assert len(ds) == 1000
    assert Counter(ds.labels.tolist()) == {c: 100 for c in range(10)}


def test_synthetic_zero_spread_is_centers():
    ds = generate_synthetic(4, 5, 3, 0.0, seed=2)
    centers = class_centers(4, 5, 2)
    np.testing.assert_allclose(ds.features, centers[ds.labels].astype(np.float32))
    np.testing.assert_allclose(np.linalg.norm(centers, axis=1), 1.0)


def test_synthetic_separable_by_nearest_center():
    ds = generate_synthetic(10, 16, 100, 0.1, seed=3)
    centers = class_centers(10, 16, 3)
    # brute force: distance to every center, every sample
    hits = 0
    for x, y in zip(ds.features, ds.labels):
        best = min(range(10), key=lambda c: float(((x - centers[c]) ** 2).sum()))
        hits += best == y
    assert hits / len(ds) > 0.99


def test_synthetic_center_seed_shared_across_splits():
    a = generate_synthetic(3, 4, 2, 0.0, seed=1, center_seed=9)
    b = generate_synthetic(3, 4, 2, 0.0, seed=2, center_seed=9)
    np.testing.assert_array_equal(a.features, b.features)


# -- IDX ---------------------------------------------------------------------

def _fixture_bytes():
    images = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes([0, 255, 51, 102, 255, 0, 0, 204])
    labels = struct.pack(">II", 0x801, 2) + bytes([3, 1])
    return images, labels


def test_load_handcrafted_idx(tmp_path):
    images, labels = _fixture_bytes()
    (tmp_path / "img").write_bytes(images)
    (tmp_path / "lbl").write_bytes(labels)
    ds = load_idx(tmp_path / "img", tmp_path / "lbl", classes=4)
    assert len(ds) == 2 and ds.dim == 4
    np.testing.assert_allclose(ds.features[0], [0.0, 1.0, 0.2, 0.4], rtol=1e-6)
    np.testing.assert_allclose(ds.features[1], [1.0, 0.0, 0.0, 0.8], rtol=1e-6)
    assert ds.labels.tolist() == [3, 1]


def test_load_gzipped_idx(tmp_path):
    images, labels = _fixture_bytes()
    (tmp_path / "img.gz").write_bytes(gzip.compress(images))
    (tmp_path / "lbl.gz").write_bytes(gzip.compress(labels))
    assert len(load_idx(tmp_path / "img.gz", tmp_path / "lbl.gz")) == 2


def test_idx_wrong_magic(tmp_path):
    images, labels = _fixture_bytes()
    (tmp_path / "img").write_bytes(images)
    (tmp_path / "lbl").write_bytes(struct.pack(">I", 0x803) + labels[4:])
    with pytest.raises(IdxMagicError, match="wrong magic") as err:
        load_idx(tmp_path / "img", tmp_path / "lbl")
    assert err.value.offset == 0


def test_idx_count_mismatch(tmp_path):
    write_idx_images(tmp_path / "img", np.zeros((3, 2, 2), np.uint8))
    write_idx_labels(tmp_path / "lbl", np.array([0, 1], np.uint8))
    with pytest.raises(IdxCountMismatchError, match="count mismatch"):
        load_idx(tmp_path / "img", tmp_path / "lbl")


def test_idx_truncated(tmp_path):
    images, labels = _fixture_bytes()
    (tmp_path / "img").write_bytes(images[:-3])
    (tmp_path / "lbl").write_bytes(labels)
    with pytest.raises(IdxTruncatedError) as err:
        load_idx(tmp_path / "img", tmp_path / "lbl")
    assert err.value.offset == len(images) - 3
    (tmp_path / "img").write_bytes(images[:10])
    with pytest.raises(IdxParseError, match="header"):
        load_idx(tmp_path / "img", tmp_path / "lbl")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_idx_round_trip(tmp_path_factory, count, rows, cols, seed):
    tmp = tmp_path_factory.mktemp("idx")
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, (count, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, count, dtype=np.uint8)
    write_idx_images(tmp / "img", pixels)
    write_idx_labels(tmp / "lbl", labels)
    ds = load_idx(tmp / "img", tmp / "lbl", classes=10)
    np.testing.assert_array_equal(
        np.rint(ds.features * 255).astype(np.uint8), pixels.reshape(count, -1))
    assert ds.features.tobytes() == (pixels.reshape(count, -1).astype(np.float32)
                                     / np.float32(255)).tobytes()
    np.testing.assert_array_equal(ds.labels, labels)


# -- Dirichlet partition -----------------------------------------------------

@pytest.fixture(scope="module")
def balanced():
    return generate_synthetic(10, 4, 200, 0.5, seed=0)


def check_partition(ds, part, spec):
    flat = np.concatenate(part.index_lists)
    assert len(flat) == len(ds)
    assert len(set(flat.tolist())) == len(flat)
    assert all(len(ix) >= spec.min_size for ix in part.index_lists)
    assert sum(part.sizes()) == len(ds)


def test_partition_conservation(balanced):
    for seed in range(5):
        for alpha in (0.05, 0.1, 1.0):
            spec = DirichletSpec(alpha, 10, 10, seed)
            check_partition(balanced, dirichlet_partition(balanced, spec), spec)


def test_partition_deterministic(balanced):
    spec = DirichletSpec(0.3, 7, 10, 42)
    a = dirichlet_partition(balanced, spec)
    b = dirichlet_partition(balanced, spec)
    assert a.checksum() == b.checksum()
    assert a.checksum() != dirichlet_partition(balanced, DirichletSpec(0.3, 7, 10, 43)).checksum()


def test_near_uniform_at_huge_alpha(balanced):
    for seed in range(5):
        part = dirichlet_partition(balanced, DirichletSpec(1e6, 10, 10, seed))
        hist = label_histograms(balanced, part)
        assert np.all(np.abs(hist - 20) <= 0.1 * 20)


def test_entropy_lower_under_skew(balanced):
    def mean_entropy(alpha):
        return np.mean([
            mean_label_entropy(balanced, dirichlet_partition(balanced, DirichletSpec(alpha, 10, 10, s)))
            for s in range(5)
        ])

    entropies = [mean_entropy(a) for a in (0.1, 0.5, 1.0, 1e6)]
    assert entropies[0] < entropies[-1]
    assert all(a <= b for a, b in zip(entropies, entropies[1:]))


def test_min_size_repair_reaches_minimum():
    ds = generate_synthetic(2, 2, 50, 0.1, seed=0)
    spec = DirichletSpec(0.01, 10, 10, 3)
    part = dirichlet_partition(ds, spec)
    assert min(part.sizes()) == 10
    check_partition(ds, part, spec)


def test_infeasible_min_size():
    ds = generate_synthetic(2, 2, 10, 0.1, seed=0)
    with pytest.raises(ConfigError, match="infeasible"):
        dirichlet_partition(ds, DirichletSpec(1.0, 5, 10, 0))


def test_dirichlet_spec_rejects_bad_alpha():
    with pytest.raises(ConfigError, match="dirichlet.alpha > 0"):
        DirichletSpec(-0.5, 3)


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(0.05, 100.0), m=st.integers(1, 12), min_size=st.integers(0, 8),
       seed=st.integers(0, 2**32 - 1))
def test_partition_properties(alpha, m, min_size, seed):
    ds = generate_synthetic(5, 2, 20, 0.1, seed=1)
    spec = DirichletSpec(alpha, m, min_size, seed)
    check_partition(ds, dirichlet_partition(ds, spec), spec)


# -- batches -----------------------------------------------------------------

def _tiny():
    ds = Dataset(np.arange(20, dtype=np.float32).reshape(10, 2), np.arange(10) % 2, 2)
    part = dirichlet_partition(ds, DirichletSpec(1.0, 1, 0, 0))
    return ds, part


def test_batch_sizes():
    ds, part = _tiny()
    assert [len(b) for b in batch_iter(ds, part, 0, 4, epoch_seed=5)] == [4, 4, 2]


def test_batches_deterministic_and_permutation():
    ds, part = _tiny()
    a = batch_iter(ds, part, 0, 3, epoch_seed=5)
    b = batch_iter(ds, part, 0, 3, epoch_seed=5)
    c = batch_iter(ds, part, 0, 3, epoch_seed=6)
    rows = lambda bs: [tuple(r) for batch in bs for r in batch.features.tolist()]
    assert rows(a) == rows(b)
    assert rows(a) != rows(c)
    assert Counter(rows(a)) == Counter(tuple(r) for r in ds.features.tolist())
