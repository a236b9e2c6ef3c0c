import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seaterra.cae import ArchSpec, CaeNetwork
from seaterra.errors import ConfigError, DataError
from seaterra.imageio import Frame
from seaterra.vocab import (
    Codebook,
    baseline_descriptor_grid,
    baseline_descriptors,
    frame_to_words,
    kmeans_fit,
    lca_features,
    load_codebook,
    quantize,
    quantize_many,
    save_codebook,
    save_words_csv,
    slice_lca,
    words_from_grid,
)


def brute_force_inertia(points, k):
    """Smallest within-cluster sum of squares over every labelling."""
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(points)):
        labels = np.array(labels)
        if len(set(labels)) != k:
            continue
        total = 0.0
        for j in range(k):
            members = points[labels == j]
            total += ((members - members.mean(axis=0)) ** 2).sum()
        best = min(best, total)
    return best


class TestSlicing:
    def test_full_scale_lca(self):
        vectors = slice_lca(np.random.default_rng(0).uniform(size=(25, 25, 5)), t=4)
        assert len(vectors) == 625
        assert all(v.values.shape == (5,) and v.t == 4 for v in vectors)
        assert vectors[26].position == (1, 1)

    def test_small_lca(self):
        lca = np.arange(4 * 4 * 5, dtype=float).reshape(4, 4, 5)
        assert len(slice_lca(lca)) == 16
        np.testing.assert_array_equal(lca_features(lca)[5], lca[1, 1])


class TestKmeans:
    POINTS = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])

    def test_two_pairs(self):
        book = kmeans_fit(self.POINTS, 2, seed=0)
        assert book.inertia == pytest.approx(1.0)
        assert book.inertia == pytest.approx(brute_force_inertia(self.POINTS, 2))
        assert sorted(map(tuple, book.centroids)) == [(0.0, 0.5), (10.0, 10.5)]

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive_optimum_on_separated_data(self, seed):
        rng = np.random.default_rng(seed)
        centres = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
        points = np.concatenate([c + rng.normal(scale=0.5, size=(3, 2)) for c in centres])
        book = kmeans_fit(points, 3, seed=seed)
        assert book.inertia == pytest.approx(brute_force_inertia(points, 3), rel=1e-5)

    def test_size_equals_distinct_points(self):
        points = np.random.default_rng(1).uniform(size=(7, 3)).astype(np.float32)
        book = kmeans_fit(points, 7)
        assert book.inertia == 0.0

    def test_deterministic(self):
        points = np.random.default_rng(2).normal(size=(200, 5))
        a, b = kmeans_fit(points, 10, seed=3), kmeans_fit(points, 10, seed=3)
        np.testing.assert_array_equal(a.centroids, b.centroids)
        assert a.inertia_history == b.inertia_history

    def test_errors(self):
        with pytest.raises(DataError):
            kmeans_fit(np.empty((0, 3)), 2)
        with pytest.raises(DataError):
            kmeans_fit(np.ones((10, 2)), 2)
        with pytest.raises(ConfigError):
            kmeans_fit(self.POINTS, 0)

    def test_accepts_feature_vectors(self):
        vectors = slice_lca(np.random.default_rng(3).uniform(size=(4, 4, 5)))
        assert kmeans_fit(vectors, 4).dim == 5

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 8))
    def test_inertia_non_increasing(self, seed, k):
        points = np.random.default_rng(seed).normal(size=(60, 3))
        history = np.array(kmeans_fit(points, k, seed=seed).inertia_history)
        assert np.all(np.diff(history) <= 1e-9 * max(1.0, history[0]))


class TestQuantize:
    def test_tie_goes_to_lowest(self):
        book = Codebook(np.array([[0.0, 0.0], [2.0, 0.0]]))
        assert quantize(book, [1.0, 0.0]) == 0
        assert quantize_many(book, [[1.0, 0.0]]).tolist() == [0]

    def test_centroid_maps_to_itself(self):
        book = Codebook(np.random.default_rng(4).uniform(size=(12, 5)))
        assert [quantize(book, c) for c in book.centroids] == list(range(12))
        assert quantize_many(book, book.centroids).tolist() == list(range(12))

    def test_dimension_mismatch(self):
        book = Codebook(np.zeros((2, 5)))
        with pytest.raises(DataError):
            quantize(book, [0.0, 1.0])
        with pytest.raises(DataError):
            quantize_many(book, np.zeros((3, 4)))

    def test_words_from_grid(self):
        words = words_from_grid(np.arange(6), (2, 3), t=9)
        assert [(w.v, w.x, w.t) for w in words][4] == (4, (1, 1), 9)

    def test_frame_to_words(self):
        arch = ArchSpec.test_scale()
        net = CaeNetwork.initialize(arch)
        frame = Frame(0, 3, np.random.default_rng(5).uniform(size=(64, 64, 3)))
        book = Codebook(np.random.default_rng(6).uniform(size=(8, 5)))
        words = frame_to_words(net, book, frame)
        assert len(words) == 16
        assert {w.t for w in words} == {3}
        assert all(0 <= w.v < 8 for w in words)


class TestBaseline:
    def test_constant_image(self):
        hist = baseline_descriptor_grid(np.full((64, 64, 3), 0.4), grid=5, patch=16)
        assert hist.shape == (5, 5, 8) and not hist.any()

    def test_vertical_edge(self):
        px = np.zeros((32, 32, 3))
        px[:, 16:] = 1.0
        hist = baseline_descriptor_grid(px, grid=3, patch=16)
        centre = hist[1, 1]
        assert centre[0] == pytest.approx(1.0)
        assert centre[1:].sum() == 0.0
        flipped = baseline_descriptor_grid(px[:, ::-1], grid=3, patch=16)[1, 1]
        assert flipped[4] == pytest.approx(1.0)

    def test_count_and_norm(self):
        frame = Frame(0, 2, np.random.default_rng(7).uniform(size=(400, 400, 3)))
        descs = baseline_descriptors(frame)
        assert len(descs) == 625
        norms = np.linalg.norm([d.values for d in descs], axis=1)
        np.testing.assert_allclose(norms, 1.0)

    def test_too_small(self):
        with pytest.raises(DataError):
            baseline_descriptor_grid(np.zeros((8, 8, 3)), patch=16)


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        book = kmeans_fit(np.random.default_rng(8).normal(size=(50, 5)), 6)
        save_codebook(book, tmp_path / "v.bin")
        assert (tmp_path / "v.bin").stat().st_size == 12 + 4 * 6 * 5
        loaded = load_codebook(tmp_path / "v.bin")
        np.testing.assert_array_equal(loaded.centroids, book.centroids)

    def test_corrupt(self, tmp_path):
        (tmp_path / "v.bin").write_bytes(b"VOC1\x02\x00\x00\x00\x05\x00\x00\x00abc")
        with pytest.raises(DataError):
            load_codebook(tmp_path / "v.bin")
        with pytest.raises(DataError):
            load_codebook(tmp_path / "missing.bin")

    def test_words_csv(self, tmp_path):
        save_words_csv(words_from_grid([3, 1], (1, 2), t=0), tmp_path / "w.csv")
        assert (tmp_path / "w.csv").read_text() == "t,row,col,word\n0,0,0,3\n0,0,1,1\n"
