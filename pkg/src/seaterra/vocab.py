"""Visual vocabulary: LCA slicing, k-means codebooks, quantization and a
gradient-orientation baseline descriptor."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from seaterra.cae import extract_lca
from seaterra.errors import ConfigError, DataError


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray = field(repr=False)
    position: tuple
    t: int


@dataclass(frozen=True)
class WordObservation:
    v: int
    x: tuple
    t: int


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray = field(repr=False)
    seed: int = 0
    inertia: float = 0.0
    inertia_history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        c = np.array(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise DataError(f"codebook needs a (size, dim) centroid array, got shape {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def size(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


def lca_features(lca):
    """Row-major (cells, channels) matrix of channel slices."""
    lca = np.asarray(lca, dtype=np.float64)
    return lca.reshape(-1, lca.shape[2])


def slice_lca(lca, t=0):
    lca = np.asarray(lca, dtype=np.float64)
    h, w, _ = lca.shape
    return [FeatureVector(values=lca[r, c].copy(), position=(r, c), t=t) for r in range(h) for c in range(w)]


def _squared_distances(points, centroids, chunk=8192):
    out = np.empty((points.shape[0], centroids.shape[0]))
    for start in range(0, points.shape[0], chunk):
        block = points[start : start + chunk]
        out[start : start + chunk] = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return out


def _kmeans_pp(points, k, rng):
    n = points.shape[0]
    centroids = [points[rng.integers(n)]]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        while d2[idx] == 0:  # guard against landing on an already-chosen point
            idx = (idx + 1) % n
        centroids.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centroids)


def kmeans_fit(features, size, seed=0, max_iters=100, tol=1e-6):
    """Lloyd's algorithm with k-means++ seeding.

    An emptied cluster is reseeded at the point farthest from its assigned
    centroid. Centroids are rounded to float32 so a saved codebook quantizes
    exactly like the in-memory one.
    """
    points = np.asarray(
        [getattr(f, "values", f) for f in features] if not isinstance(features, np.ndarray) else features,
        dtype=np.float64,
    )
    if points.size == 0:
        raise DataError("k-means needs at least one feature vector")
    if points.ndim != 2:
        raise DataError(f"features must form a 2-D array, got shape {points.shape}")
    size = int(size)
    if size < 1:
        raise ConfigError("vocabulary size must be >= 1")
    n_distinct = np.unique(points, axis=0).shape[0]
    if size > n_distinct:
        raise DataError(f"vocabulary size {size} exceeds the {n_distinct} distinct feature vectors")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, size, rng)
    history = []
    for _ in range(max_iters):
        d2 = _squared_distances(points, centroids)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(points)), labels].sum()))
        new = centroids.copy()
        counts = np.bincount(labels, minlength=size)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        if not filled.all():
            own = d2[np.arange(len(points)), labels]
            for k in np.flatnonzero(~filled):
                far = int(own.argmax())
                new[k] = points[far]
                own[far] = -1.0
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    history.append(float(_squared_distances(points, centroids).min(axis=1).sum()))
    centroids = centroids.astype(np.float32).astype(np.float64)
    inertia = float(_squared_distances(points, centroids).min(axis=1).sum())
    return Codebook(centroids=centroids, seed=seed, inertia=inertia, inertia_history=tuple(history))


def quantize(codebook, feature):
    """Id of the nearest centroid (Euclidean); ties go to the lowest id."""
    x = np.asarray(getattr(feature, "values", feature), dtype=np.float64)
    if x.shape != (codebook.dim,):
        raise DataError(f"feature dimension {x.shape} does not match codebook dimension {codebook.dim}")
    return int(((codebook.centroids - x) ** 2).sum(axis=1).argmin())


def quantize_many(codebook, points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != codebook.dim:
        raise DataError(f"features of shape {points.shape} do not match codebook dimension {codebook.dim}")
    return _squared_distances(points, codebook.centroids).argmin(axis=1)


def words_from_grid(ids, grid_shape, t):
    h, w = grid_shape
    ids = np.asarray(ids).reshape(h, w)
    return [WordObservation(v=int(ids[r, c]), x=(r, c), t=t) for r in range(h) for c in range(w)]


def frame_to_words(net, codebook, frame):
    lca = extract_lca(net, frame)
    ids = quantize_many(codebook, lca_features(lca))
    return words_from_grid(ids, lca.shape[:2], frame.t)


# ---------------------------------------------------------------------------
# Baseline descriptor
# ---------------------------------------------------------------------------

N_ORIENTATION_BINS = 8


def _grid_origins(size, patch, grid):
    return np.round(np.linspace(0, size - patch, grid)).astype(int)


def baseline_descriptor_grid(pixels, grid=25, patch=16):
    """Dense orientation histograms as a (grid, grid, 8) array."""
    px = np.asarray(getattr(pixels, "pixels", pixels), dtype=np.float64)
    gray = px.mean(axis=2) if px.ndim == 3 else px
    h, w = gray.shape
    if h < patch or w < patch:
        raise DataError(f"frame {h}x{w} is smaller than the {patch}x{patch} descriptor patch")
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((angle / (2 * np.pi / N_ORIENTATION_BINS)).astype(int), N_ORIENTATION_BINS - 1)
    # integral image per bin: (h+1, w+1, bins)
    weighted = np.zeros((h, w, N_ORIENTATION_BINS))
    np.put_along_axis(weighted, bins[:, :, None], mag[:, :, None], axis=2)
    integral = np.zeros((h + 1, w + 1, N_ORIENTATION_BINS))
    integral[1:, 1:] = weighted.cumsum(0).cumsum(1)
    rows = _grid_origins(h, patch, grid)
    cols = _grid_origins(w, patch, grid)
    r0, c0 = rows[:, None], cols[None, :]
    r1, c1 = r0 + patch, c0 + patch
    hist = integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]
    hist = np.maximum(hist, 0.0)
    norm = np.linalg.norm(hist, axis=2, keepdims=True)
    return np.where(norm > 1e-12, hist / np.where(norm > 1e-12, norm, 1.0), 0.0)


def baseline_descriptors(frame, grid=25, patch=16):
    hist = baseline_descriptor_grid(frame, grid, patch)
    t = getattr(frame, "t", 0)
    return [FeatureVector(values=hist[r, c].copy(), position=(r, c), t=t) for r in range(grid) for c in range(grid)]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_MAGIC = b"VOC1"


def save_codebook(codebook, path):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<2I", codebook.size, codebook.dim))
        fh.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())


def load_codebook(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read codebook ({exc})") from exc
    if blob[:4] != _MAGIC or len(blob) < 12:
        raise DataError(f"{path}: not a VOC1 codebook file")
    size, dim = struct.unpack_from("<2I", blob, 4)
    if len(blob) != 12 + 4 * size * dim:
        raise DataError(f"{path}: codebook payload has wrong length")
    centroids = np.frombuffer(blob, dtype="<f4", offset=12).reshape(size, dim).astype(np.float64)
    return Codebook(centroids=centroids)


def save_words_csv(words, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "row", "col", "word"])
        for w in words:
            writer.writerow([w.t, w.x[0], w.x[1], w.v])
