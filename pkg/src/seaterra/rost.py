"""Streaming spatio-temporal topic model with Chinese-restaurant topic growth.

Words arrive one frame at a time. Each word's topic is resampled from a
collapsed conditional whose prior comes from topic counts in the word's
spatio-temporal neighbourhood: the 3x3 block of spatial cells around it,
over every stored frame within ``temporal_window`` of its time index.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, asdict

import numpy as np

from seaterra.errors import ConfigError, DataError
from seaterra.vocab import WordObservation


@dataclass(frozen=True)
class RostConfig:
    alpha: float = 0.1
    beta: float = 25.0
    gamma: float = 1e-7
    vocab_size: int = 1000
    cell_size: int = 5
    temporal_window: int = 1
    refine_recent_bias: float = 0.5
    seed: int = 0
    # fixed-K regime: this many topics from the start, no growth, no retirement
    fixed_topics: int | None = None

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.gamma <= 0:
            raise ConfigError("alpha, beta and gamma must all be > 0")
        if self.vocab_size < 1:
            raise ConfigError("vocabulary size must be >= 1")
        if self.cell_size < 1:
            raise ConfigError("cell size must be >= 1")
        if self.temporal_window < 0:
            raise ConfigError("temporal window must be >= 0")
        if not 0 < self.refine_recent_bias <= 1:
            raise ConfigError("refine_recent_bias must lie in (0, 1]")
        if self.fixed_topics is not None and self.fixed_topics < 1:
            raise ConfigError("fixed_topics must be >= 1 when set")


@dataclass(frozen=True)
class CellIndex:
    spatial: tuple
    t: int

    @classmethod
    def of(cls, row, col, t, cell_size):
        return cls((row // cell_size, col // cell_size), t)


class _FrameWords:
    __slots__ = ("v", "rows", "cols", "cr", "cc", "z")

    def __init__(self, v, rows, cols, cell_size):
        self.v = v
        self.rows = rows
        self.cols = cols
        self.cr = rows // cell_size
        self.cc = cols // cell_size
        self.z = np.full(len(v), -1, dtype=np.int64)


def _box3(a):
    """Sum over the clipped 3x3 spatial block around every cell of (R, C, K)."""
    p = np.pad(a, ((1, 1), (1, 1), (0, 0)))
    rows = p[:-2] + p[1:-1] + p[2:]
    return rows[:, :-2] + rows[:, 1:-1] + rows[:, 2:]


class RostModel:
    def __init__(self, config):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self._lock = threading.RLock()
        self._frames = {}
        self._cells = {}
        self._grid = (1, 1)
        cap = config.fixed_topics or 8
        self._nkv = np.zeros((cap, config.vocab_size), dtype=np.int64)
        self._nk = np.zeros(cap, dtype=np.int64)
        self.K = config.fixed_topics or 0
        self._latest = None

    @classmethod
    def from_assignments(cls, config, words, topics):
        """Build a model whose words carry the given topics (no sampling).

        Topic ids must be dense: every id below ``max(topics) + 1`` used at
        least once, unless the config fixes K.
        """
        words = list(words)
        topics = np.asarray(topics, dtype=np.int64)
        if len(words) != len(topics):
            raise DataError("need exactly one topic per word")
        model = cls(config)
        K = config.fixed_topics or (int(topics.max()) + 1 if len(topics) else 0)
        if len(topics) and (topics.min() < 0 or topics.max() >= K):
            raise DataError("topic ids outside the live range")
        while model._capacity() < K:
            model._grow_topics()
        model.K = K
        by_t = {}
        for w, z in zip(words, topics):
            if not 0 <= w.v < config.vocab_size:
                raise DataError(f"word id {w.v} outside vocabulary of size {config.vocab_size}")
            by_t.setdefault(w.t, []).append((w.v, w.x[0], w.x[1], int(z)))
        for t in sorted(by_t):
            block = np.array(by_t[t], dtype=np.int64).T
            model._install(t, block[0], block[1], block[2], block[3])
        if config.fixed_topics is None and K and (model._nk[:K] == 0).any():
            raise DataError("every topic id below K must be used at least once")
        return model

    def _install(self, t, v, rows, cols, z):
        fw = _FrameWords(v, rows, cols, self.config.cell_size)
        fw.z = np.asarray(z, dtype=np.int64).copy()
        self._grow_grid(int(fw.cr.max()) + 1, int(fw.cc.max()) + 1)
        self._frames[t] = fw
        self._cells[t] = np.zeros(self._grid + (self._capacity(),), dtype=np.int64)
        np.add.at(self._cells[t], (fw.cr, fw.cc, fw.z), 1)
        np.add.at(self._nkv, (fw.z, fw.v), 1)
        self._nk[:] = self._nkv.sum(axis=1)
        self._latest = t if self._latest is None else max(self._latest, t)

    # -- bookkeeping ----------------------------------------------------------

    @property
    def times(self):
        return sorted(self._frames)

    @property
    def n_words(self):
        return int(sum(len(f.v) for f in self._frames.values()))

    def __contains__(self, t):
        return t in self._frames

    @property
    def word_topic_counts(self):
        return self._nkv[: self.K].copy()

    @property
    def topic_totals(self):
        return self._nk[: self.K].copy()

    def cell_topic_counts(self, t):
        return self._cells[t][:, :, : self.K].copy()

    def assignments(self, t):
        return self._frames[t].z.copy()

    def words(self, t):
        f = self._frames[t]
        return [WordObservation(v=int(v), x=(int(r), int(c)), t=t) for v, r, c in zip(f.v, f.rows, f.cols)]

    def _capacity(self):
        return self._nk.shape[0]

    def _grow_topics(self):
        cap = self._capacity() * 2
        nkv = np.zeros((cap, self.config.vocab_size), dtype=np.int64)
        nkv[: self._nkv.shape[0]] = self._nkv
        nk = np.zeros(cap, dtype=np.int64)
        nk[: self._nk.shape[0]] = self._nk
        self._nkv, self._nk = nkv, nk
        for t, cells in self._cells.items():
            grown = np.zeros(cells.shape[:2] + (cap,), dtype=np.int64)
            grown[:, :, : cells.shape[2]] = cells
            self._cells[t] = grown

    def _grow_grid(self, rows, cols):
        rows, cols = max(rows, self._grid[0]), max(cols, self._grid[1])
        if (rows, cols) == self._grid:
            return
        for t, cells in self._cells.items():
            grown = np.zeros((rows, cols, cells.shape[2]), dtype=np.int64)
            grown[: cells.shape[0], : cells.shape[1]] = cells
            self._cells[t] = grown
        self._grid = (rows, cols)

    def _window_counts(self, t):
        w = self.config.temporal_window
        total = np.zeros(self._grid + (self._capacity(),), dtype=np.int64)
        for tt in range(t - w, t + w + 1):
            cells = self._cells.get(tt)
            if cells is not None:
                total += cells
        return total

    def _retire(self, k):
        """Drop empty topic ``k``; the highest live id takes its slot."""
        last = self.K - 1
        if k != last:
            self._nkv[k] = self._nkv[last]
            self._nk[k] = self._nk[last]
            for cells in self._cells.values():
                cells[:, :, k] = cells[:, :, last]
            for f in self._frames.values():
                f.z[f.z == last] = k
        self._nkv[last] = 0
        self._nk[last] = 0
        for cells in self._cells.values():
            cells[:, :, last] = 0
        self.K -= 1
        return last

    # -- sampling -------------------------------------------------------------

    def _weights(self, v, nb_cell):
        cfg = self.config
        k = self.K
        grow = cfg.fixed_topics is None
        w = np.empty(k + 1 if grow else k)
        w[:k] = (self._nkv[:k, v] + cfg.beta) / (self._nk[:k] + cfg.vocab_size * cfg.beta) * (nb_cell[:k] + cfg.alpha)
        if grow:
            w[k] = cfg.gamma / cfg.vocab_size
        return w

    def _sweep(self, t):
        """Resample (or initially place) every word stored at ``t``."""
        cfg = self.config
        f = self._frames[t]
        cells = self._cells[t]
        nb = _box3(self._window_counts(t))
        R, C = self._grid
        fixed = cfg.fixed_topics is not None
        rng = self.rng
        for i in range(len(f.v)):
            v, r, c, old = int(f.v[i]), int(f.cr[i]), int(f.cc[i]), int(f.z[i])
            r0, r1, c0, c1 = max(r - 1, 0), min(r + 2, R), max(c - 1, 0), min(c + 2, C)
            if old >= 0:
                self._nkv[old, v] -= 1
                self._nk[old] -= 1
                cells[r, c, old] -= 1
                nb[r0:r1, c0:c1, old] -= 1
                if self._nk[old] == 0 and not fixed:
                    last = self._retire(old)
                    if last != old:
                        nb[:, :, old] = nb[:, :, last]
                    nb[:, :, last] = 0
            w = self._weights(v, nb[r, c])
            cum = np.cumsum(w)
            k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            k = min(k, len(w) - 1)
            if k == self.K:
                if self.K == self._capacity():
                    self._grow_topics()
                    cells = self._cells[t]
                    grown = np.zeros(nb.shape[:2] + (self._capacity(),), dtype=np.int64)
                    grown[:, :, : nb.shape[2]] = nb
                    nb = grown
                self.K += 1
            f.z[i] = k
            self._nkv[k, v] += 1
            self._nk[k] += 1
            cells[r, c, k] += 1
            nb[r0:r1, c0:c1, k] += 1

    # -- public operations ----------------------------------------------------

    def neighborhood(self, cell):
        """Topic counts (length K) summed over the neighbourhood of ``cell``."""
        with self._lock:
            (r, c), t = cell.spatial, cell.t
            w = self.config.temporal_window
            out = np.zeros(self.K, dtype=np.int64)
            for tt in range(t - w, t + w + 1):
                cells = self._cells.get(tt)
                if cells is not None and r >= 0 and c >= 0:
                    block = cells[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2, : self.K]
                    out += block.sum(axis=(0, 1))
            return out

    def conditional(self, v, cell):
        """Unnormalised weights over the K live topics, then the new-topic weight.

        Counts are used as stored, so a word being resampled must already
        have been removed from them. In the fixed-K regime there is no
        trailing new-topic entry.
        """
        if not 0 <= v < self.config.vocab_size:
            raise DataError(f"word id {v} outside vocabulary of size {self.config.vocab_size}")
        with self._lock:
            padded = np.zeros(self._capacity())
            padded[: self.K] = self.neighborhood(cell)
            return self._weights(v, padded)

    def add_observations(self, words):
        """Append one frame's words and give each an initial topic."""
        words = list(words)
        if not words:
            raise DataError("add_observations needs at least one word")
        ts = {w.t for w in words}
        if len(ts) != 1:
            raise DataError("all words passed to add_observations must share one time index")
        (t,) = ts
        v = np.array([w.v for w in words], dtype=np.int64)
        if v.min() < 0 or v.max() >= self.config.vocab_size:
            bad = int(v[(v < 0) | (v >= self.config.vocab_size)][0])
            raise DataError(f"word id {bad} outside vocabulary of size {self.config.vocab_size}")
        rows = np.array([w.x[0] for w in words], dtype=np.int64)
        cols = np.array([w.x[1] for w in words], dtype=np.int64)
        if rows.min() < 0 or cols.min() < 0:
            raise DataError("word positions must be non-negative")
        with self._lock:
            if t in self._frames:
                raise DataError(f"time index {t} was already added")
            fw = _FrameWords(v, rows, cols, self.config.cell_size)
            self._grow_grid(int(fw.cr.max()) + 1, int(fw.cc.max()) + 1)
            self._frames[t] = fw
            self._cells[t] = np.zeros(self._grid + (self._capacity(),), dtype=np.int64)
            self._latest = t if self._latest is None else max(self._latest, t)
            self._sweep(t)

    def refine(self, iterations):
        """Biased Gibbs refinement: each iteration resamples all words of one frame.

        The frame is the most recent one with probability
        ``refine_recent_bias``, otherwise uniform over all stored frames.
        """
        for _ in range(int(iterations)):
            with self._lock:
                if not self._frames:
                    raise DataError("cannot refine an empty model")
                if self.rng.random() < self.config.refine_recent_bias:
                    t = self._latest
                else:
                    times = self.times
                    t = times[int(self.rng.integers(len(times)))]
                self._sweep(t)

    def word_topic_dist(self, k):
        with self._lock:
            if not 0 <= k < self.K:
                raise DataError(f"topic {k} is not live (K={self.K})")
            cfg = self.config
            return (self._nkv[k] + cfg.beta) / (self._nk[k] + cfg.vocab_size * cfg.beta)

    def _frame_topic_weights(self, t):
        """(words, K) arrays of P(w|k) and neighbourhood topic priors, full counts."""
        if t not in self._frames:
            raise DataError(f"unknown time index {t}")
        cfg = self.config
        f = self._frames[t]
        K = self.K
        nb = _box3(self._window_counts(t))[f.cr, f.cc, :K].astype(np.float64)
        word = (self._nkv[:K, f.v].T + cfg.beta) / (self._nk[:K] + cfg.vocab_size * cfg.beta)
        return word, nb

    def map_labels_array(self, t):
        with self._lock:
            word, nb = self._frame_topic_weights(t)
            if word.shape[1] == 0:
                raise DataError("model has no live topics")
            return np.argmax(word * (nb + self.config.alpha), axis=1)

    def map_word_labels(self, t):
        with self._lock:
            labels = self.map_labels_array(t)
            return list(zip(self.words(t), (int(k) for k in labels)))

    def scene_label(self, t):
        labels = self.map_labels_array(t)
        return int(np.bincount(labels).argmax())

    def topic_proportions(self, t):
        """Fraction of MAP word labels per live topic at ``t``."""
        with self._lock:
            labels = self.map_labels_array(t)
            return np.bincount(labels, minlength=self.K) / len(labels)

    def word_probabilities(self, t):
        with self._lock:
            word, nb = self._frame_topic_weights(t)
            alpha = self.config.alpha
            prior = (nb + alpha) / (nb.sum(axis=1, keepdims=True) + word.shape[1] * alpha)
            return (word * prior).sum(axis=1)

    def perplexity(self, t):
        """exp of the negative mean log-probability of the words at ``t``."""
        with self._lock:
            if t in self._frames and len(self._frames[t].v) == 0:
                raise DataError(f"frame {t} holds no words")
            return perplexity_from_probabilities(self.word_probabilities(t))

    # -- checks ---------------------------------------------------------------

    def check_invariants(self):
        """Raise ``AssertionError`` if any sufficient statistic is inconsistent."""
        with self._lock:
            K = self.K
            assert not self._nk[K:].any(), "counts found beyond the live topics"
            assert (self._nk == self._nkv.sum(axis=1)).all(), "topic totals disagree with word-topic counts"
            if self.config.fixed_topics is None:
                assert (self._nk[:K] >= 1).all(), "a live topic has no words"
            times = self.times
            if not times:
                assert not self._nkv.any(), "counts present in an empty model"
                return
            frames = [self._frames[t] for t in times]
            z = np.concatenate([f.z for f in frames])
            assert ((z >= 0) & (z < K)).all(), f"assignment outside 0..{K - 1}"
            v = np.concatenate([f.v for f in frames])
            nkv = np.zeros_like(self._nkv)
            np.add.at(nkv, (z, v), 1)
            assert (nkv == self._nkv).all(), "word-topic counts disagree with assignments"
            which = np.repeat(np.arange(len(frames)), [len(f.v) for f in frames])
            cr = np.concatenate([f.cr for f in frames])
            cc = np.concatenate([f.cc for f in frames])
            stored = np.stack([self._cells[t] for t in times])
            expected = np.zeros_like(stored)
            np.add.at(expected, (which, cr, cc, z), 1)
            if not (stored == expected).all():
                bad = times[int(np.flatnonzero((stored != expected).any(axis=(1, 2, 3)))[0])]
                raise AssertionError(f"cell-topic counts stale at t={bad}")
            assert stored.sum() == self.n_words == len(z)


def perplexity_from_probabilities(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise DataError("perplexity needs at least one word")
    return math.exp(-float(np.mean(np.log(probs))))


# ---------------------------------------------------------------------------
# Checkpoints and exports
# ---------------------------------------------------------------------------

_MAGIC = b"ROST"
_VERSION = 1


def save_checkpoint(model, path):
    cfg = model.config
    with model._lock, open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<3d", cfg.alpha, cfg.beta, cfg.gamma))
        fh.write(struct.pack("<3I", cfg.vocab_size, cfg.cell_size, cfg.temporal_window))
        fh.write(struct.pack("<dq", cfg.refine_recent_bias, cfg.seed))
        fh.write(struct.pack("<i", -1 if cfg.fixed_topics is None else cfg.fixed_topics))
        fh.write(struct.pack("<I", model.K))
        fh.write(np.ascontiguousarray(model._nkv[: model.K], dtype="<i4").tobytes())
        times = model.times
        fh.write(struct.pack("<I", len(times)))
        for t in times:
            f = model._frames[t]
            fh.write(struct.pack("<qI", t, len(f.v)))
            block = np.stack([f.v, f.rows, f.cols, f.z]).astype("<i4")
            fh.write(block.tobytes())


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: not a ROST checkpoint")
    try:
        off = 4
        (version,) = struct.unpack_from("<I", blob, off)
        off += 4
        if version != _VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        alpha, beta, gamma = struct.unpack_from("<3d", blob, off)
        off += 24
        vocab, cell, window = struct.unpack_from("<3I", blob, off)
        off += 12
        bias, seed = struct.unpack_from("<dq", blob, off)
        off += 16
        (fixed,) = struct.unpack_from("<i", blob, off)
        off += 4
        (K,) = struct.unpack_from("<I", blob, off)
        off += 4
        cfg = RostConfig(alpha=alpha, beta=beta, gamma=gamma, vocab_size=vocab, cell_size=cell,
                         temporal_window=window, refine_recent_bias=bias, seed=seed,
                         fixed_topics=None if fixed < 0 else fixed)
        nkv = np.frombuffer(blob, dtype="<i4", count=K * vocab, offset=off).reshape(K, vocab)
        off += 4 * K * vocab
        (n_frames,) = struct.unpack_from("<I", blob, off)
        off += 4
        model = RostModel(cfg)
        while model._capacity() < K:
            model._grow_topics()
        model.K = K
        for _ in range(n_frames):
            t, n = struct.unpack_from("<qI", blob, off)
            off += 12
            block = np.frombuffer(blob, dtype="<i4", count=4 * n, offset=off).reshape(4, n).astype(np.int64)
            off += 16 * n
            model._install(t, block[0].copy(), block[1].copy(), block[2].copy(), block[3].copy())
    except (struct.error, ValueError, IndexError, ConfigError) as exc:
        raise DataError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if off != len(blob) or not (model._nkv[:K] == nkv).all():
        raise DataError(f"{path}: checkpoint counts do not match its assignments")
    return model


def config_dict(config):
    return asdict(config)
