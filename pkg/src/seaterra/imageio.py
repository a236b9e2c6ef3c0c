"""Image sequence loading, resizing and synthetic mission generation."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from seaterra.errors import ConfigError, DataError

INTEREST_LEVELS = ("low", "medium", "high")
TEXTURE_KINDS = ("stripes", "checker", "blotches", "noise")
BLOB_KINDS = ("bright", "dark")


@dataclass(frozen=True)
class Frame:
    """One timestamped image; ``pixels`` is (height, width, channels) in [0, 1]."""

    id: int
    t: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 3:
            raise DataError(f"frame {self.id}: expected a 3-D pixel grid, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise DataError(f"frame {self.id}: pixel values outside [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class LabelTrack:
    terrain: tuple
    interest: tuple

    def __post_init__(self):
        terrain = tuple(int(v) for v in self.terrain)
        interest = tuple(str(v) for v in self.interest)
        if len(terrain) != len(interest):
            raise DataError("terrain and interest tracks differ in length")
        bad = [v for v in interest if v not in INTEREST_LEVELS]
        if bad:
            raise DataError(f"unknown interest level {bad[0]!r}")
        if terrain and set(terrain) != set(range(max(terrain) + 1)):
            raise DataError("terrain labels must form a contiguous 0..L-1 set")
        object.__setattr__(self, "terrain", terrain)
        object.__setattr__(self, "interest", interest)

    def __len__(self):
        return len(self.terrain)


@dataclass(frozen=True)
class SynthSpec:
    segments: tuple
    anomalies: tuple = ()
    image_size: tuple = (64, 64)
    noise_level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        segments = tuple((str(kind), int(n)) for kind, n in self.segments)
        anomalies = tuple((int(i), str(kind)) for i, kind in self.anomalies)
        if not segments:
            raise ConfigError("synthetic mission needs at least one segment")
        for kind, n in segments:
            if kind not in TEXTURE_KINDS:
                raise ConfigError(f"unknown texture kind {kind!r}; expected one of {TEXTURE_KINDS}")
            if n <= 0:
                raise ConfigError(f"segment {kind!r} has non-positive frame count {n}")
        total = sum(n for _, n in segments)
        for i, kind in anomalies:
            if kind not in BLOB_KINDS:
                raise ConfigError(f"unknown blob kind {kind!r}; expected one of {BLOB_KINDS}")
            if not 0 <= i < total:
                raise ConfigError(f"anomaly index {i} out of range for {total} frames")
        h, w = (int(v) for v in self.image_size)
        if h <= 0 or w <= 0:
            raise ConfigError(f"image size must be positive, got {(h, w)}")
        if self.noise_level < 0:
            raise ConfigError("noise level must be >= 0")
        object.__setattr__(self, "segments", segments)
        object.__setattr__(self, "anomalies", anomalies)
        object.__setattr__(self, "image_size", (h, w))
        object.__setattr__(self, "noise_level", float(self.noise_level))

    @property
    def n_frames(self):
        return sum(n for _, n in self.segments)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

_INDEX_RE = re.compile(r"(\d+)(?!.*\d)")


def _filename_index(path):
    m = _INDEX_RE.search(path.stem)
    return int(m.group(1)) if m else None


def _decode(path):
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode == "L":
                arr = np.asarray(img, dtype=np.uint8)[:, :, None].repeat(3, axis=2)
            elif img.mode == "RGB":
                arr = np.asarray(img, dtype=np.uint8)
            elif img.mode in ("P", "LA", "RGBA", "1"):
                arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
            else:
                raise DataError(f"{path}: unsupported image mode {img.mode!r}")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def load_sequence(directory, pattern="*.png"):
    """Load every image matching ``pattern`` as a time-ordered list of frames.

    Files are ordered by the last integer in their stem (ties and index-less
    names fall back to the name itself). Grayscale images are replicated to
    three channels.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"{root}: no such directory")
    paths = [p for p in root.glob(pattern) if p.is_file()]
    if not paths:
        raise DataError(f"{root}: no files match {pattern!r}")

    def key(p):
        idx = _filename_index(p)
        return (idx is None, idx if idx is not None else 0, p.name)

    paths.sort(key=key)
    frames = []
    shape = None
    for t, path in enumerate(paths):
        px = _decode(path)
        if shape is None:
            shape = px.shape
        elif px.shape != shape:
            raise DataError(f"{path}: inconsistent dimensions {px.shape[:2]}, expected {shape[:2]}")
        idx = _filename_index(path)
        frames.append(Frame(id=idx if idx is not None else t, t=t, pixels=px))
    return frames


def resize_frame(frame, target):
    """Bilinear resize (half-pixel centres, edge clamped) to ``target`` = (height, width)."""
    th, tw = (int(v) for v in target)
    if th <= 0 or tw <= 0:
        raise ConfigError(f"target dimensions must be positive, got {(th, tw)}")
    px = frame.pixels
    h, w = px.shape[:2]
    if (h, w) == (th, tw):
        return Frame(id=frame.id, t=frame.t, pixels=px)

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, th)
    c0, c1, fc = axis(w, tw)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = px[r0][:, c0] * (1 - fc) + px[r0][:, c1] * fc
    bottom = px[r1][:, c0] * (1 - fc) + px[r1][:, c1] * fc
    out = np.clip(top * (1 - fr) + bottom * fr, 0.0, 1.0)
    return Frame(id=frame.id, t=frame.t, pixels=out)


# ---------------------------------------------------------------------------
# Synthetic missions
# ---------------------------------------------------------------------------

def _texture(kind, h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "stripes":
        period = 8.0
        phase = rng.uniform(0, period)
        img = 0.5 + 0.4 * np.sin(2 * np.pi * (xx + phase) / period)
    elif kind == "checker":
        size = 8
        dy, dx = rng.integers(0, 2 * size, size=2)
        img = np.where(((yy + dy) // size + (xx + dx) // size) % 2 == 0, 0.15, 0.85)
    elif kind == "blotches":
        coarse = rng.uniform(0.2, 0.8, size=(5, 5, 1))
        img = resize_frame(Frame(id=0, t=0, pixels=coarse), (h, w)).pixels[:, :, 0]
    elif kind == "noise":
        img = rng.uniform(0.0, 1.0, size=(h, w))
    else:
        raise ConfigError(f"unknown texture kind {kind!r}")
    return img.astype(np.float64)


def _blob(img, kind, rng):
    h, w = img.shape
    radius = max(1.0, min(h, w) / 4.0)
    cy = rng.uniform(radius, h - radius) if h > 2 * radius else h / 2
    cx = rng.uniform(radius, w - radius) if w > 2 * radius else w / 2
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= radius**2
    out = img.copy()
    out[mask] = 1.0 if kind == "bright" else 0.0
    return out


def generate_synthetic_mission(spec):
    """Render a labelled synthetic mission; a pure function of ``spec``.

    Returns ``(frames, labels)``. Frames carrying a blob are marked
    ``interest="high"``, all others ``"low"``.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    blobs = dict(spec.anomalies)
    frames, interest = [], []
    t = 0
    for kind, count in spec.segments:
        for _ in range(count):
            img = _texture(kind, h, w, rng)
            if t in blobs:
                img = _blob(img, blobs[t], rng)
            if spec.noise_level > 0:
                img = img + rng.normal(0.0, spec.noise_level, size=img.shape)
            img = np.clip(img, 0.0, 1.0)
            frames.append(Frame(id=t, t=t, pixels=np.repeat(img[:, :, None], 3, axis=2)))
            interest.append("high" if t in blobs else "low")
            t += 1
    # terrain ids follow first appearance of each texture kind so repeats share a label
    kinds = [k for k, n in spec.segments for _ in range(n)]
    first_seen = {}
    for k in kinds:
        first_seen.setdefault(k, len(first_seen))
    terrain = [first_seen[k] for k in kinds]
    return frames, LabelTrack(terrain=terrain, interest=interest)


def parse_segments(text):
    """Parse ``"stripes:50,checker:50"`` into segment tuples."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        kind, _, n = part.partition(":")
        try:
            out.append((kind.strip(), int(n)))
        except ValueError:
            raise ConfigError(f"bad segment entry {part!r}; expected kind:count") from None
    return tuple(out)


def parse_anomalies(text):
    """Parse ``"75:bright,120:dark"`` into anomaly tuples."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        idx, _, kind = part.partition(":")
        try:
            out.append((int(idx), kind.strip() or "bright"))
        except ValueError:
            raise ConfigError(f"bad anomaly entry {part!r}; expected index:kind") from None
    return tuple(out)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def save_frame_png(frame, path):
    data = np.round(frame.pixels * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def export_mission(frames, labels, directory):
    """Write ``frame_NNNNN.png`` files and ``labels.csv`` into ``directory``."""
    root = Path(directory)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for frame in frames:
            save_frame_png(frame, root / f"frame_{frame.id:05d}.png")
        save_labels(labels, root / "labels.csv", ids=[f.id for f in frames])
    except OSError as exc:
        raise DataError(f"{root}: cannot write mission ({exc})") from exc
    return root


def save_labels(labels, path, ids=None):
    ids = list(range(len(labels))) if ids is None else list(ids)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame_id", "terrain", "interest"])
        for i, terr, intr in zip(ids, labels.terrain, labels.interest):
            writer.writerow([i, terr, intr])


def load_labels(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: labels file not found")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["frame_id", "terrain", "interest"]:
            raise DataError(f"{path}: expected header frame_id,terrain,interest")
        for line, row in enumerate(reader, start=2):
            try:
                rows.append((int(row["frame_id"]), int(row["terrain"]), row["interest"]))
            except (TypeError, ValueError):
                raise DataError(f"{path}:{line}: malformed row") from None
    rows.sort(key=lambda r: r[0])
    return LabelTrack(terrain=[r[1] for r in rows], interest=[r[2] for r in rows])
