"""Pipeline configuration and the stages behind each CLI subcommand."""

from __future__ import annotations

import csv
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from seaterra import cae, evaluation, imageio, rost, vocab
from seaterra.errors import ConfigError, DataError

log = logging.getLogger(__name__)

FEATURE_PATHS = ("cae", "baseline")


@dataclass(frozen=True)
class PipelineConfig:
    out: Path = Path("seaterra-out")
    seed: int = 0
    features: str = "cae"
    budget: int = 20
    data_dir: Path | None = None
    data_pattern: str = "*.png"
    labels: Path | None = None
    synth: imageio.SynthSpec | None = None
    arch: cae.ArchSpec = field(default_factory=cae.ArchSpec)
    vocab_size: int = 1000
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-4
    baseline_grid: int = 25
    baseline_patch: int = 16
    rost: rost.RostConfig = field(default_factory=rost.RostConfig)

    def __post_init__(self):
        if self.features not in FEATURE_PATHS:
            raise ConfigError(f"features must be one of {FEATURE_PATHS}, got {self.features!r}")
        if self.budget < 0:
            raise ConfigError("refinement budget must be >= 0")
        if self.vocab_size < 1:
            raise ConfigError("vocabulary size must be >= 1")

    # every seeded component draws from the global seed
    def component_seeds(self):
        synth, net, kmeans, topics = np.random.SeedSequence(self.seed).generate_state(4)
        return {"synth": int(synth), "cae": int(net), "kmeans": int(kmeans), "rost": int(topics)}

    @property
    def dataset_dir(self):
        return Path(self.data_dir) if self.data_dir is not None else self.out / "dataset"

    @property
    def labels_path(self):
        return Path(self.labels) if self.labels is not None else self.dataset_dir / "labels.csv"

    @property
    def model_path(self):
        return self.out / "cae.bin"

    @property
    def loss_path(self):
        return self.out / "cae_loss.csv"

    def codebook_path(self, features=None):
        return self.out / f"vocab_{features or self.features}.bin"

    def run_dir(self, features=None):
        return self.out / (features or self.features)


# ---------------------------------------------------------------------------
# Config file: flat ``dotted.key = value`` lines
# ---------------------------------------------------------------------------


def read_config_file(path):
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def _tuple_of_ints(text, sep=","):
    return tuple(int(v) for v in text.split(sep) if v.strip())


def _layers(text):
    return tuple(_tuple_of_ints(part, ":") for part in text.split(",") if part.strip())


def _opt_int(text):
    return None if text.lower() in ("", "none") else int(text)


_ROST_KEYS = {
    "rost.alpha": ("alpha", float),
    "rost.beta": ("beta", float),
    "rost.gamma": ("gamma", float),
    "rost.cell_size": ("cell_size", int),
    "rost.temporal_window": ("temporal_window", int),
    "rost.refine_recent_bias": ("refine_recent_bias", float),
}
_ARCH_KEYS = {
    "cae.input": ("input", _tuple_of_ints),
    "cae.layers": ("layers", _layers),
    "cae.weight_decay": ("weight_decay", float),
    "cae.learning_rate": ("learning_rate", float),
    "cae.batch_size": ("batch_size", int),
    "cae.epochs": ("epochs", int),
}
_TOP_KEYS = {
    "out": ("out", Path),
    "seed": ("seed", int),
    "features": ("features", str),
    "budget": ("budget", int),
    "data.dir": ("data_dir", Path),
    "data.pattern": ("data_pattern", str),
    "data.labels": ("labels", Path),
    "vocab.size": ("vocab_size", int),
    "vocab.max_iters": ("kmeans_max_iters", int),
    "vocab.tol": ("kmeans_tol", float),
    "vocab.baseline_grid": ("baseline_grid", int),
    "vocab.baseline_patch": ("baseline_patch", int),
}
_SYNTH_KEYS = ("synth.segments", "synth.anomalies", "synth.height", "synth.width", "synth.noise")
KNOWN_KEYS = frozenset(_ROST_KEYS) | frozenset(_ARCH_KEYS) | frozenset(_TOP_KEYS) | set(_SYNTH_KEYS) | {"cae.preset"}


def build_config(values):
    """Turn a ``{dotted.key: text}`` mapping into a :class:`PipelineConfig`."""
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        top = {attr: conv(values[key]) for key, (attr, conv) in _TOP_KEYS.items() if key in values}
        preset = values.get("cae.preset", "full").lower()
        if preset not in ("full", "test"):
            raise ConfigError(f"cae.preset must be 'full' or 'test', got {preset!r}")
        arch = cae.ArchSpec.full_scale() if preset == "full" else cae.ArchSpec.test_scale()
        arch_kw = {attr: conv(values[key]) for key, (attr, conv) in _ARCH_KEYS.items() if key in values}
        rost_kw = {attr: conv(values[key]) for key, (attr, conv) in _ROST_KEYS.items() if key in values}
        synth = None
        if "synth.segments" in values:
            synth = dict(
                segments=imageio.parse_segments(values["synth.segments"]),
                anomalies=imageio.parse_anomalies(values.get("synth.anomalies", "")),
                image_size=(int(values.get("synth.height", 64)), int(values.get("synth.width", 64))),
                noise_level=float(values.get("synth.noise", 0.05)),
            )
    except ValueError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    seed = top.get("seed", 0)
    cfg = PipelineConfig(**top)
    seeds = cfg.component_seeds()
    arch = replace(arch, seed=seeds["cae"], **arch_kw)
    rost_cfg = replace(rost.RostConfig(), seed=seeds["rost"], **rost_kw)
    synth_spec = imageio.SynthSpec(seed=seeds["synth"], **synth) if synth else None
    return replace(cfg, arch=arch, rost=rost_cfg, synth=synth_spec, seed=seed)


def load_config(path=None, overrides=None):
    values = read_config_file(path) if path else {}
    values.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def synth(cfg):
    if cfg.synth is None:
        raise ConfigError("no synthetic mission configured (set synth.segments)")
    frames, labels = imageio.generate_synthetic_mission(cfg.synth)
    imageio.export_mission(frames, labels, cfg.dataset_dir)
    return len(frames)


def load_frames(cfg, size=None):
    frames = imageio.load_sequence(cfg.dataset_dir, cfg.data_pattern)
    if size is not None:
        frames = [imageio.resize_frame(f, size) for f in frames]
    return frames


def train_cae(cfg, progress=None):
    frames = load_frames(cfg, cfg.arch.input[:2])
    if cfg.arch.input[2] != 3:
        raise ConfigError("CAE input must have 3 channels")
    net = cae.CaeNetwork.initialize(cfg.arch)
    cfg.out.mkdir(parents=True, exist_ok=True)
    net, history = cae.train(net, frames, log=progress)
    cae.save_network(net, cfg.model_path)
    cae.save_loss_history(history, cfg.loss_path)
    return net, history


def load_trained_cae(cfg):
    if not cfg.model_path.is_file():
        raise DataError(f"{cfg.model_path}: no trained CAE (run train-cae first)")
    net = cae.load_network(cfg.model_path)
    a, b = net.arch, cfg.arch
    if (a.input, a.layers) != (b.input, b.layers):
        raise ConfigError(f"{cfg.model_path}: model architecture {a.input}/{a.layers} does not match config")
    return net


def feature_grids(cfg, frames, net=None):
    """Per-frame (rows, cols, dim) feature grids for the configured path."""
    if cfg.features == "cae":
        net = net if net is not None else load_trained_cae(cfg)
        resized = [imageio.resize_frame(f, cfg.arch.input[:2]) for f in frames]
        return [cae.extract_lca(net, f) for f in resized]
    return [vocab.baseline_descriptor_grid(f, cfg.baseline_grid, cfg.baseline_patch) for f in frames]


def fit_vocab(cfg, frames=None, grids=None):
    if grids is None:
        frames = frames if frames is not None else load_frames(cfg)
        grids = feature_grids(cfg, frames)
    pooled = np.concatenate([g.reshape(-1, g.shape[2]) for g in grids])
    book = vocab.kmeans_fit(pooled, cfg.vocab_size, seed=cfg.component_seeds()["kmeans"],
                            max_iters=cfg.kmeans_max_iters, tol=cfg.kmeans_tol)
    cfg.out.mkdir(parents=True, exist_ok=True)
    vocab.save_codebook(book, cfg.codebook_path())
    return book


def _threads():
    try:
        return max(1, int(os.environ.get("SEATERRA_THREADS", "1")))
    except ValueError:
        raise ConfigError("SEATERRA_THREADS must be an integer") from None


def _ingest_serial(model, frame_words, budget):
    for words in frame_words:
        model.add_observations(words)
        model.refine(budget)


def _ingest_concurrent(model, frame_words, interval_s):
    """Ingest on this thread while a worker refines continuously (demo mode)."""
    stop = threading.Event()

    def worker():
        while not stop.is_set():
            if model.times:
                model.refine(1)
            else:
                time.sleep(0.001)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    try:
        for words in frame_words:
            model.add_observations(words)
            time.sleep(interval_s)
    finally:
        stop.set()
        thread.join()


def run(cfg, concurrent=False, interval_ms=200):
    """Stream every frame into a fresh topic model and export its outputs."""
    frames = load_frames(cfg)
    net = load_trained_cae(cfg) if cfg.features == "cae" else None
    grids = feature_grids(cfg, frames, net)
    book_path = cfg.codebook_path()
    if book_path.is_file():
        book = vocab.load_codebook(book_path)
        if book.size != cfg.vocab_size or book.dim != grids[0].shape[2]:
            raise ConfigError(f"{book_path}: codebook shape {book.size}x{book.dim} does not match config")
    else:
        book = fit_vocab(cfg, grids=grids)

    frame_words = []
    for frame, grid in zip(frames, grids):
        ids = vocab.quantize_many(book, grid.reshape(-1, grid.shape[2]))
        frame_words.append(vocab.words_from_grid(ids, grid.shape[:2], frame.t))

    model = rost.RostModel(replace(cfg.rost, vocab_size=book.size))
    if concurrent and _threads() >= 2:
        _ingest_concurrent(model, frame_words, interval_ms / 1000.0)
    else:
        _ingest_serial(model, frame_words, cfg.budget)

    out = cfg.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    times = model.times
    timeline, perp, scenes = [], [], []
    for t in times:
        props = model.topic_proportions(t)
        timeline.extend((t, k, repr(float(p))) for k, p in enumerate(props) if p > 0)
        perp.append((t, repr(model.perplexity(t))))
        scenes.append((t, model.scene_label(t)))
    _write_csv(out / "timeline.csv", ["t", "topic", "proportion"], timeline)
    _write_csv(out / "perplexity.csv", ["t", "perplexity"], perp)
    _write_csv(out / "scene_labels.csv", ["t", "scene"], scenes)
    vocab.save_words_csv([w for ws in frame_words for w in ws], out / "words.csv")
    if net is not None:
        errors = [(f.t, repr(cae.reconstruction_error(net, imageio.resize_frame(f, cfg.arch.input[:2]))))
                  for f in frames]
        _write_csv(out / "reconstruction_error.csv", ["t", "error"], errors)
    rost.save_checkpoint(model, out / "rost.ckpt")
    return model


def evaluate(cfg):
    out = cfg.run_dir()
    needed = [out / "scene_labels.csv", out / "perplexity.csv", out / "timeline.csv", out / "rost.ckpt"]
    missing = [str(p) for p in needed if not p.is_file()]
    if missing:
        raise DataError(f"missing run outputs: {', '.join(missing)} (run 'run' first)")
    labels = imageio.load_labels(cfg.labels_path)
    scenes = [int(v) for v in evaluation.read_series_csv(out / "scene_labels.csv", "scene")]
    perp = evaluation.read_series_csv(out / "perplexity.csv", "perplexity")
    if len(scenes) != len(labels):
        raise DataError(f"{cfg.labels_path}: {len(labels)} annotation rows but the run has {len(scenes)} frames")
    model = rost.load_checkpoint(out / "rost.ckpt")
    bins = evaluation.bin_perplexity(perp)
    extra = {"features": cfg.features}
    recon_path = out / "reconstruction_error.csv"
    if recon_path.is_file():
        recon_bins = evaluation.bin_perplexity(evaluation.read_series_csv(recon_path, "error"))
        extra["nmi_interest_reconstruction"] = evaluation.normalized_mi(labels.interest, recon_bins.bins)
    report = evaluation.mi_report(scenes, labels, bins, k_discovered=model.K, extra=extra)
    evaluation.write_report(report, out / "report.json")
    evaluation.timeline_svg(out / "timeline.csv", perp, out / "timeline.svg")
    return report


def summary(cfg):
    """Side-by-side table of whichever feature paths have a report."""
    lines = [f"{'features':<10} {'K':>3} {'nmi_terrain':>12} {'nmi_interest':>13}"]
    found = False
    for path in FEATURE_PATHS:
        report_path = cfg.run_dir(path) / "report.json"
        if not report_path.is_file():
            continue
        found = True
        r = json.loads(report_path.read_text())
        lines.append(f"{path:<10} {r['K_discovered']:>3} {r['nmi_terrain']:>12.4f} {r['nmi_interest']:>13.4f}")
    if not found:
        raise DataError(f"no report.json under {cfg.out} (run 'eval' first)")
    return "\n".join(lines)
