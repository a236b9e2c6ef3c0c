"""Acceptance criteria, each printing one PASS/FAIL line.

The end-to-end criteria share one synthetic mission: three terrains of 50
frames each with bright blobs injected at frames 25, 75 and 125.
"""

import csv
import itertools
import json
import math
import time

import numpy as np
import pytest

from seaterra import pipeline
from seaterra.cae import ArchSpec, CaeNetwork, conv_linear, conv_transpose_linear
from seaterra.evaluation import bin_perplexity, mutual_information, normalized_mi
from seaterra.rost import RostConfig, RostModel, perplexity_from_probabilities
from seaterra.vocab import WordObservation, slice_lca

MISSION_CONFIG = """\
seed = 7
budget = 20
cae.preset = test
cae.learning_rate = 0.05
cae.epochs = 40
vocab.size = 64
rost.alpha = 0.1
rost.beta = 25
rost.gamma = 1e-7
synth.segments = stripes:50, checker:50, noise:50
synth.anomalies = 25:bright, 75:bright, 125:bright
"""
BLOB_FRAMES = (25, 75, 125)


def run_mission(out_dir):
    """synth -> train -> run/eval on both feature paths; returns reports and timings."""
    cfg_path = out_dir / "mission.cfg"
    cfg_path.write_text(MISSION_CONFIG + f"out = {out_dir / 'out'}\n")
    cfg = pipeline.load_config(cfg_path)
    start = time.perf_counter()
    pipeline.synth(cfg)
    pipeline.train_cae(cfg)
    result = {"cfg": cfg, "reports": {}, "seconds": {}}
    for features in ("cae", "baseline"):
        path_cfg = pipeline.load_config(cfg_path, {"features": features})
        t0 = time.perf_counter()
        pipeline.run(path_cfg)
        result["reports"][features] = pipeline.evaluate(path_cfg)
        result["seconds"][features] = time.perf_counter() - t0
    result["seconds"]["total"] = time.perf_counter() - start
    return result


@pytest.fixture(scope="module")
def mission(tmp_path_factory):
    return run_mission(tmp_path_factory.mktemp("mission_a"))


def read_column(path, column):
    with open(path, newline="") as fh:
        return [float(r[column]) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# CAE
# ---------------------------------------------------------------------------


def test_gradient_correctness(record_criterion):
    arch = ArchSpec(input=(8, 8, 1), layers=((3, 2, 2), (3, 2, 2)), weight_decay=1e-3)
    net = CaeNetwork.initialize(arch, seed=0)
    rng = np.random.default_rng(0)
    for b in net.enc_biases + net.dec_biases:
        b[...] = rng.uniform(0.05, 0.2, size=b.shape)
    batch = rng.uniform(size=(3, 8, 8, 1))
    start = time.perf_counter()
    analytic = net.gradients(batch)
    worst = 0.0
    for p, g in zip(net.parameters(), analytic):
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + 1e-4
            up = net.loss(batch)
            p[idx] = old - 1e-4
            down = net.loss(batch)
            p[idx] = old
            numeric[idx] = (up - down) / 2e-4
        scale = max(np.linalg.norm(g), np.linalg.norm(numeric))
        worst = max(worst, float(np.linalg.norm(g - numeric) / scale) if scale else 0.0)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 60
    record_criterion("gradient correctness", ok, f"max relative error {worst:.2e} over {len(analytic)} tensors, {elapsed:.2f}s")
    assert ok


def test_adjoint_identity(record_criterion):
    rng = np.random.default_rng(1)
    worst = 0.0
    for i in range(20):
        stride = 1 + i % 2
        x = rng.normal(size=(1, 6, 6, 3))
        w = rng.normal(size=(3, 3, 3, 2))
        cx = conv_linear(x, w, stride)
        y = rng.normal(size=cx.shape)
        lhs = float(np.sum(cx * y))
        rhs = float(np.sum(x * conv_transpose_linear(y, w, stride, (6, 6))))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    ok = worst < 1e-6
    record_criterion("adjoint identity", ok, f"max relative error {worst:.2e} over 20 pairs")
    assert ok


def test_shape_chain(record_criterion):
    arch = ArchSpec.full_scale()
    dims = [s[0] for s in arch.shapes()]
    net = CaeNetwork.initialize(arch)
    lca = net.encode(np.random.default_rng(2).uniform(size=(400, 400, 3)))
    vectors = slice_lca(lca)
    ok = (dims == [400, 200, 100, 50, 25] and lca.shape == (25, 25, 5)
          and len(vectors) == 625 and all(v.values.shape == (5,) for v in vectors))
    record_criterion("shape chain", ok, f"encoder dims {dims}, LCA {lca.shape}, {len(vectors)} vectors")
    assert ok


# ---------------------------------------------------------------------------
# Topic model
# ---------------------------------------------------------------------------


def exact_posterior(words, K, V, alpha, beta):
    """Posterior over every assignment of a single-cell, single-frame model."""
    log_p = {}
    for z in itertools.product(range(K), repeat=len(words)):
        total = 0.0
        for k in range(K):
            members = [v for v, zi in zip(words, z) if zi == k]
            n_k = len(members)
            total += math.lgamma(V * beta) - math.lgamma(n_k + V * beta)
            for v in range(V):
                total += math.lgamma(members.count(v) + beta) - math.lgamma(beta)
            total += math.lgamma(n_k + alpha) - math.lgamma(alpha)
        log_p[z] = total
    peak = max(log_p.values())
    weights = {z: math.exp(lp - peak) for z, lp in log_p.items()}
    norm = sum(weights.values())
    return {z: w / norm for z, w in weights.items()}


def test_gibbs_oracle(record_criterion):
    words = [0, 0, 0, 1, 1, 1]
    cfg = RostConfig(alpha=1.0, beta=1.0, vocab_size=2, cell_size=10, temporal_window=0,
                     refine_recent_bias=1.0, seed=11, fixed_topics=2)
    model = RostModel(cfg)
    model.add_observations([WordObservation(v, (0, i), 0) for i, v in enumerate(words)])
    start = time.perf_counter()
    model.refine(500)  # burn-in
    counts = {}
    sweeps = 50_000
    for _ in range(sweeps):
        model.refine(1)
        z = tuple(model.assignments(0).tolist())
        counts[z] = counts.get(z, 0) + 1
    elapsed = time.perf_counter() - start
    exact = exact_posterior(words, 2, 2, 1.0, 1.0)
    tv = 0.5 * sum(abs(counts.get(z, 0) / sweeps - p) for z, p in exact.items())
    model.check_invariants()
    ok = tv < 0.05 and elapsed < 120
    record_criterion("Gibbs oracle equivalence", ok, f"total variation {tv:.4f} over 64 states, {elapsed:.1f}s")
    assert ok


def test_perplexity_closed_form(record_criterion):
    cases = [
        ([0.5, 0.25], 2 * math.sqrt(2)),
        ([1e-3] * 10, 1000.0),
        ([1.0, 1.0, 1.0], 1.0),
        ([0.1, 0.2, 0.4], math.exp(-(math.log(0.1) + math.log(0.2) + math.log(0.4)) / 3)),
    ]
    worst = max(abs(perplexity_from_probabilities(p) - want) for p, want in cases)
    # same closed form through the model: beta dominates, so every word has p = 1/|V|
    model = RostModel.from_assignments(RostConfig(vocab_size=1000, beta=1e15),
                                       [WordObservation(3, (0, 0), 0), WordObservation(7, (0, 1), 0)], [0, 0])
    worst = max(worst, abs(model.perplexity(0) - 1000.0))
    ok = worst < 1e-9
    record_criterion("perplexity closed form", ok, f"max absolute error {worst:.2e}")
    assert ok


def test_count_invariant_fuzzing(record_criterion):
    rng = np.random.default_rng(2024)
    model = RostModel(RostConfig(vocab_size=7, gamma=0.01, cell_size=2, temporal_window=1, seed=5))
    t = 0
    max_k = grown = retired = 0
    start = time.perf_counter()
    for _ in range(10_000):
        before = model.K
        if not model.times or rng.random() < 0.1:
            n = int(rng.integers(1, 8))
            words = [WordObservation(int(rng.integers(7)), (int(rng.integers(6)), int(rng.integers(6))), t)
                     for _ in range(n)]
            model.add_observations(words)
            t += 1
        else:
            model.refine(1)
        model.check_invariants()
        max_k = max(max_k, model.K)
        grown += model.K > before
        retired += model.K < before
    elapsed = time.perf_counter() - start
    # growth and retirement must both have been exercised for the check to mean anything
    ok = grown > 0 and retired > 0
    record_criterion("count-invariant fuzzing", ok,
                     f"10000 operations over {t} frames, {model.n_words} words, K peaked at {max_k} "
                     f"(grew {grown}x, shrank {retired}x), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def oracle_mi(table):
    n = sum(sum(row) for row in table)
    rows = [sum(row) for row in table]
    cols = [sum(col) for col in zip(*table)]
    total = 0.0
    for i, row in enumerate(table):
        for j, c in enumerate(row):
            if c:
                total += c / n * math.log(c * n / (rows[i] * cols[j]))
    return total


def oracle_entropy(marginal):
    n = sum(marginal)
    return -sum(m / n * math.log(m / n) for m in marginal if m)


def test_nmi_oracle(record_criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(1, 6, size=2))
        table = rng.integers(0, 9, size=shape)
        table[0, 0] += 1
        a, b = [], []
        for (i, j), c in np.ndenumerate(table):
            a += [i] * int(c)
            b += [j] * int(c)
        order = rng.permutation(len(a))
        a, b = np.array(a)[order], np.array(b)[order]
        lists = table.tolist()
        mi = oracle_mi(lists)
        denom = max(oracle_entropy([sum(r) for r in lists]), oracle_entropy([sum(c) for c in zip(*lists)]))
        nmi = mi / denom if denom > 0 else 0.0
        worst = max(worst, abs(mutual_information(a, b) - mi), abs(normalized_mi(a, b) - nmi))
    labels = rng.integers(0, 3, size=200)
    identical = normalized_mi(labels, labels)
    independent = normalized_mi(rng.integers(0, 3, size=200), rng.integers(0, 3, size=200))
    ok = worst < 1e-9 and identical == 1.0 and independent < 0.05
    record_criterion("NMI oracle", ok,
                     f"max error {worst:.1e} on 100 tables; identical {identical}; independent {independent:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# End-to-end mission
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_end_to_end_terrain_recovery(mission, record_criterion):
    hybrid, base = mission["reports"]["cae"], mission["reports"]["baseline"]
    seconds = mission["seconds"]["total"]
    checks = {
        "hybrid NMI >= 0.7": hybrid["nmi_terrain"] >= 0.7,
        "3-5 topics": 3 <= hybrid["K_discovered"] <= 5,
        "under 15 min": seconds < 900,
        "hybrid NMI > baseline NMI": hybrid["nmi_terrain"] > base["nmi_terrain"],
    }
    ok = all(checks.values())
    failed = [name for name, passed in checks.items() if not passed]
    record_criterion(
        "end-to-end terrain recovery", ok,
        f"hybrid NMI {hybrid['nmi_terrain']:.3f} K={hybrid['K_discovered']}; "
        f"baseline NMI {base['nmi_terrain']:.3f} K={base['K_discovered']}; {seconds:.0f}s"
        + (f"; unmet: {', '.join(failed)}" if failed else ""),
    )
    assert ok


@pytest.mark.slow
def test_anomaly_flagging(mission, record_criterion):
    cfg = mission["cfg"]
    details, flagged = [], {}
    sources = {
        "baseline": cfg.run_dir("baseline") / "perplexity.csv",
        "hybrid": cfg.run_dir("cae") / "perplexity.csv",
        "reconstruction": cfg.run_dir("cae") / "reconstruction_error.csv",
    }
    partition_ok = True
    for name, path in sources.items():
        series = read_column(path, "error" if name == "reconstruction" else "perplexity")
        bins = bin_perplexity(series)
        lo, hi = bins.thresholds
        partition_ok &= sum(bins.counts().values()) == len(series) and lo <= hi
        partition_ok &= all(
            b == ("low" if x <= lo else "medium" if x <= hi else "high") for x, b in zip(series, bins.bins)
        )
        flagged[name] = sum(bins.bins[t] != "low" for t in BLOB_FRAMES)
        details.append(f"{name} {flagged[name]}/3 ({','.join(bins.bins[t] for t in BLOB_FRAMES)})")
    # scored on the standard-feature model, the one with the clearest differential response
    ok = flagged["baseline"] >= 2 and partition_ok
    record_criterion("anomaly flagging", ok, "; ".join(details) + f"; partition {'ok' if partition_ok else 'broken'}")
    assert ok


@pytest.mark.slow
def test_determinism(mission, tmp_path_factory, record_criterion):
    second = run_mission(tmp_path_factory.mktemp("mission_b"))
    out_a, out_b = mission["cfg"].out, second["cfg"].out
    compared, differing = 0, []
    for path in sorted(out_a.rglob("*")):
        if path.suffix not in (".csv", ".json"):
            continue
        rel = path.relative_to(out_a)
        compared += 1
        if path.read_bytes() != (out_b / rel).read_bytes():
            differing.append(str(rel))
    same_reports = json.dumps(mission["reports"], sort_keys=True) == json.dumps(second["reports"], sort_keys=True)
    ok = compared > 0 and not differing and same_reports
    record_criterion("determinism", ok,
                     f"{compared} CSV/JSON files compared, {len(differing)} differ" +
                     (f" ({', '.join(differing)})" if differing else ""))
    assert ok
