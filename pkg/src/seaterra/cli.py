"""Command-line entry point: ``seaterra <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from seaterra import pipeline
from seaterra.errors import SeaterraError

log = logging.getLogger("seaterra")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--features", choices=pipeline.FEATURE_PATHS, help="feature path")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--budget", type=int, metavar="N", help="refinement iterations per ingested frame")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="seaterra", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="render a labelled synthetic mission")
    sub.add_parser("train-cae", parents=[common], help="train the convolutional autoencoder")
    sub.add_parser("fit-vocab", parents=[common], help="fit the k-means visual vocabulary")
    run = sub.add_parser("run", parents=[common], help="stream the mission through the topic model")
    run.add_argument("--concurrent", action="store_true",
                     help="refine on a background thread while ingesting (needs SEATERRA_THREADS >= 2)")
    run.add_argument("--interval-ms", type=int, default=200, help="ingestion interval in concurrent mode")
    ev = sub.add_parser("eval", parents=[common], help="score a run against annotations")
    ev.add_argument("--labels", metavar="PATH", help="labels CSV (default: dataset/labels.csv)")
    sub.add_parser("report", parents=[common], help="print a summary of evaluated runs")
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {
        "seed": args.seed,
        "features": args.features,
        "out": args.out,
        "budget": args.budget,
        "data.labels": getattr(args, "labels", None),
    }
    try:
        cfg = pipeline.load_config(args.config, overrides)
        if args.command == "synth":
            n = pipeline.synth(cfg)
            print(f"wrote {n} frames to {cfg.dataset_dir}")
        elif args.command == "train-cae":
            _, history = pipeline.train_cae(cfg, progress=lambda e, l: log.info("epoch %d loss %.6f", e, l))
            print(f"trained {len(history)} epochs: loss {history[0]:.6f} -> {history[-1]:.6f}")
        elif args.command == "fit-vocab":
            book = pipeline.fit_vocab(cfg)
            print(f"fitted {book.size} words (inertia {book.inertia:.6g}) -> {cfg.codebook_path()}")
        elif args.command == "run":
            model = pipeline.run(cfg, concurrent=args.concurrent, interval_ms=args.interval_ms)
            print(f"ingested {len(model.times)} frames, {model.n_words} words, K={model.K} -> {cfg.run_dir()}")
        elif args.command == "eval":
            report = pipeline.evaluate(cfg)
            print(f"nmi_terrain={report['nmi_terrain']:.4f} nmi_interest={report['nmi_interest']:.4f} "
                  f"K={report['K_discovered']}")
        elif args.command == "report":
            print(pipeline.summary(cfg))
    except SeaterraError as exc:
        print(f"seaterra: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
