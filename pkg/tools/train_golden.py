"""Produce the golden artifacts used by the acceptance tests.

Trains the default-config target on the bundled corpus with the default
pipeline settings, then records the sensitivity table.  Everything is
deterministic given this machine's BLAS; the artifacts are checked in so
the test suite does not retrain on every run.

    python tools/train_golden.py
"""

import json
import math
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from specprune.perf import tune_allocator  # noqa: E402

tune_allocator()

from specprune.checkpoint import save_checkpoint  # noqa: E402
from specprune.cli import DEFAULT_CONFIG, write_json_atomic  # noqa: E402
from specprune.corpus import bundled_corpus_path, load_corpus, sample_batch  # noqa: E402
from specprune.fit import accumulate_fit, fit_report  # noqa: E402
from specprune.model import ModelConfig, init_model  # noqa: E402
from specprune.train import train  # noqa: E402

OUT_DIR = os.path.normpath(os.path.join(os.path.dirname(__file__), "..", "golden"))


def main():
    os.makedirs(OUT_DIR, exist_ok=True)
    cfg = DEFAULT_CONFIG
    corpus = load_corpus(bundled_corpus_path())
    model = init_model(ModelConfig(**cfg["model"]))
    tr = cfg["train"]
    t0 = time.perf_counter()
    result = train(
        model,
        corpus,
        steps=tr["steps"],
        lr=tr["lr"],
        rng=np.random.default_rng(tr["seed"]),
        batch_size=tr["batch_size"],
        seq_len=tr["seq_len"],
    )
    train_s = time.perf_counter() - t0
    target = result.model
    save_checkpoint(target, os.path.join(OUT_DIR, "target.ckpt"))

    ft = cfg["fit"]
    rng = np.random.default_rng(ft["seed"])
    batches = [
        sample_batch(corpus, ft["batch_size"], ft["seq_len"], rng)
        for _ in range(ft["batches"])
    ]
    t0 = time.perf_counter()
    table = accumulate_fit(
        target,
        batches,
        metadata={
            "corpus": corpus.name,
            "seed": ft["seed"],
            "batches": ft["batches"],
            "batch_size": ft["batch_size"],
            "seq_len": ft["seq_len"],
        },
    )
    fit_s = time.perf_counter() - t0
    write_json_atomic(os.path.join(OUT_DIR, "fit_report.json"), fit_report(table))

    smoothed = result.smoothed(window=100)
    metrics = {
        "config": cfg,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "final_smoothed_loss": smoothed[-1],
        "loss_threshold": math.log(257) * 0.75,
        "train_seconds": round(train_s, 1),
        "fit_seconds": round(fit_s, 1),
    }
    write_json_atomic(os.path.join(OUT_DIR, "metrics.json"), metrics)
    print(json.dumps(metrics, indent=2))


if __name__ == "__main__":
    main()
