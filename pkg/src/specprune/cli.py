"""Command-line entry point: train -> fit -> prune -> generate/bench/verify.

A JSON config file provides per-stage blocks (model, train, fit, prune,
decode); command-line flags override individual values.  Every artifact is
written atomically (temp file + rename), and reports keep timing-derived
numbers in a separate subtree so reruns can be diffed byte-for-byte.

The environment variable SDFP_PRECISION (f32 | f64) selects the scalar
precision used by the bench and verify subcommands.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import fit as fit_mod
from .checkpoint import load_checkpoint, save_checkpoint, write_atomic
from .corpus import Corpus, bundled_corpus_path, load_corpus, load_corpus_manifest, sample_batch
from .errors import ConfigError, SpecPruneError, UsageError
from .model import Model, ModelConfig, init_model
from .pruning import build_draft, draft_cost_model
from .specdec import GenerationParams, spec_generate, vanilla_generate
from .train import train

DEFAULT_CONFIG: dict = {
    "model": {
        "vocab_size": 257,
        "d_model": 128,
        "n_heads": 8,
        "n_layers": 8,
        "d_ff": 512,
        "max_context": 256,
        "rng_seed": 0,
    },
    "train": {"steps": 2000, "lr": 0.05, "batch_size": 8, "seq_len": 48, "seed": 1},
    "fit": {"batches": 64, "batch_size": 8, "seq_len": 128, "seed": 2},
    "prune": {"attn_ratio": 0.5, "ffn_ratio": 0.35},
    "decode": {"k": 4, "max_len": 128, "mode": "greedy", "temperature": 1.0, "seed": 3},
}


def resolve_precision() -> type:
    """Scalar dtype for test/bench modes, from SDFP_PRECISION."""
    value = os.environ.get("SDFP_PRECISION", "f32").strip().lower()
    if value == "f32":
        return np.float32
    if value == "f64":
        return np.float64
    raise ConfigError(f"SDFP_PRECISION must be f32 or f64, got {value!r}")


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                user = json.load(f)
        except OSError as exc:
            raise UsageError(f"cannot read config {path!r}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
        for block, values in user.items():
            if block not in cfg:
                raise ConfigError(f"unknown config block {block!r}")
            for key, value in values.items():
                if key not in cfg[block]:
                    raise ConfigError(f"unknown config field {block}.{key}")
                cfg[block][key] = value
    return cfg


def validate_config(cfg: dict) -> None:
    """Check every block before any stage runs."""
    ModelConfig(**cfg["model"]).validate()
    tr = cfg["train"]
    if tr["steps"] < 0:
        raise ConfigError("train.steps must be >= 0")
    if not tr["lr"] > 0:
        raise ConfigError("train.lr must be > 0")
    if tr["batch_size"] < 1 or tr["seq_len"] < 1:
        raise ConfigError("train.batch_size and train.seq_len must be >= 1")
    ft = cfg["fit"]
    if ft["batches"] < 1 or ft["batch_size"] < 1 or ft["seq_len"] < 1:
        raise ConfigError("fit.batches, fit.batch_size, fit.seq_len must be >= 1")
    pr = cfg["prune"]
    for name in ("attn_ratio", "ffn_ratio"):
        if not (0.0 <= pr[name] < 1.0):
            raise ConfigError(f"prune.{name} must be in [0, 1)")
    GenerationParams(
        k=cfg["decode"]["k"],
        max_len=cfg["decode"]["max_len"],
        mode=cfg["decode"]["mode"],
        temperature=cfg["decode"]["temperature"],
        seed=cfg["decode"]["seed"],
    ).validate()


def write_json_atomic(path: str, payload: dict) -> None:
    write_atomic(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def write_text_atomic(path: str, text: str) -> None:
    write_atomic(path, text.encode())


def _load_corpus_arg(args) -> Corpus:
    if getattr(args, "manifest", None):
        return load_corpus_manifest(args.manifest)
    return load_corpus(args.corpus)


def decode_text(tokens) -> str:
    return bytes(t for t in tokens if 0 <= t < 256).decode("utf-8", errors="replace")


def _corpus_prompts(corpus: Corpus, n: int, length: int, seed: int) -> list[list[int]]:
    """Prompt windows drawn from the held-out region."""
    rng = np.random.default_rng(seed)
    lo, hi = corpus.holdout_window()
    starts = rng.integers(lo, hi - length, size=n)
    return [corpus.tokens[s : s + length].tolist() for s in starts]


def _decode_params(args) -> GenerationParams:
    return GenerationParams(
        k=args.k,
        max_len=args.max_len,
        mode=args.mode,
        temperature=args.temperature,
        seed=args.seed,
        eos_token=None if args.no_eos else 256,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    for key in ("steps", "lr", "batch_size", "seq_len", "seed"):
        value = getattr(args, key)
        if value is not None:
            cfg["train"][key] = value
    validate_config(cfg)
    corpus = _load_corpus_arg(args)
    model = init_model(ModelConfig(**cfg["model"]))
    tr = cfg["train"]
    result = train(
        model,
        corpus,
        steps=tr["steps"],
        lr=tr["lr"],
        rng=np.random.default_rng(tr["seed"]),
        batch_size=tr["batch_size"],
        seq_len=tr["seq_len"],
    )
    save_checkpoint(result.model, args.out)
    if args.curve_out:
        lines = ["step,loss"] + [f"{s},{v!r}" for s, v in result.curve]
        write_text_atomic(args.curve_out, "\n".join(lines) + "\n")
    print(
        f"trained {tr['steps']} steps; per-token loss "
        f"{result.initial_loss:.4f} -> {result.final_loss:.4f}; wrote {args.out}"
    )
    return 0


def cmd_fit(args) -> int:
    model = load_checkpoint(args.checkpoint)
    corpus = _load_corpus_arg(args)
    rng = np.random.default_rng(args.seed)
    batches = [
        sample_batch(corpus, args.batch_size, args.seq_len, rng)
        for _ in range(args.batches)
    ]
    table = fit_mod.accumulate_fit(
        model,
        batches,
        per_sample=args.per_sample,
        metadata={
            "corpus": corpus.name,
            "seed": args.seed,
            "batches": args.batches,
            "batch_size": args.batch_size,
            "seq_len": args.seq_len,
        },
    )
    write_json_atomic(args.out, fit_mod.fit_report(table))
    print(fit_mod.format_report_table(table))
    print(f"wrote {args.out}")
    return 0


def cmd_prune(args) -> int:
    model = load_checkpoint(args.checkpoint)
    with open(args.fit_report, "r", encoding="utf-8") as f:
        table = fit_mod.parse_report(json.load(f))
    prune_set = fit_mod.select_prune_set(table, args.attn_ratio, args.ffn_ratio)
    draft = build_draft(model, prune_set)
    save_checkpoint(draft, args.out)
    cost = draft_cost_model(model.config, prune_set)
    pruned = sorted(map(str, prune_set.sublayers))
    print(f"pruned {len(pruned)} sublayers: {', '.join(pruned)}")
    print(f"draft relative cost {cost:.3f}; wrote {args.out}")
    return 0


def cmd_generate(args) -> int:
    target = load_checkpoint(args.target_ckpt)
    if args.prompt is not None:
        prompt = list(args.prompt.encode("utf-8"))
    elif args.prompt_file is not None:
        with open(args.prompt_file, "rb") as f:
            prompt = list(f.read())
    else:
        raise UsageError("generate needs --prompt or --prompt-file")
    params = _decode_params(args)
    if args.draft_ckpt is None:
        result = vanilla_generate(target, prompt, params)
    else:
        draft = load_checkpoint(args.draft_ckpt)
        result = spec_generate(target, draft, prompt, params)
    print(decode_text(result.tokens))
    if args.round_log:
        log = {
            "mode": params.mode,
            "tokens": result.tokens,
            "target_calls": result.target_calls,
            "draft_calls": result.draft_calls,
            "truncated": result.truncated,
            "rounds": None
            if result.rounds is None
            else [
                {
                    "proposed": r.proposed,
                    "accept_probs": r.accept_probs,
                    "accepted_count": r.accepted_count,
                    "committed": r.committed,
                }
                for r in result.rounds
            ],
        }
        write_json_atomic(args.round_log, log)
    return 0


def _bench_report(args, target: Model, draft: Model, corpus: Corpus) -> dict:
    params = _decode_params(args)
    prompts = _corpus_prompts(corpus, args.num_prompts, args.prompt_len, args.prompt_seed)
    report = bench_mod.bench(target, draft, prompts, params, repeats=args.repeats)
    payload = report.to_dict()
    if args.fit_report:
        with open(args.fit_report, "r", encoding="utf-8") as f:
            table = fit_mod.parse_report(json.load(f))
        study = bench_mod.prune_ordering_study(
            target,
            table,
            corpus,
            ratio=args.study_ratio,
            seeds=[int(s) for s in args.study_seeds.split(",")],
            batch_size=args.study_batch_size,
            seq_len=args.study_seq_len,
        )
        payload["deterministic"]["ordering_study"] = study.to_dict()
    return payload


def cmd_bench(args) -> int:
    dtype = resolve_precision()
    target = load_checkpoint(args.target_ckpt).astype(dtype)
    draft = load_checkpoint(args.draft_ckpt).astype(dtype)
    corpus = _load_corpus_arg(args)
    payload = _bench_report(args, target, draft, corpus)
    write_json_atomic(args.out, payload)
    det, tim = payload["deterministic"], payload["timing"]
    print(
        f"spec: {det['spec']['tokens']} tokens, block efficiency "
        f"{det['spec']['block_efficiency']:.3f}, alpha {det['spec']['alpha_token']:.3f}"
    )
    print(
        f"speedup {tim['speedup']:.3f}x measured, {det['analytic_speedup']:.3f}x analytic "
        f"(draft cost {det['draft_cost']:.3f})"
    )
    print(det["note"])
    print(f"wrote {args.out}")
    return 0


def cmd_verify(args) -> int:
    dtype = resolve_precision()
    target = load_checkpoint(args.target_ckpt).astype(dtype)
    draft = load_checkpoint(args.draft_ckpt).astype(dtype)
    corpus = _load_corpus_arg(args)
    contexts = _corpus_prompts(corpus, args.contexts, args.prompt_len, args.prompt_seed)
    results = []
    ok = True
    for i, ctx in enumerate(contexts):
        res = bench_mod.lossless_test(
            target, draft, ctx, n_samples=args.n_samples, m=args.m, seed=args.seed + i
        )
        results.append(res.to_dict())
        if res.exact_max_dev > 1e-12 or res.tv_distance >= 0.02 or res.chi2_pvalue <= 0.001:
            ok = False
    params = GenerationParams(k=args.k, max_len=32, mode="sample", temperature=1.0, seed=args.seed)
    gen = spec_generate(target, draft, contexts[0], params)
    bench_mod.check_accounting(gen)
    payload = {"lossless": results, "accounting": "ok", "passed": ok}
    if args.out:
        write_json_atomic(args.out, payload)
    print(json.dumps(payload["lossless"], indent=2))
    print("verification " + ("PASSED" if ok else "FAILED"))
    return 0 if ok else 1


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    validate_config(cfg)
    os.makedirs(args.outdir, exist_ok=True)
    corpus = _load_corpus_arg(args)

    def path(name: str) -> str:
        return os.path.join(args.outdir, name)

    write_json_atomic(path("config.json"), cfg)

    # train
    model = init_model(ModelConfig(**cfg["model"]))
    tr = cfg["train"]
    result = train(
        model,
        corpus,
        steps=tr["steps"],
        lr=tr["lr"],
        rng=np.random.default_rng(tr["seed"]),
        batch_size=tr["batch_size"],
        seq_len=tr["seq_len"],
    )
    target = result.model
    save_checkpoint(target, path("target.ckpt"))
    curve = ["step,loss"] + [f"{s},{v!r}" for s, v in result.curve]
    write_text_atomic(path("loss_curve.csv"), "\n".join(curve) + "\n")

    # fit
    ft = cfg["fit"]
    rng = np.random.default_rng(ft["seed"])
    batches = [
        sample_batch(corpus, ft["batch_size"], ft["seq_len"], rng)
        for _ in range(ft["batches"])
    ]
    table = fit_mod.accumulate_fit(
        target,
        batches,
        metadata={"corpus": corpus.name, "seed": ft["seed"], "batches": ft["batches"],
                  "batch_size": ft["batch_size"], "seq_len": ft["seq_len"]},
    )
    write_json_atomic(path("fit_report.json"), fit_mod.fit_report(table))

    # prune
    pr = cfg["prune"]
    prune_set = fit_mod.select_prune_set(table, pr["attn_ratio"], pr["ffn_ratio"])
    draft = build_draft(target, prune_set)
    save_checkpoint(draft, path("draft.ckpt"))

    # bench (with the ordering study folded into the report)
    dc = cfg["decode"]
    params = GenerationParams(
        k=dc["k"], max_len=dc["max_len"], mode=dc["mode"],
        temperature=dc["temperature"], seed=dc["seed"],
    )
    prompts = _corpus_prompts(corpus, args.num_prompts, args.prompt_len, args.prompt_seed)
    report = bench_mod.bench(target, draft, prompts, params, repeats=args.repeats,
                             prune_set=prune_set)
    payload = report.to_dict()
    study = bench_mod.prune_ordering_study(
        target, table, corpus, ratio=args.study_ratio,
        seeds=[int(s) for s in args.study_seeds.split(",")],
        batch_size=ft["batch_size"], seq_len=ft["seq_len"],
    )
    payload["deterministic"]["ordering_study"] = study.to_dict()
    write_json_atomic(path("bench_report.json"), payload)

    print(f"pipeline artifacts in {args.outdir}: target.ckpt, loss_curve.csv, "
          f"fit_report.json, draft.ckpt, bench_report.json")
    print(f"final per-token training loss {result.final_loss:.4f}" if result.curve else "")
    print(f"measured speedup {payload['timing']['speedup']:.3f}x; {report.note}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specprune",
        description="Speculative decoding with a sensitivity-pruned draft model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(func=func)
        return p

    def add_corpus_flags(p):
        p.add_argument("--corpus", default=bundled_corpus_path(), help="corpus file (bytes)")
        p.add_argument("--manifest", default=None, help="manifest of document paths (one per line)")

    def add_decode_flags(p, max_len_default=128):
        p.add_argument("--k", type=int, default=4, help="speculation depth")
        p.add_argument("--max-len", type=int, default=max_len_default, help="max new tokens")
        p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
        p.add_argument("--temperature", type=float, default=1.0)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--no-eos", action="store_true", help="ignore the end-of-document token")

    p = add("train", cmd_train, "train the target model on a byte corpus")
    add_corpus_flags(p)
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--lr", type=float, default=None, help="override train.lr")
    p.add_argument("--batch-size", type=int, default=None, help="override train.batch_size")
    p.add_argument("--seq-len", type=int, default=None, help="override train.seq_len")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--curve-out", default=None, help="loss curve CSV path")

    p = add("fit", cmd_fit, "score per-sublayer sensitivity on calibration batches")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    add_corpus_flags(p)
    p.add_argument("--batches", type=int, default=64, help="number of calibration minibatches")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--seed", type=int, default=2)
    p.add_argument("--per-sample", action="store_true",
                   help="normalize per sample instead of per minibatch")
    p.add_argument("--out", required=True, help="sensitivity report JSON path")

    p = add("prune", cmd_prune, "build a draft checkpoint by masking low-scoring sublayers")
    p.add_argument("--checkpoint", required=True, help="target checkpoint")
    p.add_argument("--fit-report", required=True, help="sensitivity report JSON")
    p.add_argument("--attn-ratio", type=float, default=0.5, help="fraction of attention sublayers to prune")
    p.add_argument("--ffn-ratio", type=float, default=0.35, help="fraction of FFN sublayers to prune")
    p.add_argument("--out", required=True, help="draft checkpoint path")

    p = add("generate", cmd_generate, "decode text (vanilla without --draft-ckpt)")
    p.add_argument("--target-ckpt", required=True)
    p.add_argument("--draft-ckpt", default=None, help="draft checkpoint; omit for vanilla decoding")
    p.add_argument("--prompt", default=None, help="prompt text")
    p.add_argument("--prompt-file", default=None, help="file whose bytes are the prompt")
    add_decode_flags(p)
    p.add_argument("--round-log", default=None, help="write per-round JSON log here")

    p = add("bench", cmd_bench, "measure acceptance rate, throughput, speedup")
    p.add_argument("--target-ckpt", required=True)
    p.add_argument("--draft-ckpt", required=True)
    add_corpus_flags(p)
    add_decode_flags(p)
    p.add_argument("--num-prompts", type=int, default=16)
    p.add_argument("--prompt-len", type=int, default=24)
    p.add_argument("--prompt-seed", type=int, default=7)
    p.add_argument("--repeats", type=int, default=5, help="timing repeats (median)")
    p.add_argument("--fit-report", default=None,
                   help="include the pruning-ordering study using this report")
    p.add_argument("--study-ratio", type=float, default=0.25)
    p.add_argument("--study-seeds", default="0,1,2,3,4")
    p.add_argument("--study-batch-size", type=int, default=8)
    p.add_argument("--study-seq-len", type=int, default=64)
    p.add_argument("--out", required=True, help="bench report JSON path")

    p = add("verify", cmd_verify, "losslessness and accounting checks")
    p.add_argument("--target-ckpt", required=True)
    p.add_argument("--draft-ckpt", required=True)
    add_corpus_flags(p)
    p.add_argument("--contexts", type=int, default=3, help="number of test contexts")
    p.add_argument("--prompt-len", type=int, default=24)
    p.add_argument("--prompt-seed", type=int, default=11)
    p.add_argument("--n-samples", type=int, default=200_000)
    p.add_argument("--m", type=int, default=16, help="restricted vocabulary size")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="verification report JSON path")

    p = add("pipeline", cmd_pipeline, "run train, fit, prune, bench in order")
    p.add_argument("--config", default=None, help="pipeline config JSON")
    add_corpus_flags(p)
    p.add_argument("--outdir", required=True, help="artifact directory")
    p.add_argument("--num-prompts", type=int, default=16)
    p.add_argument("--prompt-len", type=int, default=24)
    p.add_argument("--prompt-seed", type=int, default=7)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--study-ratio", type=float, default=0.25)
    p.add_argument("--study-seeds", default="0,1,2,3,4")
    return parser


def main(argv=None) -> int:
    from .perf import tune_allocator

    tune_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpecPruneError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, IndexError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
