"""Command-line pipeline: world and corpus generation, supervised
fine-tuning, candidate generation, preference-set construction, preference
training, evaluation, and experiment comparison.

Every command is deterministic given its inputs and --seed, overwrites its
outputs identically when rerun, and writes exactly one manifest next to
its primary output. Exit codes: 2 missing or garbled input, 3 invalid
configuration, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import FORMAT_VERSION, __version__
from .manifest import input_digest, load_manifest, sha256_file, write_manifest
from .metrics import METRIC_NAMES
from .model import load_checkpoint, save_checkpoint
from .prefset import (
    CandidateSampling,
    SetConstraints,
    baseline_records,
    build_prefset_records,
    default_constraints,
    generate_candidates,
    load_candidates,
    load_prefset,
    rejection_report,
    save_candidates,
    save_prefset,
)
from .synthtask import load_corpus, load_world, make_corpus, make_world, save_corpus, save_world
from .training import (
    EvalReport,
    TrainingConfig,
    TrainingDiverged,
    compare_experiments,
    evaluate,
    load_config,
    run_preference_stage,
    run_sft,
    write_text,
)

EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_DIVERGED = 4


class InputError(Exception):
    pass


class ConfigError(Exception):
    pass


def _now() -> datetime:
    return datetime.now(timezone.utc)


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_config(path) -> TrainingConfig:
    _need(path, "config file")
    try:
        return load_config(path)
    except (ValueError, KeyError) as e:
        raise ConfigError(str(e)) from e


def _load(loader, path, what: str):
    _need(path, what)
    try:
        return loader(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise InputError(f"garbled {what} {path}: {e}") from e


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_make_world(args) -> int:
    started = _now()
    world = make_world(
        seed=args.seed,
        n_text=args.n_text,
        n_speech=args.n_speech,
        n_speakers=args.n_speakers,
        n_symbols=args.n_symbols,
    )
    save_world(world, args.out)
    write_manifest("make-world", args.out, {}, [args.out], started,
                   extra={"seed": args.seed})
    print(f"world: {world.vocab.n_speech} output tokens, {world.n_speakers} speakers, "
          f"{world.n_symbols} symbols -> {args.out}")
    return 0


def cmd_make_corpus(args) -> int:
    started = _now()
    world = _load(load_world, args.world, "world file")
    total = args.n_items + args.heldout_items
    items = make_corpus(world, total, seed=args.seed)
    train, heldout = items[: args.n_items], items[args.n_items :]
    save_corpus(train, args.out)
    outputs = [args.out]
    if heldout:
        save_corpus(heldout, args.heldout_out)
        outputs.append(args.heldout_out)
    write_manifest("make-corpus", args.out, {"world": args.world}, outputs, started,
                   extra={"seed": args.seed, "n_items": args.n_items,
                          "heldout_items": args.heldout_items})
    print(f"corpus: {len(train)} train items -> {args.out}"
          + (f", {len(heldout)} held-out -> {args.heldout_out}" if heldout else ""))
    return 0


def cmd_sft(args) -> int:
    started = _now()
    config = _load_config(args.config).with_stage("sft")
    world = _load(load_world, args.world, "world file")
    corpus = _load(lambda p: load_corpus(world, p), args.corpus, "corpus file")
    try:
        model, log = run_sft(config, corpus)
    except TrainingDiverged as e:
        last = str(args.out) + ".last-good"
        save_checkpoint(e.checkpoint, last)
        print(f"training diverged at step {e.step}; last-good checkpoint: {last}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(model, args.out)
    outputs = [args.out]
    if args.log_out:
        write_text(args.log_out, log.train_csv())
        outputs.append(args.log_out)
    if args.figure_out:
        from .figures import render_training_curves

        render_training_curves(log, args.figure_out)
        outputs.append(args.figure_out)
    write_manifest("sft", args.out, {"config": args.config, "world": args.world,
                                     "corpus": args.corpus},
                   outputs, started, config_hash=config.config_hash())
    print(f"sft: {config.steps} steps, final ce {log.records[-1].ce:.4f} -> {args.out}")
    return 0


def cmd_gen_candidates(args) -> int:
    started = _now()
    world = _load(load_world, args.world, "world file")
    corpus = _load(lambda p: load_corpus(world, p), args.corpus, "corpus file")
    model = _load(load_checkpoint, args.model, "model checkpoint")
    sampling = CandidateSampling(temperature=args.temperature, top_k=args.top_k)
    cands = generate_candidates(
        model, world, corpus, n_per_prompt=args.n, sampling=sampling,
        base_seed=args.seed, workers=args.workers,
    )
    save_candidates(corpus, cands, args.out)
    write_manifest("gen-candidates", args.out,
                   {"model": args.model, "world": args.world, "corpus": args.corpus},
                   [args.out], started,
                   extra={"seed": args.seed, "n_per_prompt": args.n,
                          "temperature": args.temperature, "top_k": args.top_k})
    n_total = sum(len(c) for c in cands)
    print(f"candidates: {n_total} samples over {len(corpus)} prompts -> {args.out}")
    return 0


def cmd_build_prefset(args) -> int:
    started = _now()
    loaded = _load(load_candidates, args.candidates, "candidates file")
    metric_names = tuple(args.metrics.split(","))
    for m in metric_names:
        if m not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {m!r}; choose from {METRIC_NAMES}")
    if args.no_constraints:
        constraints = SetConstraints.none()
    else:
        constraints = default_constraints(
            metric_names, sim_gap=args.sim_gap, prosody_gap=args.prosody_gap
        )
        if args.no_zero_cer:
            constraints = SetConstraints(exact_w={}, min_gap=constraints.min_gap)
    records = build_prefset_records(loaded, metric_names, constraints)
    save_prefset(records, args.out)
    report = rejection_report(records)
    write_manifest("build-prefset", args.out, {"candidates": args.candidates},
                   [args.out], started,
                   extra={"metrics": list(metric_names), "report": report})
    for k, v in report.items():
        print(f"{k}: {v}")
    print(f"prefset -> {args.out}")
    return 0


def cmd_train(args) -> int:
    started = _now()
    stage = "dpo-only" if args.mode == "dpo-only" else "mpo"
    config = _load_config(args.config).with_stage(stage)
    world = _load(load_world, args.world, "world file")
    heldout = _load(lambda p: load_corpus(world, p), args.heldout, "held-out corpus")
    sft_ckpt = _load(load_checkpoint, args.sft, "sft checkpoint")
    inputs = {"config": args.config, "world": args.world, "heldout": args.heldout,
              "sft": args.sft}
    if args.mode == "combined-rankings":
        if not args.candidates:
            raise InputError("train --mode combined-rankings requires --candidates")
        loaded = _load(load_candidates, args.candidates, "candidates file")
        records = baseline_records(loaded)
        inputs["candidates"] = args.candidates
    else:
        if not args.prefset:
            raise InputError(f"train --mode {args.mode} requires --prefset")
        records = _load(load_prefset, args.prefset, "preference dataset")
        inputs["prefset"] = args.prefset
    try:
        model, log = run_preference_stage(config, sft_ckpt, records, world, heldout)
    except TrainingDiverged as e:
        last = str(args.out) + ".last-good"
        save_checkpoint(e.checkpoint, last)
        print(f"training diverged at step {e.step}; last-good checkpoint: {last}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(model, args.out)
    outputs = [args.out]
    if args.log_out:
        write_text(args.log_out, log.train_csv())
        outputs.append(args.log_out)
    if args.eval_out:
        write_text(args.eval_out, log.eval_csv())
        outputs.append(args.eval_out)
    if args.figure_out:
        from .figures import render_training_curves

        render_training_curves(log, args.figure_out)
        outputs.append(args.figure_out)
    write_manifest("train", args.out, inputs, outputs, started,
                   config_hash=config.config_hash(), extra={"mode": args.mode})
    final = log.records[-1]
    ev = log.evals[-1]
    print(f"{args.mode}: {config.steps} steps; final dpo {final.dpo:.4f}, ce {final.ce:.4f}; "
          f"held-out cer {ev.cer:.4f}, spk_sim {ev.spk_sim:.4f}, prosody {ev.prosody:.4f} -> {args.out}")
    return 0


def _report_to_json(rep: EvalReport) -> dict:
    return {
        "n_items": rep.n_items,
        "mean_cer": rep.mean_cer,
        "mean_spk_sim": rep.mean_spk_sim,
        "mean_prosody": rep.mean_prosody,
        "mean_ce": rep.mean_ce,
        "heldout_digest": rep.heldout_digest,
        "rows": rep.rows,
    }


def _report_from_json(doc: dict) -> EvalReport:
    return EvalReport(
        n_items=int(doc["n_items"]),
        mean_cer=float(doc["mean_cer"]),
        mean_spk_sim=float(doc["mean_spk_sim"]),
        mean_prosody=float(doc["mean_prosody"]),
        mean_ce=float(doc["mean_ce"]),
        rows=doc["rows"],
        heldout_digest=doc["heldout_digest"],
    )


def cmd_eval(args) -> int:
    started = _now()
    world = _load(load_world, args.world, "world file")
    heldout = _load(lambda p: load_corpus(world, p), args.heldout, "held-out corpus")
    model = _load(load_checkpoint, args.model, "model checkpoint")
    rep = evaluate(model, world, heldout)
    rep.heldout_digest = sha256_file(args.heldout)
    with open(args.out, "w") as f:
        json.dump(_report_to_json(rep), f, sort_keys=True)
        f.write("\n")
    outputs = [args.out]
    if args.per_item_out:
        lines = ["index,cer,spk_sim,prosody_rmse,n_tokens"]
        for r in rep.rows:
            lines.append(f"{r['index']},{r['cer']!r},{r['spk_sim']!r},{r['prosody_rmse']!r},{r['n_tokens']}")
        write_text(args.per_item_out, "\n".join(lines) + "\n")
        outputs.append(args.per_item_out)
    write_manifest("eval", args.out,
                   {"model": args.model, "world": args.world, "heldout": args.heldout},
                   outputs, started)
    print(f"eval: cer {rep.mean_cer:.4f}, spk_sim {rep.mean_spk_sim:.4f}, "
          f"prosody {rep.mean_prosody:.4f}, ce {rep.mean_ce:.4f} over {rep.n_items} items -> {args.out}")
    return 0


def cmd_compare(args) -> int:
    started = _now()
    labels = args.labels.split(",") if args.labels else None
    if labels and len(labels) != len(args.reports):
        raise ConfigError("--labels must name every report")
    entries = []
    digests = set()
    for i, path in enumerate(args.reports):
        rep = _load(lambda p: _report_from_json(json.load(open(p))), path, "eval report")
        try:
            man = load_manifest(path)
        except FileNotFoundError as e:
            raise InputError(f"missing manifest for eval report {path}") from e
        digest = input_digest(man, "heldout")
        digests.add(digest)
        label = labels[i] if labels else Path(path).stem
        entries.append((label, rep))
    if len(digests) > 1:
        raise InputError(
            f"eval reports disagree on held-out corpus digest: {sorted(map(str, digests))}"
        )
    table = compare_experiments(entries)
    write_text(args.csv_out, table.to_csv())
    outputs = [args.csv_out]
    if args.text_out:
        write_text(args.text_out, table.to_text())
        outputs.append(args.text_out)
    if args.figure_out:
        from .figures import render_comparison

        render_comparison(table, args.figure_out)
        outputs.append(args.figure_out)
    write_manifest("compare", args.csv_out,
                   {f"report{i}": p for i, p in enumerate(args.reports)},
                   outputs, started)
    print(table.to_text())
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpo", description=__doc__)
    p.add_argument(
        "--version", action="version",
        version=f"mpo {__version__} (artifact format {FORMAT_VERSION}, config schema 1)",
    )
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("make-world", help="generate the synthetic decoding tables")
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--n-text", type=int, default=32)
    q.add_argument("--n-speech", type=int, default=96)
    q.add_argument("--n-speakers", type=int, default=4)
    q.add_argument("--n-symbols", type=int, default=20)
    q.set_defaults(fn=cmd_make_world)

    q = sub.add_parser("make-corpus", help="generate (prompt, reference) items")
    q.add_argument("--world", required=True)
    q.add_argument("--n-items", type=int, required=True)
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--heldout-items", type=int, default=0)
    q.add_argument("--heldout-out", default="heldout.jsonl")
    q.set_defaults(fn=cmd_make_corpus)

    q = sub.add_parser("sft", help="supervised fine-tuning from scratch")
    q.add_argument("--config", required=True)
    q.add_argument("--world", required=True)
    q.add_argument("--corpus", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--log-out")
    q.add_argument("--figure-out")
    q.set_defaults(fn=cmd_sft)

    q = sub.add_parser("gen-candidates", help="sample and score candidates per prompt")
    q.add_argument("--model", required=True)
    q.add_argument("--world", required=True)
    q.add_argument("--corpus", required=True)
    q.add_argument("--n", type=int, default=10)
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--temperature", type=float, default=1.2)
    q.add_argument("--top-k", type=int, default=12)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_gen_candidates)

    q = sub.add_parser("build-prefset", help="construct preference sets from scored candidates")
    q.add_argument("--candidates", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--metrics", default=",".join(METRIC_NAMES))
    q.add_argument("--sim-gap", type=float, default=0.1)
    q.add_argument("--prosody-gap", type=float, default=0.1)
    q.add_argument("--no-zero-cer", action="store_true")
    q.add_argument("--no-constraints", action="store_true")
    q.set_defaults(fn=cmd_build_prefset)

    q = sub.add_parser("train", help="preference optimization from an sft checkpoint")
    q.add_argument("--mode", choices=("dpo-only", "mpo", "combined-rankings"), required=True)
    q.add_argument("--config", required=True)
    q.add_argument("--world", required=True)
    q.add_argument("--sft", required=True)
    q.add_argument("--prefset")
    q.add_argument("--candidates")
    q.add_argument("--heldout", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--log-out")
    q.add_argument("--eval-out")
    q.add_argument("--figure-out")
    q.set_defaults(fn=cmd_train)

    q = sub.add_parser("eval", help="greedy-decode a checkpoint on held-out items")
    q.add_argument("--model", required=True)
    q.add_argument("--world", required=True)
    q.add_argument("--heldout", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--per-item-out")
    q.set_defaults(fn=cmd_eval)

    q = sub.add_parser("compare", help="tabulate eval reports against a baseline")
    q.add_argument("--reports", nargs="+", required=True)
    q.add_argument("--labels")
    q.add_argument("--csv-out", required=True)
    q.add_argument("--text-out")
    q.add_argument("--figure-out")
    q.set_defaults(fn=cmd_compare)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
