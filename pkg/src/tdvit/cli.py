"""Command line: ``tdvit {gradcheck,trf,bench,train,eval,generate}``.

Machine output is JSON lines (stdout, or ``--out``); the first record echoes
the effective configuration. Human-readable tables go to stderr.
Exit codes: 0 pass, 1 check failure or training divergence, 2 bad usage.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import contextlib
import dataclasses
import json
import sys
from typing import IO, Iterator

import numpy as np
import yaml

from tdvit import checks, config
from tdvit.backbone import VARIANTS, build_model
from tdvit.errors import ConfigError, TDViTError, TrainingError
from tdvit.streaming import cost_summary, format_cost_table, summary_totals
from tdvit.synthtask import (
    compare,
    evaluate,
    generate_dataset,
    init_head,
    load_weights,
    save_weights,
    write_dataset,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class Emitter:
    def __init__(self, fh: IO[str]):
        self.fh = fh

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


@contextlib.contextmanager
def _output(path: str | None) -> Iterator[Emitter]:
    if path is None:
        yield Emitter(sys.stdout)
        return
    with open(path, "w") as fh:
        yield Emitter(fh)


def _table(text: str) -> None:
    print(text, file=sys.stderr)


# ---------------------------------------------------------------- commands

def cmd_gradcheck(cfg: config.RunConfig, emit: Emitter, args) -> int:
    records = checks.gradient_suite(cfg.seed)
    for r in records:
        emit({"type": "gradcheck", **r})
    ok = all(r["pass"] for r in records)
    emit({"type": "summary", "command": "gradcheck", "pass": ok,
          "max_rel_error": max(r["max_rel_error"] for r in records)})
    _table("\n".join(f"{r['op']:<24} {r['max_rel_error']:.3e}  <= {r['threshold']:.0e}  "
                     f"{'ok' if r['pass'] else 'FAIL'}" for r in records))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_trf(cfg: config.RunConfig, emit: Emitter, args) -> int:
    extra = cfg.toy_model() if cfg.model else None
    records = checks.trf_table(extra, seed=cfg.seed)
    for r in records:
        emit({"type": "trf", **r})
    ok = all(r["pass"] for r in records)
    emit({"type": "summary", "command": "trf", "pass": ok})
    lines = [f"{'config':<22} {'source':<12} {'formula':>7} {'measured':>8}"]
    for r in records:
        lines.append(f"{r['config']:<22} {r['source']:<12} {r['predicted']:>7} {r['measured']:>8}")
    _table("\n".join(lines))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(cfg: config.RunConfig, emit: Emitter, args) -> int:
    ok = True
    for seed in range(cfg.seed, cfg.seed + cfg.bench.seeds):
        model = build_model(dataclasses.replace(cfg.toy_model(), seed=seed))
        result = checks.bench(model, cfg.bench.frames, cfg.stream_mode, seed)
        rows = cost_summary(result["reuse"])
        for row in rows:
            emit({"type": "cost", "seed": seed, **dataclasses.asdict(row), "ratio": row.ratio})
        passed = result["max_abs_diff"] <= cfg.bench.tolerance and result["counters_exact"]
        ok &= passed
        emit({"type": "bench", "seed": seed, "frames": cfg.bench.frames, "mode": cfg.mode,
              "max_abs_diff": result["max_abs_diff"], "counters_exact": result["counters_exact"],
              **summary_totals(rows), "pass": passed})
        _table(format_cost_table(rows) + f"\nseed {seed}: reuse/oracle max |diff| = {result['max_abs_diff']:.3e}")
    emit({"type": "summary", "command": "bench", "pass": ok})
    return EXIT_OK if ok else EXIT_FAIL


def _compare_seed(cfg: config.RunConfig, seed: int):
    t = cfg.train
    return compare(seed, cfg.synth_model(), cfg.synth, t.steps, t.lr, t.batch_size, t.n_train, t.n_test)


def run_comparison(cfg: config.RunConfig) -> list:
    """Paired runs for consecutive seeds; results come back in seed order."""
    seeds = list(range(cfg.seed, cfg.seed + cfg.train.seeds))
    workers = config.worker_count(len(seeds))
    if workers == 1:
        return [_compare_seed(cfg, s) for s in seeds]
    with concurrent.futures.ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_compare_seed, [cfg] * len(seeds), seeds))


def comparison_summary(results, min_delta: float) -> dict:
    occ = {name: [r.metrics.occluded_accuracy for r in runs]
           for name, runs in (("tdvit", [a for a, _ in results]), ("space_only", [b for _, b in results]))}
    deltas = [a - b for a, b in zip(occ["tdvit"], occ["space_only"])]
    delta = float(np.mean(deltas))
    return {
        "seeds": len(results),
        "tdvit_occluded_accuracy": float(np.mean(occ["tdvit"])),
        "space_only_occluded_accuracy": float(np.mean(occ["space_only"])),
        "delta": delta,
        "per_seed_delta": deltas,
        "min_delta": min_delta,
        "meets_target": delta >= min_delta,
    }


def cmd_train(cfg: config.RunConfig, emit: Emitter, args) -> int:
    try:
        results = run_comparison(cfg)
    except TrainingError as exc:
        emit({"type": "error", "command": "train", "error": str(exc), "step": exc.step})
        return EXIT_FAIL
    seeds = range(cfg.seed, cfg.seed + len(results))
    for seed, pair in zip(seeds, results):
        for run in pair:
            emit({"type": "run", "seed": seed, "model": run.name, "params": run.params,
                  "loss_first": run.train.losses[0], "loss_last": run.train.losses[-1],
                  **run.metrics.as_dict()})
    summary = comparison_summary(results, cfg.train.min_delta)
    emit({"type": "summary", "command": "train", **summary})
    if args.weights:
        with open(args.weights, "wb") as fh:
            save_weights(fh, results[0][0].model, results[0][0].head)
    lines = [f"{'seed':>4} {'model':<11} {'params':>7} {'acc':>6} {'occ_acc':>7} {'vis_acc':>7} {'ctr_err':>7}"]
    for seed, pair in zip(seeds, results):
        for r in pair:
            m = r.metrics
            lines.append(f"{seed:>4} {r.name:<11} {r.params:>7} {m.accuracy:>6.3f} {m.occluded_accuracy:>7.3f} "
                         f"{m.visible_accuracy:>7.3f} {m.center_error:>7.2f}")
    lines.append(f"occluded-accuracy delta {summary['delta']:+.3f} (target {cfg.train.min_delta:+.3f})")
    _table("\n".join(lines))
    return EXIT_OK


def cmd_eval(cfg: config.RunConfig, emit: Emitter, args) -> int:
    if not args.weights:
        raise ConfigError("eval needs --weights (written by `train --weights`)")
    model = build_model(cfg.synth_model())
    head = init_head(np.random.default_rng(0), model.stages[-1].dim, cfg.synth.k)
    with open(args.weights, "rb") as fh:
        load_weights(fh, model, head)
    test_set = generate_dataset(2 * cfg.seed + 1, cfg.train.n_test, cfg.synth)
    metrics = evaluate(model, head, test_set)
    emit({"type": "metrics", "seed": cfg.seed, "model": "tdvit", **metrics.as_dict()})
    return EXIT_OK


def cmd_generate(cfg: config.RunConfig, emit: Emitter, args) -> int:
    if not args.dataset:
        raise ConfigError("generate needs --dataset PATH")
    videos = generate_dataset(cfg.seed, args.count, cfg.synth)
    with open(args.dataset, "wb") as fh:
        write_dataset(fh, videos, cfg.synth.k)
    emit({"type": "dataset", "path": args.dataset, "videos": len(videos),
          "occluded_frames": int(sum((~v.visible).sum() for v in videos))})
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "trf": cmd_trf,
    "bench": cmd_bench,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdvit", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--mode", choices=sorted(config.MODES))
    parser.add_argument("--out", help="write JSON lines here instead of stdout")
    parser.add_argument("--variant", choices=sorted(VARIANTS))
    parser.add_argument("--toy-scale", type=float)
    parser.add_argument("--weights", help="train: save the first seed's TDViT weights; eval: load them")
    parser.add_argument("--dataset", help="generate: output path of the binary dataset")
    parser.add_argument("--count", type=int, default=16, help="generate: number of videos")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config.apply_overrides(config.load(args.config), seed=args.seed, mode=args.mode, out=args.out,
                                     variant=args.variant, toy_scale=args.toy_scale)
        with _output(cfg.out) as emit:
            emit({"type": "config", "command": args.command, **cfg.as_dict()})
            return COMMANDS[args.command](cfg, emit, args)
    except (TDViTError, OSError, yaml.YAMLError) as exc:
        print(f"tdvit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
