"""Command-line entry point: ``sea <command> ...``.

Every command writes its result to stdout. Failures exit nonzero with a
single JSON line ``{"error": ..., "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import fields

from threadpoolctl import threadpool_limits

from . import checks
from .graph import SbmConfig, generate_sbm, load_jsonl_dataset, save_jsonl_dataset
from .train import (TrainConfig, evaluate, expert_distribution_report, load_model, load_splits,
                    oversmoothing_diagnostic, predict, train)


class CliError(Exception):
    pass


class GradcheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    if args.out_dir:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "out_dir": args.out_dir})
    res = train(cfg)
    _emit({"stop_reason": res.stop_reason, "epochs": len(res.log), "best": res.best,
           "test": res.test_report.to_dict(), "experts": res.expert_report.to_dict(),
           "out_dir": cfg.out_dir})
    return 0


def cmd_eval(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    model = load_model(args.checkpoint)
    parts = dict(zip(("train", "val", "test"), load_splits(cfg)))
    _emit(evaluate(model, parts[args.split], cfg.task, split=args.split).to_dict())
    return 0


def cmd_gen_sbm(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        raw = json.load(fh)
    if "sbm" in raw:
        # a training config: generate every split in one file, in split order
        cfg = TrainConfig.from_dict(raw)
        total = cfg.num_train + cfg.num_val + cfg.num_test
        sbm = SbmConfig(num_graphs=total, **cfg.sbm)
    else:
        names = {f.name for f in fields(SbmConfig)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown SBM fields: {sorted(unknown)}")
        sbm = SbmConfig(**raw)
    graphs = generate_sbm(sbm)
    save_jsonl_dataset(graphs, args.out)
    _emit({"graphs": len(graphs), "nodes": sum(g.num_nodes for g in graphs), "out": args.out})
    return 0


def cmd_gradcheck(args) -> int:
    rows = checks.run_suite(args.module, args.instances, args.seed)
    worst = max(rows, key=lambda r: r[1])
    failed = [name for name, err in rows if not err <= checks.TOL]
    if args.verbose:
        for name, err in rows:
            print(f"{err:.3e}  {name}")
    _emit({"checks": len(rows), "max_error": float(worst[1]), "worst": worst[0],
           "tolerance": checks.TOL, "failed": len(failed)})
    if failed:
        raise GradcheckFailed(f"{len(failed)} gradient checks above {checks.TOL:g}, e.g. {failed[0]}")
    return 0


def cmd_report_experts(args) -> int:
    model = load_model(args.checkpoint)
    graphs = load_jsonl_dataset(args.data)
    if not graphs:
        raise ValueError(f"{args.data}: no graphs")
    _, choices = predict(model, graphs)
    rep = expert_distribution_report(choices, model.config.num_experts, threshold=args.threshold)
    _emit(rep.to_dict())
    return 0


def cmd_diag_oversmoothing(args) -> int:
    model = load_model(args.checkpoint)
    graphs = load_jsonl_dataset(args.data)
    if not 0 <= args.index < len(graphs):
        raise ValueError(f"graph index {args.index} out of range for {len(graphs)} graphs")
    rows = oversmoothing_diagnostic(model, graphs[args.index])
    if args.json:
        _emit(rows)
        return 0
    print("layer\tmean_cosine\tpairs\texcluded")
    for r in rows:
        print(f"{r['layer']}\t{r['mean_cosine']:.6f}\t{r['pairs']}\t{r['excluded']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sea", description="Graph shell attention models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", help="overrides out_dir from the config")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on one split of a config's data")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gen-sbm", help="write a stochastic-block-model dataset as JSONL")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_sbm)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--module", choices=sorted(checks.SUITES))
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("report-experts", help="expert routing frequencies on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--threshold", type=float, default=0.01)
    s.set_defaults(fn=cmd_report_experts)

    s = sub.add_parser("diag-oversmoothing", help="per-layer mean pairwise cosine similarity")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--index", type=int, default=0, help="which graph of the dataset")
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_diag_oversmoothing)
    return p


def _thread_limit():
    raw = os.environ.get("SEA_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise CliError(f"SEA_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            return args.fn(args)
    except Exception as exc:  # every failure becomes one parsable line
        kind = "usage" if isinstance(exc, CliError) else type(exc).__name__
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return 1 if kind != "usage" else 2


if __name__ == "__main__":
    sys.exit(main())
