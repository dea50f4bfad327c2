"""Command line entry point: ``bixnas <subcommand> ...``.

Exit codes: 0 success, 1 audit failure or deliberate halt, 2 configuration
error, 3 numeric/training failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from bixnas import complexity as cx
from bixnas import pipeline as pl
from bixnas.audit import fairness_and_cost_audit
from bixnas.config import RunConfig, load_config
from bixnas.errors import BixError, UsageError
from bixnas.phase2 import FairnessTrace, SearchInterrupted, verify_fairness
from bixnas.supernet import load_topology
from bixnas.tasks import load_dataset, synth_blobs


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg.validate()


def _data(args, cfg):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return pl.gen_data(cfg, Path(args.out) / "data") if args.out else None


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print(doc):
    print(json.dumps(doc, indent=2, sort_keys=True, default=str))


def cmd_gen_data(args):
    cfg = _config(args)
    out = _out(args)
    ds = pl.gen_data(cfg, out)
    _print({"written": str(out), "n": len(ds), "val": int((ds.split == "val").sum())})


def cmd_search1(args):
    cfg = _config(args)
    if args.epochs is not None:
        cfg.phase1.schedule.epochs = args.epochs
    out = _out(args)
    data = _data(args, cfg)
    cands = pl.search1(cfg, data, out)
    pl._write_json(out / "config.json", cfg.to_dict())
    _print({"candidates": {k: list(v) for k, v in cands.items()}})


def cmd_search2(args):
    p1 = Path(args.phase1)
    if args.config:
        cfg = _config(args)
    else:
        cfg = load_config(p1 / "config.json")
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
    if args.samples is not None:
        cfg.phase2.samples = args.samples
    if args.retain is not None:
        cfg.phase2.retain = args.retain
    if args.epochs is not None:
        cfg.phase2.schedule.epochs = args.epochs
    if args.reinit:
        cfg.phase2.reinit = True
    cfg.validate()
    out = _out(args)
    data = load_dataset(args.data) if args.data else pl.gen_data(cfg, out / "data")
    res = pl.search2(cfg, data, p1, out, resume=args.resume, stop_after_pairs=args.stop_after_pairs)
    pl._write_json(out / "config.json", cfg.to_dict())
    _print({"genome": {k: list(v) for k, v in res.genome.items()}, "fairness_passed": res.fairness["passed"]})


def cmd_retrain(args):
    cfg = _config(args)
    if args.epochs is not None:
        cfg.retrain.epochs = args.epochs
    out = _out(args)
    netcfg, genome, _ = load_topology(args.genome)
    cfg.supernet = netcfg
    data = load_dataset(args.data) if args.data else pl.gen_data(cfg, out / "data")
    res = pl.retrain(cfg, data, genome, out)
    _print({"best_epoch": res.best_epoch, "val_miou": res.best_miou, "val_dice": res.best_dice})


def cmd_eval(args):
    netcfg, genome, _ = load_topology(args.genome)
    data = load_dataset(args.data)
    _print(pl.evaluate_checkpoint(netcfg, args.checkpoint, genome, data, args.split))


def cmd_analyze(args):
    netcfg, genome, _ = load_topology(args.genome)
    if args.config:
        cfg = load_config(args.config)
        if cfg.supernet != netcfg:
            raise UsageError("--config supernet section does not match the genome's embedded config")
    cands = load_topology(args.candidates)[1] if args.candidates else None
    _print(pl.analyze(netcfg, genome, args.input, cands))


def cmd_space(args):
    print(cx.search_space_size(args.N, args.L, args.T))


def cmd_audit_fairness(args):
    if args.trace or args.phase2:
        path = Path(args.trace) if args.trace else Path(args.phase2) / "fairness_trace.jsonl"
        report = verify_fairness(FairnessTrace.load(path))
        _print(report)
        return 0 if report["passed"] else 1
    cfg = _config(args)
    if args.data:
        data = load_dataset(args.data)
    else:
        d = cfg.data
        data = synth_blobs(d.n, d.hw, cfg.supernet.num_classes, cfg.seed, cfg.supernet.in_channels, d.val_frac)
    # the last pair's head ends where every tail may prune identically, so probe one pair earlier
    pair = args.pair or max(1, cfg.supernet.n_stages - 2)
    rep = fairness_and_cost_audit(cfg.supernet, data, pair, args.samples, args.steps, cfg.seed)
    rep.pop("traces")
    _print(rep)
    ok = rep["shared_fairness"]["passed"] and not rep["naive_fairness"]["passed"] and rep["cost"]["match"]
    return 0 if ok else 1


def cmd_pipeline(args):
    cfg = _config(args)
    out = _out(args)
    summary = pl.run_pipeline(cfg, out, resume=args.resume, stop_after_pairs=args.stop_after_pairs)
    _print(summary)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (TOML)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker bound for tail evaluation")
    common.add_argument("--resume", action="store_true", help="continue an interrupted run in --out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bixnas", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("search1", parents=[common], help="selection-matrix search")
    s.add_argument("--data")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_search1)

    s = sub.add_parser("search2", parents=[common], help="progressive evolutionary search")
    s.add_argument("--phase1", required=True)
    s.add_argument("--data")
    s.add_argument("--samples", type=int)
    s.add_argument("--retain", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--reinit", action="store_true", help="start from fresh weights instead of the phase-1 checkpoint")
    s.add_argument("--stop-after-pairs", type=int, help="halt after this many stage pairs (resume testing)")
    s.set_defaults(func=cmd_search2)

    s = sub.add_parser("retrain", parents=[common], help="train a genome from scratch")
    s.add_argument("--genome", required=True)
    s.add_argument("--data")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_retrain)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--genome", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", parents=[common], help="MACs and parameter report")
    s.add_argument("--genome", required=True)
    s.add_argument("--candidates")
    s.add_argument("--input", default="1x3x64x64")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("space", help="search-space cardinality")
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--T", type=int, required=True)
    s.set_defaults(func=cmd_space)

    s = sub.add_parser("audit-fairness", parents=[common], help="verify a fairness trace or run the shared/naive audit")
    s.add_argument("--trace")
    s.add_argument("--phase2")
    s.add_argument("--data")
    s.add_argument("--pair", type=int)
    s.add_argument("--samples", type=int, default=4)
    s.add_argument("--steps", type=int, default=3)
    s.set_defaults(func=cmd_audit_fairness)

    s = sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    s.add_argument("--stop-after-pairs", type=int, help="halt phase 2 after this many stage pairs")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args) or 0
    except SearchInterrupted as exc:
        print(f"halted: {exc}", file=sys.stderr)
        return 1
    except BixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
