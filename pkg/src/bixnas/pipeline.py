"""End-to-end orchestration: data -> phase 1 -> phase 2 -> retrain -> eval -> analyze.

Each stage reads and writes plain files under one run directory, so stages
can also be driven one at a time from the command line. ``manifest.json``
records the config digest, the finished stages and a sha256 per artifact.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from bixnas import complexity as cx
from bixnas.config import RunConfig
from bixnas.errors import ArtifactIOError, ConfigError
from bixnas.phase1 import (
    dump_log,
    init_selection_matrices,
    selections_to_json,
    train_phase1,
)
from bixnas.phase2 import Phase2Config, run_progressive_search
from bixnas.serialize import file_digest, load_tensors, save_tensors
from bixnas.supernet import (
    SuperNetConfig,
    build_supernet,
    dense_topology,
    is_subtopology,
    load_topology,
    save_topology,
)
from bixnas.tasks import Dataset, evaluate, fit, load_dataset, save_dataset, synth_blobs

log = logging.getLogger(__name__)

STAGES = ("gen-data", "search1", "search2", "retrain", "eval", "analyze")


def _write_json(path, doc):
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _check_data(cfg: RunConfig, data: Dataset):
    if data.num_classes != cfg.supernet.num_classes:
        raise ConfigError(f"dataset has {data.num_classes} classes, supernet expects {cfg.supernet.num_classes}")
    if data.images.shape[1] != cfg.supernet.in_channels:
        raise ConfigError("dataset channel count does not match supernet.in_channels")


# ------------------------------------------------------------------- stages


def gen_data(cfg: RunConfig, out_dir) -> Dataset:
    ds = synth_blobs(
        cfg.data.n, cfg.data.hw, cfg.supernet.num_classes, cfg.seed, cfg.supernet.in_channels, cfg.data.val_frac
    )
    save_dataset(ds, out_dir)
    return ds


def search1(cfg: RunConfig, data: Dataset, out_dir) -> dict:
    _check_data(cfg, data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = build_supernet(cfg.supernet, seed=cfg.seed)
    sels = init_selection_matrices(cfg.supernet, tau=cfg.phase1.tau)
    res = train_phase1(net, data, cfg.phase1.schedule, sels, seed=cfg.seed, on_epoch=lambda r: log.info("phase1 %s", r))
    state = net.state_dict()
    state.update({f"select.{k}": s.m.data for k, s in sels.items()})
    save_tensors(out / "phase1.ckpt", state)
    save_topology(
        out / "candidates.json",
        cfg.supernet,
        res.candidates,
        kind="candidates",
        extra={"selection": selections_to_json(sels)},
    )
    dump_log(out / "phase1_log.jsonl", res.log)
    return res.candidates


def search2(cfg: RunConfig, data: Dataset, phase1_dir, out_dir, resume=False, stop_after_pairs=None):
    _check_data(cfg, data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p1 = Path(phase1_dir)
    netcfg, candidates, _ = load_topology(p1 / "candidates.json")
    if netcfg != cfg.supernet:
        raise ConfigError("phase-1 candidates were produced for a different supernet config")
    net = build_supernet(cfg.supernet, seed=cfg.seed)
    if not cfg.phase2.reinit:
        state = load_tensors(p1 / "phase1.ckpt")
        net.load_state_dict({k: v for k, v in state.items() if not k.startswith("select.")})
    p2 = Phase2Config(cfg.phase2.samples, cfg.phase2.retain, cfg.phase2.schedule, cfg.threads)
    res = run_progressive_search(
        net,
        candidates,
        data,
        p2,
        seed=cfg.seed,
        state_dir=out,
        resume=resume,
        stop_after_pairs=stop_after_pairs,
        on_record=lambda r: log.info("phase2 %s", {k: r[k] for k in r if k not in ("tail_losses", "population")}),
    )
    save_topology(out / "bixnet.genome.json", cfg.supernet, res.genome, kind="genome")
    dump_log(out / "search_log.jsonl", res.log)
    res.trace.dump(out / "fairness_trace.jsonl")
    _write_json(out / "fairness_report.json", res.fairness)
    net.save(out / "phase2.ckpt")
    return res


def retrain(cfg: RunConfig, data: Dataset, genome: dict, out_dir):
    _check_data(cfg, data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = build_supernet(cfg.supernet, seed=cfg.seed + 1)
    res = fit(net, genome, data, cfg.retrain, seed=cfg.seed, on_epoch=lambda r: log.info("retrain %s", r))
    save_tensors(out / "bixnet.ckpt", res.best_state)
    dump_log(out / "retrain_log.jsonl", res.log)
    return res


def evaluate_checkpoint(netcfg: SuperNetConfig, checkpoint, genome: dict, data: Dataset, tag="val") -> dict:
    net = build_supernet(netcfg)
    net.load_state_dict(load_tensors(checkpoint))
    m = evaluate(net, genome, data, tag)
    identity_gap = max(
        (
            abs(m["dice_per_class"][c] - 2 * m["iou_per_class"][c] / (1 + m["iou_per_class"][c]))
            for c in m["iou_per_class"]
        ),
        default=0.0,
    )
    return {
        "split": tag,
        "miou": m["miou"],
        "dice": m["dice"],
        "iou_per_class": {str(k): v for k, v in m["iou_per_class"].items()},
        "dice_per_class": {str(k): v for k, v in m["dice_per_class"].items()},
        "dice_iou_identity_max_gap": identity_gap,
    }


def analyze(netcfg: SuperNetConfig, genome: dict, input_shape, candidates: dict | None = None) -> dict:
    dense = dense_topology(netcfg)
    rep = cx.macs(netcfg, genome, input_shape)
    doc = {
        "input_shape": list(cx._parse_shape(input_shape)),
        "genome": {"macs": rep.to_dict(), "params": cx.param_count(netcfg, genome)},
        "dense": {"macs": cx.macs(netcfg, dense, input_shape).total, "params": cx.param_count(netcfg, dense)},
        "unused_weight_blocks": cx.unused_weight_blocks(netcfg, genome),
        "search_space": str(cx.search_space_size(netcfg.n_streams, netcfg.levels, netcfg.iterations)),
    }
    if candidates is not None:
        doc["phase1"] = {
            "macs": cx.macs(netcfg, candidates, input_shape).total,
            "params": cx.param_count(netcfg, candidates),
        }
        doc["genome_within_candidates"] = is_subtopology(genome, candidates)
        doc["macs_chain_ok"] = doc["genome"]["macs"]["total"] <= doc["phase1"]["macs"] <= doc["dense"]["macs"]
    return doc


# ----------------------------------------------------------------- pipeline


class Manifest:
    def __init__(self, root: Path, cfg: RunConfig):
        self.root = root
        self.path = root / "manifest.json"
        self.doc = {"config_digest": cfg.digest(), "seed": cfg.seed, "stages_done": [], "artifacts": {}}

    def load_for_resume(self):
        if not self.path.exists():
            return
        old = json.loads(self.path.read_text())
        if old.get("config_digest") != self.doc["config_digest"]:
            raise ConfigError("cannot resume: run directory was produced with a different config")
        self.doc["stages_done"] = old.get("stages_done", [])

    def done(self, stage) -> bool:
        return stage in self.doc["stages_done"]

    def mark(self, stage):
        if stage not in self.doc["stages_done"]:
            self.doc["stages_done"].append(stage)
        self.refresh()

    def refresh(self):
        arts = {}
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                arts[str(p.relative_to(self.root))] = file_digest(p)
        self.doc["artifacts"] = arts
        _write_json(self.path, self.doc)


def run_pipeline(cfg: RunConfig, out_dir, resume=False, stop_after_pairs=None, input_shape=None, on_event=None) -> dict:
    """Run every stage not yet marked done; ``on_event(stage, what)`` sees each stage start."""
    cfg.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    man = Manifest(root, cfg)
    if resume:
        man.load_for_resume()
    _write_json(root / "config.json", cfg.to_dict())
    events = root / "events.jsonl"

    def event(stage, what):
        with open(events, "a") as fh:
            fh.write(json.dumps({"stage": stage, "event": what}) + "\n")
        if on_event is not None:
            on_event(stage, what)

    if not man.done("gen-data"):
        event("gen-data", "start")
        gen_data(cfg, root / "data")
        man.mark("gen-data")
    data = load_dataset(root / "data")
    if not man.done("search1"):
        event("search1", "start")
        search1(cfg, data, root / "phase1")
        man.mark("search1")
    if not man.done("search2"):
        event("search2", "start")
        search2(cfg, data, root / "phase1", root / "phase2", resume=resume, stop_after_pairs=stop_after_pairs)
        man.mark("search2")
    _, genome, _ = load_topology(root / "phase2" / "bixnet.genome.json")
    _, candidates, _ = load_topology(root / "phase1" / "candidates.json")
    if not man.done("retrain"):
        event("retrain", "start")
        retrain(cfg, data, genome, root / "retrain")
        man.mark("retrain")
    if not man.done("eval"):
        event("eval", "start")
        ev = evaluate_checkpoint(cfg.supernet, root / "retrain" / "bixnet.ckpt", genome, data)
        _write_json(root / "eval.json", ev)
        man.mark("eval")
    ev = json.loads((root / "eval.json").read_text())
    shape = input_shape or (1, cfg.supernet.in_channels, cfg.data.hw, cfg.data.hw)
    an = analyze(cfg.supernet, genome, shape, candidates)
    _write_json(root / "analysis.json", an)
    fairness = json.loads((root / "phase2" / "fairness_report.json").read_text())
    summary = {
        "val_miou": ev["miou"],
        "val_dice": ev["dice"],
        "dice_iou_identity_max_gap": ev["dice_iou_identity_max_gap"],
        "macs_bixnet": an["genome"]["macs"]["total"],
        "macs_phase1": an["phase1"]["macs"],
        "macs_dense": an["dense"]["macs"],
        "params_bixnet": an["genome"]["params"],
        "params_phase1": an["phase1"]["params"],
        "params_dense": an["dense"]["params"],
        "unused_weight_blocks": an["unused_weight_blocks"],
        "macs_chain_ok": an["macs_chain_ok"],
        "fairness_passed": fairness["passed"],
        "search_space": an["search_space"],
    }
    _write_json(root / "summary.json", summary)
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, ";".join(v) if isinstance(v, list) else v])
    man.mark("analyze")
    event("pipeline", "done")
    man.refresh()
    return summary
