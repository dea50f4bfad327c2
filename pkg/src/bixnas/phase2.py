"""Progressive evolutionary search over the phase-1 candidate skips.

Stage pairs are searched from the last (2T-1 -> 2T) to the first. While
pair t -> t+1 is searched, stages 1..t-1 form a head that is forwarded once
per batch and shared by every sampled tail; each tail re-runs stages t..2T
with its own skip subset. Tail losses are averaged and back-propagated once.
After training, the population is reduced to its Pareto front in
(validation mIoU up, MACs down) and capped to the best-mIoU members.
"""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bixnas import autodiff as ad
from bixnas.complexity import macs
from bixnas.errors import ConfigError, NumericError, TrainingError, UsageError
from bixnas.serialize import tensor_digest
from bixnas.supernet import SuperNet, parse_key, stage_blocks, validate_topology
from bixnas.tasks import Dataset, TrainSchedule, batches, miou, phase2_schedule, predict


class SearchInterrupted(RuntimeError):
    """Raised when a run is deliberately halted after a number of stage pairs."""


@dataclass
class SampledTail:
    pair: int
    subsets: dict  # blocks of stage pair+1 -> sampled sources
    topology: dict  # full induced architecture
    parent: int = 0
    id: str = ""
    fitness: float | None = None
    cost: int | None = None

    @property
    def key(self) -> str:
        return json.dumps(sorted((k, list(v)) for k, v in self.topology.items()))


@dataclass
class Population:
    members: list
    capacity: int = 2


def sample_subset(candidates, rng) -> tuple:
    """Size uniform in [1, |C|], then a uniform combination of that size."""
    candidates = tuple(candidates)
    if not candidates:
        raise ConfigError("cannot sample from an empty candidate set")
    n = int(rng.integers(1, len(candidates) + 1))
    picked = set(rng.choice(len(candidates), size=n, replace=False).tolist())
    return tuple(c for i, c in enumerate(candidates) if i in picked)


def sample_tails(candidates: dict, pair: int, s: int, rng, config, parent_topology=None, parent_index=0) -> list:
    if s < 1:
        raise UsageError(f"number of samples must be >= 1 (got {s})")
    targets = stage_blocks(config, pair + 1)
    for key in targets:
        if not candidates.get(key):
            raise ConfigError(f"no candidates for block {key}")
    base = dict(candidates)
    if parent_topology:
        base.update(parent_topology)
    tails = []
    for _ in range(s):
        subsets = {key: sample_subset(candidates[key], rng) for key in targets}
        topo = dict(base)
        topo.update(subsets)
        tails.append(SampledTail(pair, subsets, topo, parent_index))
    return tails


# ------------------------------------------------------------------ Pareto


def dominates(a, b) -> bool:
    return a.fitness >= b.fitness and a.cost <= b.cost and (a.fitness > b.fitness or a.cost < b.cost)


def pareto_front(population) -> list:
    """Non-dominated members (maximize fitness, minimize cost) by a cost-ordered sweep."""
    members = list(population.members if isinstance(population, Population) else population)
    if not members:
        raise UsageError("empty population")
    if any(m.fitness is None or m.cost is None for m in members):
        raise UsageError("every member needs fitness and cost before selection")
    ordered = sorted(members, key=lambda m: (m.cost, -m.fitness))
    front, best, i = [], -np.inf, 0
    while i < len(ordered):
        j = i
        while j < len(ordered) and ordered[j].cost == ordered[i].cost:
            j += 1
        group_best = ordered[i].fitness
        if group_best > best:
            front.extend(m for m in ordered[i:j] if m.fitness == group_best)
            best = group_best
        i = j
    return front


def pareto_select(population, capacity: int | None = None) -> list:
    """Pareto front truncated to the ``capacity`` highest-fitness members."""
    if capacity is None:
        capacity = population.capacity if isinstance(population, Population) else 2
    if capacity < 1:
        raise UsageError("retention capacity must be >= 1")
    front = pareto_front(population)
    front.sort(key=lambda m: (-m.fitness, m.cost, m.key))
    return front[:capacity]


# ---------------------------------------------------------------- fairness


@dataclass
class FairnessTrace:
    records: list = field(default_factory=list)

    def observer(self, step, pair, tail_index, n_tails):
        def observe(block, source, tensor):
            rec = self._slot(step, pair, block, source, n_tails)
            rec["digests"][tail_index] = tensor_digest(tensor.data)

        return observe

    def _slot(self, step, pair, block, source, n_tails):
        key = (step, pair, block, source)
        index = getattr(self, "_index", None)
        if index is None:
            index = self._index = {}
        if key not in index:
            rec = {"step": step, "pair": pair, "block": block, "source": source, "digests": [None] * n_tails}
            index[key] = rec
            self.records.append(rec)
        return index[key]

    def dump(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def verify_fairness(trace: FairnessTrace) -> dict:
    """Pass iff, for every step, block and skip, every tail saw identical bytes."""
    records = trace.records if isinstance(trace, FairnessTrace) else list(trace)
    if not records:
        raise UsageError("fairness trace is empty")
    checked = 0
    for rec in records:
        seen = [d for d in rec["digests"] if d is not None]
        checked += 1
        if len(set(seen)) > 1:
            return {
                "passed": False,
                "records_checked": checked,
                "records_total": len(records),
                "first_violation": {k: rec[k] for k in ("step", "pair", "block", "source", "digests")},
            }
    return {"passed": True, "records_checked": checked, "records_total": len(records), "first_violation": None}


# ---------------------------------------------------------------- training


@dataclass
class StepResult:
    loss: float
    tail_losses: list
    excluded: list
    tags: set


def train_step_shared(net: SuperNet, head_topology, tails, batch, opt, lr, pair, trace=None, step=0) -> StepResult:
    """One optimizer step: shared head, every tail forwarded from it, one backward."""
    x, y = batch
    head = net.head_features(x, head_topology, upto_stage=pair - 1, mode="train")
    losses, values, excluded = [], [], []
    for i, tail in enumerate(tails):
        obs = trace.observer(step, pair, i, len(tails)) if trace is not None else None
        try:
            logits = net.forward_tail(head, tail.topology, mode="train", observer=obs)
            loss = ad.cross_entropy(logits, y)
        except NumericError:
            excluded.append(i)
            values.append(float("nan"))
            continue
        losses.append(loss)
        values.append(float(loss.data))
    if not losses:
        raise TrainingError(f"all {len(tails)} tails diverged at pair {pair}, step {step}")
    avg = ad.mean_of(losses)
    opt.zero_grad()
    tags = ad.backward(avg)
    opt.step(lr)
    return StepResult(float(avg.data), values, excluded, tags)


def train_step_naive(clones, tails, batch, opts, lr, pair, trace=None, step=0) -> list:
    """Deliberately unfair baseline: every tail owns and updates its own weight copy."""
    x, y = batch
    tags = []
    for i, (net, tail, opt) in enumerate(zip(clones, tails, opts)):
        obs = trace.observer(step, pair, i, len(tails)) if trace is not None else None
        logits = net.forward(x, tail.topology, mode="train", observer=obs, observe_stage=pair)
        loss = ad.cross_entropy(logits, y)
        opt.zero_grad()
        tags.append(ad.backward(loss))
        opt.step(lr)
    return tags


def run_shared_steps(net, candidates, pair, dataset, samples, steps, seed=0, batch_size=4, lr=1e-3):
    """Instrumented shared-head training for audits; returns (trace, counts)."""
    cfg = net.config
    rng = np.random.default_rng([seed, 30, pair])
    tails = sample_tails(candidates, pair, samples, rng, cfg)
    opt = ad.Adam(net.parameters(), lr=lr)
    trace = FairnessTrace()
    before = Counter(net.stage_calls)
    calls0 = ad.backward_calls()
    idx_iter = _cycle_batches(dataset.indices("train"), batch_size, rng)
    for step in range(steps):
        idx = next(idx_iter)
        train_step_shared(net, candidates, tails, (dataset.images[idx], dataset.masks[idx]), opt, lr, pair, trace, step)
    backward_passes = ad.backward_calls() - calls0
    fwd = {st: net.stage_calls[st] - before[st] for st in range(1, cfg.n_stages + 1)}
    return trace, {"stage_forwards": fwd, "backward_passes": backward_passes, "steps": steps}, tails


def run_naive_steps(net, candidates, pair, dataset, samples, steps, seed=0, batch_size=4, lr=1e-3):
    """Instrumented naive baseline; returns (trace, counts)."""
    cfg = net.config
    rng = np.random.default_rng([seed, 30, pair])
    tails = sample_tails(candidates, pair, samples, rng, cfg)
    clones = [net.clone() for _ in tails]
    opts = [ad.Adam(c.parameters(), lr=lr) for c in clones]
    trace = FairnessTrace()
    stage_backwards = 0
    idx_iter = _cycle_batches(dataset.indices("train"), batch_size, rng)
    for step in range(steps):
        idx = next(idx_iter)
        tags = train_step_naive(clones, tails, (dataset.images[idx], dataset.masks[idx]), opts, lr, pair, trace, step)
        stage_backwards += sum(len(t) for t in tags)
    forwards = sum(sum(c.stage_calls.values()) for c in clones)
    counts = {
        "stage_forwards": forwards,
        "stage_backwards": stage_backwards,
        "steps": steps,
        "population": len(tails),
    }
    return trace, counts, tails


def _cycle_batches(indices, batch_size, rng):
    while True:
        yield from batches(indices, batch_size, rng)


# --------------------------------------------------------------- full search


@dataclass
class Phase2Config:
    samples: int = 15
    retain: int = 2
    schedule: TrainSchedule = field(default_factory=phase2_schedule)
    threads: int = 1
    record_fairness: bool = True


@dataclass
class Phase2Result:
    genome: dict
    log: list
    trace: FairnessTrace
    fairness: dict
    retained: list
    pair_order: list


def evaluate_tails(net, tails, dataset: Dataset, threads=1):
    images, masks = dataset.part("val")
    shape = (1,) + dataset.images.shape[1:]

    def score(tail):
        pred = predict(net, tail.topology, images)
        return miou(pred, masks, dataset.num_classes), macs(net.config, tail.topology, shape).total

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(score, tails))
    else:
        scores = [score(t) for t in tails]
    for tail, (f, c) in zip(tails, scores):
        tail.fitness, tail.cost = f, c


def _unique(tails):
    seen, out = set(), []
    for t in tails:
        if t.key not in seen:
            seen.add(t.key)
            out.append(t)
    return out


def run_progressive_search(
    net: SuperNet,
    candidates: dict,
    dataset: Dataset,
    config: Phase2Config,
    seed: int = 0,
    state_dir=None,
    resume: bool = False,
    stop_after_pairs: int | None = None,
    on_record=None,
) -> Phase2Result:
    """Search stage pairs 2T-1, ..., 1 and return the evolved genome.

    With ``state_dir`` the weights and the retained architectures are
    checkpointed after each pair so that ``resume=True`` continues exactly.
    """
    cfg = net.config
    candidates = validate_topology(cfg, candidates)
    sched = config.schedule
    pairs = list(range(cfg.n_stages - 1, 0, -1))
    parents = [{}]
    log, trace = [], FairnessTrace()
    done, gstep = [], 0
    state_path = Path(state_dir) / "phase2_state.json" if state_dir else None
    if resume and state_path is not None and state_path.exists():
        state = json.loads(state_path.read_text())
        done = state["done"]
        gstep = state["global_step"]
        parents = [{k: tuple(v) for k, v in p.items()} for p in state["parents"]]
        log = state["log"]
        trace = FairnessTrace.load(Path(state_dir) / "phase2_trace.partial.jsonl")
        net.load(Path(state_dir) / "phase2_state.bin")
    retained = []
    train_idx = dataset.indices("train")
    for pair in pairs:
        if pair in done:
            continue
        rng = np.random.default_rng([seed, 20, pair])
        tails = []
        for pi, parent in enumerate(parents):
            tails += sample_tails(candidates, pair, config.samples, rng, cfg, parent, pi)
        for j, tail in enumerate(tails):
            tail.id = f"pair{pair}-t{j}"
        opt = ad.Adam(net.parameters(), lr=sched.lr)
        order_rng = np.random.default_rng([seed, 21, pair])
        for epoch in range(sched.epochs):
            lr = sched.lr_at(epoch)
            losses, per_tail, excluded = [], np.zeros(len(tails)), []
            n_batches = 0
            for idx in batches(train_idx, sched.batch_size, order_rng):
                res = train_step_shared(
                    net,
                    candidates,
                    tails,
                    (dataset.images[idx], dataset.masks[idx]),
                    opt,
                    lr,
                    pair,
                    trace if config.record_fairness else None,
                    step=gstep,
                )
                losses.append(res.loss)
                per_tail += np.nan_to_num(np.array(res.tail_losses), nan=0.0)
                excluded += [tails[i].id for i in res.excluded]
                gstep += 1
                n_batches += 1
            rec = {
                "pair": pair,
                "epoch": epoch,
                "lr": lr,
                "loss": float(np.mean(losses)),
                "tail_losses": {t.id: float(v / n_batches) for t, v in zip(tails, per_tail)},
                "excluded": sorted(set(excluded)),
            }
            log.append(rec)
            if on_record:
                on_record(rec)
        evaluate_tails(net, tails, dataset, config.threads)
        pool = _unique(tails)
        front = pareto_front(pool)
        retained = pareto_select(pool, config.retain)
        rec = {
            "pair": pair,
            "event": "select",
            "population": [{"id": t.id, "parent": t.parent, "miou": t.fitness, "macs": t.cost} for t in tails],
            "front": [t.id for t in sorted(front, key=lambda m: m.id)],
            "retained": [t.id for t in retained],
            "evolved": {k: list(v) for k, v in retained[0].subsets.items()},
        }
        log.append(rec)
        if on_record:
            on_record(rec)
        parents = [{k: v for k, v in t.topology.items() if parse_key(k)[0] > pair} for t in retained]
        done.append(pair)
        if state_path is not None:
            net.save(Path(state_dir) / "phase2_state.bin")
            trace.dump(Path(state_dir) / "phase2_trace.partial.jsonl")
            state = {
                "done": done,
                "global_step": gstep,
                "parents": [{k: list(v) for k, v in p.items()} for p in parents],
                "log": log,
            }
            state_path.write_text(json.dumps(state, sort_keys=True) + "\n")
        if stop_after_pairs is not None and len(done) >= stop_after_pairs and len(done) < len(pairs):
            raise SearchInterrupted(f"halted after {len(done)} stage pairs")
    genome = dict(candidates)
    genome.update(parents[0])
    genome = validate_topology(cfg, genome)
    fairness = (
        verify_fairness(trace) if trace.records else {"passed": True, "records_total": 0, "first_violation": None}
    )
    return Phase2Result(genome, log, trace, fairness, retained, pairs)
