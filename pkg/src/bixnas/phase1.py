"""Differentiable narrowing: one selection matrix per searching block.

Column k of a block's (N, N-2) matrix votes, through a hard Gumbel-Softmax,
for one of the block's N incoming streams. The distinct voted streams are
averaged. Weights and matrices are trained together by one optimizer, and
the noise-free column argmax gives the block's candidate skips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from bixnas import autodiff as ad
from bixnas.errors import ConfigError, NumericError, TrainingError
from bixnas.supernet import (
    SuperNet,
    SuperNetConfig,
    dense_topology,
    incoming_streams,
    parse_key,
    searching_blocks,
    validate_topology,
)
from bixnas.tasks import Dataset, TrainSchedule, batches, dice, miou, predict


@dataclass
class SelectionMatrix:
    block: str
    m: ad.Tensor
    tau: float = 1.0

    @property
    def n(self) -> int:
        return self.m.shape[0]


@dataclass(frozen=True)
class CandidateSet:
    block: str
    skips: tuple  # row indices into the block's incoming streams, ascending

    def __len__(self):
        return len(self.skips)


def init_selection_matrices(config: SuperNetConfig, tau: float = 1.0) -> dict:
    """All-zero matrices: every stream starts equally likely."""
    n = config.n_streams
    if n < 3:
        raise ConfigError(f"selection needs N >= 3 streams (got {n})")
    dtype = np.dtype(config.dtype)
    return {
        key: SelectionMatrix(key, ad.parameter(np.zeros((n, n - 2), dtype=dtype), name=f"select.{key}"), tau)
        for key in searching_blocks(config)
    }


def phi(streams, sel: SelectionMatrix, mode: str = "eval", rng=None, noise=None) -> ad.Tensor:
    """Hard column selection of streams followed by the average of the unique picks.

    Train mode adds Gumbel noise (sampled from ``rng`` unless ``noise`` is
    given); eval mode is the pure argmax. Both run the same hard forward.
    """
    streams = list(streams)
    if len(streams) < 3:
        raise ConfigError(f"phi needs N >= 3 streams (got {len(streams)})")
    if mode == "train":
        if noise is None:
            if rng is None:
                raise ConfigError("train-mode phi needs an rng or explicit noise")
            noise = ad.sample_gumbel(sel.m.shape, rng, sel.m.dtype)
    elif mode == "eval":
        noise = None
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    onehot = ad.gumbel_softmax_columns(sel.m, sel.tau, noise, hard=True)
    return ad.unique_select_average(streams, onehot)


def selection_fuse(selections: dict, mode: str, rng=None):
    def fuse(key, streams):
        return phi(streams, selections[key], mode, rng)

    return fuse


def extract_candidates(sel: SelectionMatrix) -> CandidateSet:
    """Unique noise-free column argmax (ties go to the lowest stream index)."""
    picks = np.asarray(sel.m.data).argmax(axis=0)
    return CandidateSet(sel.block, tuple(sorted(set(int(p) for p in picks))))


def candidates_topology(config: SuperNetConfig, selections: dict) -> dict:
    topo = {}
    for key in searching_blocks(config):
        streams = incoming_streams(config, *parse_key(key))
        cand = extract_candidates(selections[key])
        topo[key] = tuple(streams[i] for i in cand.skips)
    return validate_topology(config, topo)


@dataclass
class Phase1Result:
    selections: dict
    candidates: dict
    log: list = field(default_factory=list)
    optimizer: ad.Adam | None = None


def train_phase1(
    net: SuperNet,
    dataset: Dataset,
    schedule: TrainSchedule,
    selections: dict | None = None,
    seed: int = 0,
    on_epoch=None,
) -> Phase1Result:
    cfg = net.config
    if selections is None:
        selections = init_selection_matrices(cfg)
    missing = [k for k in searching_blocks(cfg) if k not in selections]
    if missing:
        raise ConfigError(f"no selection matrix registered for blocks {missing}")
    params = net.parameters() + [selections[k].m for k in searching_blocks(cfg)]
    opt = ad.Adam(params, lr=schedule.lr)
    noise_rng = np.random.default_rng([seed, 11])
    order_rng = np.random.default_rng([seed, 12])
    dense = dense_topology(cfg)
    train_idx = dataset.indices("train")
    val_images, val_masks = dataset.part("val")
    log = []
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        losses = []
        fuse = selection_fuse(selections, "train", noise_rng)
        for idx in batches(train_idx, schedule.batch_size, order_rng):
            opt.zero_grad()
            try:
                logits = net.forward(dataset.images[idx], dense, mode="train", fuse=fuse)
                loss = ad.cross_entropy(logits, dataset.masks[idx])
                ad.backward(loss)
                opt.step(lr)
            except NumericError as exc:
                raise TrainingError(f"phase 1 diverged at epoch {epoch}: {exc}") from exc
            losses.append(float(loss.data))
        pred = predict(net, dense, val_images, fuse=selection_fuse(selections, "eval"))
        cands = candidates_topology(cfg, selections)
        rec = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_miou": miou(pred, val_masks, dataset.num_classes),
            "val_dice": dice(pred, val_masks, dataset.num_classes),
            "candidate_sizes": {k: len(v) for k, v in cands.items()},
        }
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return Phase1Result(selections, candidates_topology(cfg, selections), log, opt)


def selections_to_json(selections: dict) -> dict:
    return {k: {"tau": s.tau, "m": np.asarray(s.m.data, dtype=np.float64).tolist()} for k, s in selections.items()}


def selections_from_json(doc: dict, dtype="float64") -> dict:
    return {
        k: SelectionMatrix(k, ad.parameter(np.array(v["m"], dtype=dtype), name=f"select.{k}"), v["tau"])
        for k, v in doc.items()
    }


def dump_log(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
