"""Synthetic segmentation data, metrics, preprocessing and the training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bixnas import autodiff as ad
from bixnas.errors import ArtifactIOError, ConfigError, NumericError, TrainingError, UsageError
from bixnas.serialize import load_tensors, read_pgm, save_tensors, write_pgm


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32
    masks: np.ndarray  # (n, H, W) int64 class indices
    split: np.ndarray  # (n,) "train" / "val" / "test"
    num_classes: int
    seed: int = 0
    shapes: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.masks) or len(self.images) != len(self.split):
            raise ConfigError("images, masks and split tags must have equal counts")
        if self.masks.size and self.masks.max() >= self.num_classes:
            raise ConfigError("mask value exceeds num_classes")

    def __len__(self):
        return len(self.images)

    def indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.split == tag)

    def part(self, tag: str):
        idx = self.indices(tag)
        return self.images[idx], self.masks[idx]


def ellipse_mask(hw: int, cy: float, cx: float, ay: float, ax: float, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Normalized radius map of an ellipse sampled at pixel centers, and its hard mask."""
    yy, xx = np.mgrid[0:hw, 0:hw] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    r = np.sqrt((u / ax) ** 2 + (v / ay) ** 2)
    return r, r <= 1.0


def synth_blobs(n: int, hw: int, classes: int = 2, seed: int = 0, channels: int = 3, val_frac: float = 0.2) -> Dataset:
    """Soft-edged ellipses on a smooth textured background.

    Each foreground class gets one or two ellipses with a class-specific
    colour; masks are the exact ellipse interiors (later shapes on top).
    """
    if classes < 2:
        raise ConfigError(f"synth_blobs needs classes >= 2 (got {classes})")
    if n < 1 or hw < 4:
        raise ConfigError("synth_blobs needs n >= 1 and hw >= 4")
    rng = np.random.default_rng(seed)
    palette = rng.uniform(0.55, 1.0, size=(classes, channels))
    palette[0] = 0.0
    low = max(hw // 4, 2)
    up = ad.interp_matrix(low, hw)
    images = np.zeros((n, channels, hw, hw), dtype=np.float32)
    masks = np.zeros((n, hw, hw), dtype=np.int64)
    shapes = []
    for i in range(n):
        coarse = rng.normal(0.0, 1.0, size=(channels, low, low))
        texture = np.einsum("oh,chw,pw->cop", up, coarse, up)
        img = 0.2 + 0.08 * texture
        mask = np.zeros((hw, hw), dtype=np.int64)
        items = []
        for k in range(1, classes):
            for _ in range(rng.integers(1, 3)):
                cy, cx = rng.uniform(0.25 * hw, 0.75 * hw, size=2)
                ay, ax_ = rng.uniform(hw / 8, hw / 4, size=2)
                theta = rng.uniform(0, math.pi)
                r, inside = ellipse_mask(hw, cy, cx, ay, ax_, theta)
                alpha = 1.0 / (1.0 + np.exp(-(1.0 - r) * min(ay, ax_) / 0.5))
                img = img * (1 - alpha) + palette[k][:, None, None] * alpha
                mask[inside] = k
                items.append({"cls": k, "cy": cy, "cx": cx, "ay": ay, "ax": ax_, "theta": theta})
        img = img + rng.normal(0.0, 0.03, size=img.shape)
        images[i] = min_max_normalize(img)
        masks[i] = mask
        shapes.append(items)
    split = np.array(["train"] * n, dtype=object)
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_val = int(round(val_frac * n))
    split[perm[:n_val]] = "val"
    return Dataset(images, masks, split.astype(str), classes, seed, shapes)


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        for i in range(len(ds)):
            save_tensors(d / f"img_{i:04d}.bin", {"image": ds.images[i]})
            write_pgm(d / f"mask_{i:04d}.pgm", ds.masks[i])
        meta = {
            "n": len(ds),
            "num_classes": ds.num_classes,
            "seed": ds.seed,
            "split": list(map(str, ds.split)),
            "shapes": ds.shapes,
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write dataset to {d}: {exc}") from exc


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactIOError(f"cannot read dataset metadata in {d}: {exc}") from exc
    images, masks = [], []
    for i in range(meta["n"]):
        images.append(load_tensors(d / f"img_{i:04d}.bin")["image"].astype(np.float32))
        masks.append(read_pgm(d / f"mask_{i:04d}.pgm").astype(np.int64))
    return Dataset(
        np.stack(images), np.stack(masks), np.array(meta["split"]), meta["num_classes"], meta["seed"], meta["shapes"]
    )


# ------------------------------------------------------------ preprocessing


def min_max_normalize(image) -> np.ndarray:
    """Affine map onto [0, 1]. A constant image maps to all zeros."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def auto_contrast(image, low_pct: float = 1.0, high_pct: float = 99.0) -> np.ndarray:
    """Percentile clipping followed by min-max normalization."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = np.percentile(image, [low_pct, high_pct])
    return min_max_normalize(np.clip(image, lo, hi))


# ------------------------------------------------------------------ metrics


def _check_maps(pred, target, classes):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise UsageError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size and (max(pred.max(), target.max()) >= classes or min(pred.min(), target.min()) < 0):
        raise UsageError("class index outside [0, classes)")
    return pred, target


def per_class_iou(pred, target, classes) -> dict:
    pred, target = _check_maps(pred, target, classes)
    out = {}
    for c in range(classes):
        p, t = pred == c, target == c
        union = np.count_nonzero(p | t)
        if union:
            out[c] = np.count_nonzero(p & t) / union
    return out


def per_class_dice(pred, target, classes) -> dict:
    pred, target = _check_maps(pred, target, classes)
    out = {}
    for c in range(classes):
        p, t = pred == c, target == c
        denom = np.count_nonzero(p) + np.count_nonzero(t)
        if denom:
            out[c] = 2 * np.count_nonzero(p & t) / denom
    return out


def miou(pred, target, classes) -> float:
    """Mean IoU over classes present in either map."""
    vals = per_class_iou(pred, target, classes)
    return float(np.mean(list(vals.values()))) if vals else 1.0


def dice(pred, target, classes) -> float:
    vals = per_class_dice(pred, target, classes)
    return float(np.mean(list(vals.values()))) if vals else 1.0


# ----------------------------------------------------------------- training


@dataclass
class TrainSchedule:
    epochs: int = 300
    lr: float = 1e-3
    decay: str = "inverse_time"  # "inverse_time" | "step" | "constant"
    rate: float = 3e-3
    factor: float = 0.1
    period: int = 10
    batch_size: int = 2

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("schedule needs epochs >= 1")
        if self.lr <= 0:
            raise ConfigError("schedule needs lr > 0")
        if self.decay not in ("inverse_time", "step", "constant"):
            raise ConfigError(f"unknown decay policy {self.decay!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.decay == "inverse_time":
            return self.lr / (1.0 + self.rate * epoch)
        if self.decay == "step":
            return self.lr * self.factor ** (epoch // self.period)
        return self.lr


def phase1_schedule(**kw) -> TrainSchedule:
    return TrainSchedule(**{"epochs": 300, "lr": 1e-3, "decay": "inverse_time", "rate": 3e-3, **kw})


def phase2_schedule(**kw) -> TrainSchedule:
    return TrainSchedule(**{"epochs": 40, "lr": 1e-3, "decay": "step", "factor": 0.1, "period": 10, **kw})


def batches(indices, batch_size, rng=None):
    idx = np.asarray(indices)
    if rng is not None:
        idx = idx[rng.permutation(len(idx))]
    for i in range(0, len(idx), batch_size):
        yield idx[i : i + batch_size]


def predict(net, topology, images, batch_size=16, fuse=None) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            logits = net.forward(images[i : i + batch_size], topology, mode="eval", fuse=fuse)
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.int64)


def evaluate(net, topology, dataset: Dataset, tag="val", fuse=None) -> dict:
    images, masks = dataset.part(tag)
    pred = predict(net, topology, images, fuse=fuse)
    return {
        "miou": miou(pred, masks, dataset.num_classes),
        "dice": dice(pred, masks, dataset.num_classes),
        "iou_per_class": per_class_iou(pred, masks, dataset.num_classes),
        "dice_per_class": per_class_dice(pred, masks, dataset.num_classes),
    }


@dataclass
class FitResult:
    log: list
    best_state: dict
    best_epoch: int
    best_miou: float
    best_dice: float


def fit(net, topology, dataset: Dataset, schedule: TrainSchedule, seed: int = 0, on_epoch=None) -> FitResult:
    """Cross-entropy + Adam on the train split; keeps the best-validation weights."""
    opt = ad.Adam(net.parameters(), lr=schedule.lr)
    rng = np.random.default_rng([seed, 7])
    train_idx = dataset.indices("train")
    if len(train_idx) == 0:
        raise ConfigError("dataset has no training samples")
    log, best = [], None
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        losses = []
        for idx in batches(train_idx, schedule.batch_size, rng):
            opt.zero_grad()
            try:
                logits = net.forward(dataset.images[idx], topology, mode="train")
                loss = ad.cross_entropy(logits, dataset.masks[idx])
                ad.backward(loss)
                opt.step(lr)
            except NumericError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
            losses.append(float(loss.data))
        val = evaluate(net, topology, dataset, "val")
        rec = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_miou": val["miou"],
            "val_dice": val["dice"],
        }
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if best is None or val["miou"] > best.best_miou:
            best = FitResult(log, net.state_dict(), epoch, val["miou"], val["dice"])
    best.log = log
    return best
