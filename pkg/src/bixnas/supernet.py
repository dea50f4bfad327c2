"""Multi-scale bi-directional supernet.

Layout: ``2T`` extraction stages over ``L`` levels. Odd stages encode (level 1
down to L), even stages decode (level L up to 1). The encoder block and the
decoder block of a level are each a single set of weights reused at every
iteration.

Every block outside stage 1 is a searching block with ``N = L + 1`` incoming
streams, in this fixed order:

    rows 0..L-1 : cross-stage skips from levels 1..L of the previous stage
    row  L      : the within-stage sequential input (previous level of the
                  same stage; the network input "0.1" for a stage's first block)

Block and source keys are ``"stage.level"`` strings; ``"0.1"`` is the input.
A topology maps each searching-block key to the tuple of its active sources.
"""

from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bixnas import autodiff as ad
from bixnas.errors import ArtifactIOError, ConfigError, TopologyError, UsageError
from bixnas.serialize import load_tensors, save_tensors

INPUT_KEY = "0.1"


@dataclass(frozen=True)
class SuperNetConfig:
    levels: int = 4
    iterations: int = 3
    in_channels: int = 3
    num_classes: int = 2
    base_channels: int = 8
    channel_mult: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2 (got L={self.levels})")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1 (got T={self.iterations})")
        if self.in_channels < 1 or self.base_channels < 1 or self.channel_mult < 1:
            raise ConfigError("channel widths must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2 (got {self.num_classes})")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64 (got {self.dtype})")

    @property
    def n_stages(self) -> int:
        return 2 * self.iterations

    @property
    def n_streams(self) -> int:
        return self.levels + 1

    @property
    def n_searching_blocks(self) -> int:
        return self.levels * (2 * self.iterations - 1)

    def width(self, level: int) -> int:
        return self.base_channels * self.channel_mult ** (level - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SuperNetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown supernet keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- graph keys


def block_key(stage: int, level: int) -> str:
    return f"{stage}.{level}"


def parse_key(key: str) -> tuple[int, int]:
    try:
        s, l = key.split(".")
        return int(s), int(l)
    except ValueError as exc:
        raise TopologyError(f"malformed block key {key!r}") from exc


def stage_kind(stage: int) -> str:
    if stage < 1:
        raise UsageError(f"stage index must be >= 1, got {stage}")
    return "enc" if stage % 2 == 1 else "dec"


def stage_levels(config: SuperNetConfig, stage: int) -> list[int]:
    """Levels of a stage in execution order."""
    up = list(range(1, config.levels + 1))
    return up if stage_kind(stage) == "enc" else up[::-1]


def sequential_source(config: SuperNetConfig, stage: int, level: int) -> str:
    if stage_kind(stage) == "enc":
        return INPUT_KEY if level == 1 else block_key(stage, level - 1)
    return INPUT_KEY if level == config.levels else block_key(stage, level + 1)


def incoming_streams(config: SuperNetConfig, stage: int, level: int) -> list[str]:
    """Source keys of a block's inputs, in selection-matrix row order."""
    if stage == 1:
        return [sequential_source(config, 1, level)]
    cross = [block_key(stage - 1, m) for m in range(1, config.levels + 1)]
    return cross + [sequential_source(config, stage, level)]


def searching_blocks(config: SuperNetConfig) -> list[str]:
    return [block_key(t, l) for t in range(2, config.n_stages + 1) for l in stage_levels(config, t)]


def stage_blocks(config: SuperNetConfig, stage: int) -> list[str]:
    return [block_key(stage, l) for l in stage_levels(config, stage)]


def dense_topology(config: SuperNetConfig) -> dict:
    return {k: tuple(incoming_streams(config, *parse_key(k))) for k in searching_blocks(config)}


def validate_topology(config: SuperNetConfig, topology: dict) -> dict:
    """Check keys and subsets; returns the topology with sources in row order."""
    expected = set(searching_blocks(config))
    keys = set(topology)
    if keys != expected:
        missing = sorted(expected - keys)
        extra = sorted(keys - expected)
        raise TopologyError(f"topology keys mismatch (missing {missing}, unexpected {extra})")
    out = {}
    for key in searching_blocks(config):
        allowed = incoming_streams(config, *parse_key(key))
        active = list(topology[key])
        if not active:
            raise TopologyError(f"block {key} has an empty active subset")
        bad = [s for s in active if s not in allowed]
        if bad:
            raise TopologyError(f"block {key} lists sources {bad} outside its incoming streams")
        if len(set(active)) != len(active):
            raise TopologyError(f"block {key} lists a source twice")
        out[key] = tuple(s for s in allowed if s in active)
    return out


def is_subtopology(a: dict, b: dict) -> bool:
    return all(set(a[k]) <= set(b[k]) for k in a)


def block_sources(config: SuperNetConfig, topology: dict, key: str) -> tuple:
    stage, level = parse_key(key)
    if stage == 1:
        return (sequential_source(config, 1, level),)
    return tuple(topology[key])


def required_blocks(config: SuperNetConfig, topology: dict, demand=None) -> set:
    """Blocks that must execute to produce the demanded outputs.

    Default demand is the classification head's input, the level-1 block of
    the last stage. Everything outside the returned set is pruned.
    """
    if demand is None:
        demand = [block_key(config.n_stages, 1)]
    need, stack = set(), list(demand)
    while stack:
        key = stack.pop()
        if key == INPUT_KEY or key in need:
            continue
        need.add(key)
        stack.extend(block_sources(config, topology, key))
    return need


def route_plan(config: SuperNetConfig, target: str, source: str) -> dict:
    """How a source feature is aligned and projected for a target block."""
    t, l = parse_key(target)
    tkind = stage_kind(t)
    if source == INPUT_KEY:
        s, m, skind, cin = 0, 1, "in", config.in_channels
    else:
        s, m = parse_key(source)
        skind, cin = stage_kind(s), config.width(m)
    if s == t and tkind == "enc":
        align = "pool"
    elif (m == l and s != 0) or (s == 0 and l == 1):
        align = "identity"
    else:
        align = "resize"
    src_tag = "in" if s == 0 else f"{skind}{m}"
    return {
        "param": f"proj.{tkind}{l}.{src_tag}",
        "align": align,
        "cin": cin,
        "cout": config.width(l),
        "level": l,
    }


def all_route_params(config: SuperNetConfig) -> list[str]:
    names = set()
    for t in range(1, config.n_stages + 1):
        for l in range(1, config.levels + 1):
            for src in incoming_streams(config, t, l):
                names.add(route_plan(config, block_key(t, l), src)["param"])
    return sorted(names)


def weight_block_name(stage: int, level: int) -> str:
    return f"{stage_kind(stage)}{level}"


# ------------------------------------------------------------------- network


@dataclass
class HeadFeatures:
    """Outputs of every block of one stage plus the network input."""

    stage: int
    input: ad.Tensor
    levels: dict = field(default_factory=dict)

    def as_sources(self) -> dict:
        feats = {INPUT_KEY: self.input}
        for l, t in self.levels.items():
            feats[block_key(self.stage, l)] = t
        return feats


def default_fuse(key, streams):
    return ad.average(streams)


class SuperNet:
    """Weights of the supernet plus configurable-topology forward passes."""

    def __init__(self, config: SuperNetConfig, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params: dict[str, ad.Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.block_calls = Counter()
        self.stage_calls = Counter()
        self.weight_block_calls = Counter()
        self._lock = threading.Lock()
        self._init(np.random.default_rng(seed))

    # -- parameters -----------------------------------------------------

    def _add(self, name, arr):
        self.params[name] = ad.parameter(np.asarray(arr, dtype=self.dtype), name=name)

    def _init(self, rng):
        cfg = self.config
        for kind in ("enc", "dec"):
            for l in range(1, cfg.levels + 1):
                c = cfg.width(l)
                for j in (1, 2):
                    p = f"{kind}{l}"
                    self._add(f"{p}.conv{j}.w", rng.normal(0, np.sqrt(2.0 / (c * 9)), (c, c, 3, 3)))
                    self._add(f"{p}.bn{j}.gamma", np.ones(c))
                    self._add(f"{p}.bn{j}.beta", np.zeros(c))
                    # running statistics are per stage application: a reused block
                    # sees differently distributed inputs at every iteration
                    for t in range(1 if kind == "enc" else 2, cfg.n_stages + 1, 2):
                        self.buffers[f"{p}.bn{j}.running_mean@{t}"] = np.zeros(c, dtype=np.float64)
                        self.buffers[f"{p}.bn{j}.running_var@{t}"] = np.ones(c, dtype=np.float64)
        for name in all_route_params(cfg):
            tgt, src = name.split(".")[1:]
            cout = cfg.width(int(tgt[3:]))
            cin = cfg.in_channels if src == "in" else cfg.width(int(src[3:]))
            self._add(f"{name}.w", rng.normal(0, np.sqrt(1.0 / cin), (cout, cin, 1, 1)))
            self._add(f"{name}.b", np.zeros(cout))
        c1 = cfg.width(1)
        self._add("head.w", rng.normal(0, np.sqrt(1.0 / c1), (cfg.num_classes, c1, 1, 1)))
        self._add("head.b", np.zeros(cfg.num_classes))

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict):
        missing = [k for k in list(self.params) + list(self.buffers) if k not in state]
        if missing:
            raise ArtifactIOError(f"checkpoint lacks entries: {missing[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ArtifactIOError(f"checkpoint entry {k} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(self.dtype).copy()
        for k in self.buffers:
            self.buffers[k] = np.asarray(state[k], dtype=np.float64).copy()

    def save(self, path):
        save_tensors(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(load_tensors(path))

    def clone(self) -> "SuperNet":
        other = SuperNet.__new__(SuperNet)
        other.config = self.config
        other.dtype = self.dtype
        other.params = {k: ad.parameter(p.data, name=k) for k, p in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.block_calls = Counter()
        other.stage_calls = Counter()
        other.weight_block_calls = Counter()
        other._lock = threading.Lock()
        return other

    def reset_counters(self):
        self.block_calls.clear()
        self.stage_calls.clear()
        self.weight_block_calls.clear()

    # -- building blocks ----------------------------------------------

    def apply_block(self, stage: int, level: int, x: ad.Tensor, training: bool) -> ad.Tensor:
        p = weight_block_name(stage, level)
        P = self.params
        for j in (1, 2):
            x = ad.conv2d(x, P[f"{p}.conv{j}.w"], None, stride=1, padding=1)
            x = ad.batch_norm(
                x,
                P[f"{p}.bn{j}.gamma"],
                P[f"{p}.bn{j}.beta"],
                self.buffers[f"{p}.bn{j}.running_mean@{stage}"],
                self.buffers[f"{p}.bn{j}.running_var@{stage}"],
                training,
            )
            x = ad.relu(x)
        x.tag = stage
        with self._lock:
            self.block_calls[block_key(stage, level)] += 1
            self.weight_block_calls[p] += 1
        return x

    def route(self, target: str, source: str, feat: ad.Tensor, input_hw) -> ad.Tensor:
        plan = route_plan(self.config, target, source)
        f = 2 ** (plan["level"] - 1)
        h, w = input_hw[0] // f, input_hw[1] // f
        if plan["align"] == "pool":
            x = ad.max_pool2d(feat)
        elif plan["align"] == "resize":
            x = ad.bilinear_resize(feat, h, w)
        else:
            x = feat
        return ad.conv2d(x, self.params[plan["param"] + ".w"], self.params[plan["param"] + ".b"])

    def _check_input(self, x):
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ConfigError(f"input must be (B, {self.config.in_channels}, H, W), got {x.shape}")
        f = 2 ** (self.config.levels - 1)
        if x.shape[2] % f or x.shape[3] % f:
            raise ConfigError(f"input spatial dims {x.shape[2:]} not divisible by 2^(L-1) = {f}")
        if x.dtype != self.dtype:
            x = ad.Tensor(x.data.astype(self.dtype))
        return x

    # -- forward --------------------------------------------------------

    def _run(self, feats, first, last, topology, training, needed, fuse, observer=None, observe_stage=None):
        cfg = self.config
        input_hw = feats[INPUT_KEY].shape[2:]
        for t in range(first, last + 1):
            ran = False
            for l in stage_levels(cfg, t):
                key = block_key(t, l)
                if key not in needed:
                    continue
                sources = block_sources(cfg, topology, key)
                if observer is not None and t == observe_stage:
                    for s in sources:
                        if s == INPUT_KEY or parse_key(s)[0] < t:
                            observer(key, s, feats[s])
                streams = [self.route(key, s, feats[s], input_hw) for s in sources]
                fused = streams[0] if t == 1 else fuse(key, streams)
                feats[key] = self.apply_block(t, l, fused, training)
                ran = True
            if ran:
                with self._lock:
                    self.stage_calls[t] += 1
        return feats

    def classify(self, feat: ad.Tensor) -> ad.Tensor:
        return ad.conv2d(feat, self.params["head.w"], self.params["head.b"])

    def forward(self, x, topology=None, mode="eval", fuse=None, observer=None, observe_stage=None) -> ad.Tensor:
        """Per-pixel class logits at input resolution.

        ``observer(block, source, tensor)`` is called for every skip that a
        block of ``observe_stage`` reads from an earlier stage.
        """
        training = _training(mode)
        x = self._check_input(x)
        topology = dense_topology(self.config) if topology is None else validate_topology(self.config, topology)
        needed = required_blocks(self.config, topology)
        feats = self._run(
            {INPUT_KEY: x},
            1,
            self.config.n_stages,
            topology,
            training,
            needed,
            fuse or default_fuse,
            observer,
            observe_stage,
        )
        return self.classify(feats[block_key(self.config.n_stages, 1)])

    def head_features(self, x, topology=None, upto_stage: int = 1, mode="eval", fuse=None) -> HeadFeatures:
        """Like stage_outputs but also accepts upto_stage=0 (input only)."""
        cfg = self.config
        if not 0 <= upto_stage <= cfg.n_stages:
            raise UsageError(f"upto_stage must lie in [0, {cfg.n_stages}], got {upto_stage}")
        training = _training(mode)
        x = self._check_input(x)
        if upto_stage == 0:
            return HeadFeatures(0, x)
        topology = dense_topology(cfg) if topology is None else validate_topology(cfg, topology)
        needed = required_blocks(cfg, topology, demand=stage_blocks(cfg, upto_stage))
        feats = self._run({INPUT_KEY: x}, 1, upto_stage, topology, training, needed, fuse or default_fuse)
        return HeadFeatures(upto_stage, x, {l: feats[block_key(upto_stage, l)] for l in range(1, cfg.levels + 1)})

    def stage_outputs(self, x, topology=None, upto_stage: int = 1, mode="eval", fuse=None) -> HeadFeatures:
        if not 1 <= upto_stage <= self.config.n_stages:
            raise UsageError(f"upto_stage must lie in [1, {self.config.n_stages}], got {upto_stage}")
        return self.head_features(x, topology, upto_stage, mode, fuse)

    def forward_tail(self, head: HeadFeatures, topology=None, mode="eval", fuse=None, observer=None) -> ad.Tensor:
        """Finish a forward pass from shared head features."""
        cfg = self.config
        training = _training(mode)
        topology = dense_topology(cfg) if topology is None else validate_topology(cfg, topology)
        needed = required_blocks(cfg, topology)
        feats = head.as_sources()
        self._run(
            feats,
            head.stage + 1,
            cfg.n_stages,
            topology,
            training,
            needed,
            fuse or default_fuse,
            observer,
            head.stage + 1,
        )
        return self.classify(feats[block_key(cfg.n_stages, 1)])


def _training(mode) -> bool:
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def build_supernet(config: SuperNetConfig, seed: int = 0) -> SuperNet:
    return SuperNet(config, seed=seed)


# ------------------------------------------------------------ serialization


def topology_to_json(config: SuperNetConfig, topology: dict, kind: str = "genome", extra=None) -> dict:
    topology = validate_topology(config, topology)
    doc = {
        "format": "bixnas-topology",
        "kind": kind,
        "config": config.to_dict(),
        "blocks": {k: list(topology[k]) for k in searching_blocks(config)},
    }
    if extra:
        doc.update(extra)
    return doc


def save_topology(path, config, topology, kind="genome", extra=None):
    doc = topology_to_json(config, topology, kind, extra)
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def load_topology(path) -> tuple[SuperNetConfig, dict, dict]:
    """Returns (config, topology, raw document)."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactIOError(f"{path} is not valid JSON: {exc}") from exc
    if "blocks" not in doc or "config" not in doc:
        raise ArtifactIOError(f"{path} lacks 'config' or 'blocks'")
    config = SuperNetConfig.from_dict(doc["config"])
    topology = validate_topology(config, {k: tuple(v) for k, v in doc["blocks"].items()})
    return config, topology, doc
