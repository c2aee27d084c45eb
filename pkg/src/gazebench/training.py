"""AdamW and the base / aux / colearn training loops, plus checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import tensorio
from .annotation import (
    CROP_MODES,
    AnnotationConfig,
    Clip,
    ClipPair,
    crop_augment,
    in_view_label,
    make_heatmap_target,
    sample_frames,
)
from .errors import (
    ConfigInvalid,
    CorruptCheckpoint,
    CorruptTensorFile,
    DatasetEmpty,
    NonFiniteGradient,
    PairMismatch,
)
from .model import (
    LossWeights,
    ModelConfig,
    colearn_loss_and_grads,
    init_params,
    loss_and_grads,
)

VARIANTS = ("base", "aux", "colearn")


@dataclass
class TrainConfig:
    variant: str = "base"
    lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    view: str = "neck"  # view trained by the single-model variants

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"variant must be one of {VARIANTS}")
        if not self.lr >= 0:
            raise ConfigInvalid("learning rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigInvalid("epochs and batch_size must be >= 1")
        w = self.weights
        if min(w.heatmap, w.inbound, w.align) < 0:
            raise ConfigInvalid("loss weights must be nonnegative")

    def effective_weights(self) -> LossWeights:
        """Loss terms active for this variant."""
        w = self.weights
        if self.variant == "base":
            return LossWeights(w.heatmap, 0.0, 0.0)
        if self.variant == "aux":
            return LossWeights(w.heatmap, w.inbound, 0.0)
        return LossWeights(w.heatmap, 0.0, w.align)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def fresh(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adamw_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig):
    """One decoupled-weight-decay Adam update. Returns new (params, state)."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {k}")
    b1, b2 = config.beta1, config.beta2
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        new_p[k] = p * (1.0 - config.lr * config.weight_decay) - config.lr * update
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(new_m, new_v, step)


# ---------------------------------------------------------------- batches

@dataclass
class Streams:
    """Independent RNG streams so that variants consume identical draws."""

    shuffle: np.random.Generator
    temporal: np.random.Generator
    crop: np.random.Generator
    crop_head: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        ss = np.random.SeedSequence(seed).spawn(6)
        # children 0/1 seed the model initialisations
        return cls(*(np.random.default_rng(s) for s in ss[2:]))


def init_seeds(seed: int) -> tuple[int, int]:
    """Parameter-initialisation seeds for the primary and the head model."""
    ss = np.random.SeedSequence(seed).spawn(6)
    return (int(ss[0].generate_state(1)[0]), int(ss[1].generate_state(1)[0]))


def prepare_clip(clip: Clip, indices: list[int], crop_mode: str, crop_w: int | None,
                 sigma: float):
    """Frames, heatmap targets and in-view labels for sampled clip frames."""
    if clip.frames is None:
        raise ValueError(f"clip {clip.session_id}/{clip.view}@{clip.start} has no frames")
    frames = clip.frames[indices]
    samples = [clip.samples[i] for i in indices]
    width = frames.shape[2]
    frames, samples = crop_augment(frames, samples, crop_mode, crop_w or width)
    h, w = frames.shape[1:3]
    targets = np.stack([make_heatmap_target(s, h, w, sigma) for s in samples])
    labels = np.array([in_view_label(s) for s in samples], dtype=np.int64)
    return frames, targets, labels


def mean_rotation(rotations: np.ndarray) -> np.ndarray:
    """Chordal L2 mean of rotation matrices."""
    return Rotation.from_matrix(rotations).mean().as_matrix()


@dataclass
class TrainResult:
    params: dict
    state: OptimizerState
    history: list
    head_params: dict | None = None
    head_state: OptimizerState | None = None


def _check_pairs(pairs):
    for p in pairs:
        if not isinstance(p, ClipPair):
            raise PairMismatch("colearn expects ClipPair items")
        h, n = p.head, p.neck
        if (h.session_id, h.start, h.length) != (n.session_id, n.start, n.length):
            raise PairMismatch(f"unsynchronized pair {h.session_id}@{h.start} / {n.session_id}@{n.start}")
        if h.view != "head" or n.view != "neck" or n.rel_rotations is None:
            raise PairMismatch("pair must hold a head clip, a neck clip and rotations")


def train(dataset: list, config: TrainConfig, model_config: ModelConfig | None = None,
          ann: AnnotationConfig | None = None, init: dict | None = None,
          log=None) -> TrainResult:
    """Train one variant. ``dataset`` holds Clips, or ClipPairs for colearn.

    ``init`` may carry ``params``/``state`` (and ``head_params``/``head_state``)
    to resume from a checkpoint.
    """
    if not dataset:
        raise DatasetEmpty("no training clips")
    ann = ann or AnnotationConfig()
    colearn = config.variant == "colearn"
    if colearn:
        _check_pairs(dataset)
        sample_clip = dataset[0].neck
    else:
        sample_clip = dataset[0]
    if model_config is None:
        h = sample_clip.frames.shape[1]
        w = ann.crop_w or sample_clip.frames.shape[2]
        model_config = ModelConfig(h, w)
    weights = config.effective_weights()
    streams = Streams.from_seed(config.seed)
    seed_main, seed_head = init_seeds(config.seed)
    init = init or {}
    params = init.get("params") or init_params(model_config, seed_main)
    state = init.get("state") or OptimizerState.fresh(params)
    head_params = head_state = None
    if colearn:
        head_params = init.get("head_params") or init_params(model_config, seed_head)
        head_state = init.get("head_state") or OptimizerState.fresh(head_params)

    history = []
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = streams.shuffle.permutation(n)
        sums: dict = {}
        batches = 0
        for lo in range(0, n, config.batch_size):
            items = [dataset[i] for i in order[lo:lo + config.batch_size]]
            if colearn:
                hf, ht, nf, nt, rots = [], [], [], [], []
                for pair in items:
                    idx = sample_frames(pair.neck.length, ann.num_frames, ann.stride, "train", streams.temporal)
                    mode_n = CROP_MODES[int(streams.crop.integers(3))]
                    mode_h = CROP_MODES[int(streams.crop_head.integers(3))]
                    f, t, _ = prepare_clip(pair.neck, idx, mode_n, ann.crop_w, ann.sigma)
                    nf.append(f), nt.append(t)
                    f, t, _ = prepare_clip(pair.head, idx, mode_h, ann.crop_w, ann.sigma)
                    hf.append(f), ht.append(t)
                    rots.append(mean_rotation(pair.rel_rotations[idx]))
                total, terms, gh, gn, _ = colearn_loss_and_grads(
                    np.stack(hf), np.stack(nf), np.stack(ht), np.stack(nt), np.stack(rots),
                    head_params, params, weights)
                head_params, head_state = adamw_step(head_params, gh, head_state, config)
                params, state = adamw_step(params, gn, state, config)
            else:
                fs, ts, ls = [], [], []
                for clip in items:
                    idx = sample_frames(clip.length, ann.num_frames, ann.stride, "train", streams.temporal)
                    mode = CROP_MODES[int(streams.crop.integers(3))]
                    f, t, lab = prepare_clip(clip, idx, mode, ann.crop_w, ann.sigma)
                    fs.append(f), ts.append(t), ls.append(lab)
                total, terms, grads, _ = loss_and_grads(
                    np.stack(fs), np.stack(ts), np.stack(ls), params, weights)
                params, state = adamw_step(params, grads, state, config)
            sums["total"] = sums.get("total", 0.0) + total
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        row = {"epoch": epoch}
        row.update({k: v / batches for k, v in sums.items()})
        row["wall_time"] = time.perf_counter() - t0
        history.append(row)
        if log is not None:
            log(row)
    return TrainResult(params, state, history, head_params, head_state)


def history_csv(history: list) -> str:
    keys = ["epoch"]
    for row in history:
        for k in row:
            if k not in keys and k != "wall_time":
                keys.append(k)
    keys.append("wall_time")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: (repr(row[k]) if isinstance(row.get(k), float) else row.get(k, ""))
                         for k in keys})
    return buf.getvalue()


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"GZCK"
CKPT_VERSION = 1


def _tensor_block(name: str, arr: np.ndarray) -> bytes:
    key = name.encode("utf-8")
    body = tensorio.encode(np.asarray(arr, dtype=np.float64))
    return struct.pack("<H", len(key)) + key + struct.pack("<Q", len(body)) + body


def checkpoint_bytes(params: dict, state: OptimizerState | None, config: dict) -> bytes:
    """Serialize named tensors; optimizer moments are stored as ``m/<name>``
    and ``v/<name>`` and the step counter in the config echo."""
    echo = dict(config)
    echo["optimizer_step"] = state.step if state is not None else None
    cfg = json.dumps(echo, sort_keys=True).encode("utf-8")
    tensors = [(k, v) for k, v in params.items()]
    if state is not None:
        tensors += [(f"m/{k}", v) for k, v in state.m.items()]
        tensors += [(f"v/{k}", v) for k, v in state.v.items()]
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg,
           struct.pack("<I", len(tensors))]
    out += [_tensor_block(k, v) for k, v in tensors]
    return b"".join(out)


def parse_checkpoint(data: bytes):
    """Inverse of :func:`checkpoint_bytes`: returns (params, state, config)."""
    stream = io.BytesIO(data)

    def take(n):
        b = stream.read(n)
        if len(b) != n:
            raise CorruptCheckpoint("checkpoint is truncated")
        return b

    if take(4) != CKPT_MAGIC:
        raise CorruptCheckpoint("not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    try:
        config = json.loads(take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint("unreadable config block") from exc
    (count,) = struct.unpack("<I", take(4))
    params, m, v = {}, {}, {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = take(klen).decode("utf-8")
        (blen,) = struct.unpack("<Q", take(8))
        try:
            arr = tensorio.decode(take(blen))
        except CorruptTensorFile as exc:
            raise CorruptCheckpoint(str(exc)) from exc
        if name.startswith("m/"):
            m[name[2:]] = arr
        elif name.startswith("v/"):
            v[name[2:]] = arr
        else:
            params[name] = arr
    if stream.read(1):
        raise CorruptCheckpoint("trailing bytes in checkpoint")
    step = config.pop("optimizer_step", None)
    state = OptimizerState(m, v, int(step)) if step is not None else None
    return params, state, config


def save_checkpoint(params: dict, state: OptimizerState | None, config: dict, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, state, config))


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
