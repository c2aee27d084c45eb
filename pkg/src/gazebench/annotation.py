"""Gaze annotation: stream synchronisation, event labels, heatmap targets,
clip segmentation, temporal sampling and crop augmentation."""

from __future__ import annotations

import dataclasses
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import AmbiguousSync, ClipTooShort, ConfigInvalid, NoOverlap
from .geometry import PixelPoint, map_gaze_cross_view, relative_extrinsics
from .synthworld import VIEWS, SessionRecord, decode_sync_marker

FIXATION = "fixation"
SACCADE = "saccade"
TRUNCATED = "truncated"
UNTRACKED = "untracked"
LABELS = (FIXATION, SACCADE, TRUNCATED, UNTRACKED)
IN_VIEW = (FIXATION, SACCADE)

MIN_SYNC_MATCHES = 3


@dataclass
class AnnotationConfig:
    disp_threshold: float = 0.05
    conf_threshold: float = 0.5
    sigma: float = 3.0
    clip_len: float = 5.0
    num_frames: int = 8
    stride: int = 8
    crop_w: int | None = None  # None keeps the full width

    def __post_init__(self):
        if self.disp_threshold < 0 or not 0 <= self.conf_threshold <= 1:
            raise ConfigInvalid("thresholds out of range")
        if self.sigma <= 0 or self.clip_len <= 0:
            raise ConfigInvalid("sigma and clip_len must be positive")
        if self.num_frames < 1 or self.stride < 1:
            raise ConfigInvalid("num_frames and stride must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown annotation keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class RawSample:
    x: float  # normalized
    y: float
    confidence: float
    in_bounds: bool


@dataclass(frozen=True)
class GazeSample:
    frame: int
    view: str
    x: float  # normalized to [0, 1] when in bounds
    y: float
    confidence: float
    label: str


@dataclass
class Clip:
    session_id: str
    view: str
    start: int
    length: int
    samples: list
    frames: np.ndarray | None = None  # (length, H, W, 1) uint8
    rel_rotations: np.ndarray | None = None  # (length, 3, 3) head->neck rotations

    @property
    def in_view(self) -> np.ndarray:
        return np.array([in_view_label(s) for s in self.samples], dtype=np.int64)


@dataclass
class ClipPair:
    head: Clip
    neck: Clip

    @property
    def rel_rotations(self) -> np.ndarray:
        return self.neck.rel_rotations


# ------------------------------------------------------------ synchronisation

def synchronize(ids_a, ids_b) -> int:
    """Offset ``d`` with ``ids_a[i] == ids_b[i + d]``; negative ids mean no marker."""
    ids_a = [int(v) for v in ids_a]
    ids_b = [int(v) for v in ids_b]
    if not ids_a or not ids_b:
        raise ValueError("marker sequences must be nonempty")
    where_b: dict[int, list[int]] = {}
    for j, m in enumerate(ids_b):
        if m >= 0:
            where_b.setdefault(m, []).append(j)
    votes: Counter = Counter()
    for i, m in enumerate(ids_a):
        for j in where_b.get(m, ()) if m >= 0 else ():
            votes[j - i] += 1
    if not votes:
        raise NoOverlap("no shared markers")
    ranked = votes.most_common()
    best, count = ranked[0]
    if count < MIN_SYNC_MATCHES:
        raise NoOverlap(f"best offset has only {count} matching markers")
    if len(ranked) > 1 and ranked[1][1] == count:
        raise AmbiguousSync(f"offsets {best} and {ranked[1][0]} tie with {count} matches")
    return best


def decode_stream_markers(frames: np.ndarray, limit: int | None = None,
                          stop_after_run: bool = False) -> np.ndarray:
    """Decode marker ids from a frame stream; -1 where no marker is found.

    With ``stop_after_run`` decoding ends at the first marker-free frame
    following a run of markers (markers only open a session).
    """
    n = len(frames) if limit is None else min(limit, len(frames))
    out = np.full(len(frames), -1, dtype=np.int64)
    seen = False
    for j in range(n):
        m = decode_sync_marker(frames[j])
        if m is not None:
            out[j] = m
            seen = True
        elif seen and stop_after_run:
            break
    return out


# ------------------------------------------------------------ event labelling

def classify_gaze_event(prev: GazeSample | None, cur: RawSample,
                        disp_threshold: float = 0.05, conf_threshold: float = 0.5) -> str:
    if not cur.confidence >= conf_threshold:
        return UNTRACKED
    if not cur.in_bounds:
        return TRUNCATED
    if prev is not None and prev.label in IN_VIEW:
        if math.hypot(cur.x - prev.x, cur.y - prev.y) > disp_threshold:
            return SACCADE
    return FIXATION


def raw_samples(session: SessionRecord, view: str) -> list[RawSample]:
    g = session.gaze[view]
    w, h = session.config.width, session.config.height
    return [
        RawSample(float(g.x[i]) / w, float(g.y[i]) / h, float(g.confidence[i]), bool(g.in_bounds[i]))
        for i in range(session.n_frames)
    ]


def label_stream(raw: list[RawSample], view: str, disp_threshold: float = 0.05,
                 conf_threshold: float = 0.5) -> list[GazeSample]:
    out: list[GazeSample] = []
    prev = None
    for i, r in enumerate(raw):
        label = classify_gaze_event(prev, r, disp_threshold, conf_threshold)
        prev = GazeSample(i, view, r.x, r.y, r.confidence, label)
        out.append(prev)
    return out


def label_session(session: SessionRecord, cfg: AnnotationConfig | None = None) -> dict:
    cfg = cfg or AnnotationConfig()
    return {
        v: label_stream(raw_samples(session, v), v, cfg.disp_threshold, cfg.conf_threshold)
        for v in VIEWS
    }


def in_view_label(sample: GazeSample) -> int:
    return int(sample.label in IN_VIEW)


# ------------------------------------------------------------ heatmap targets

def round_half_away(v):
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def rasterize(x: float, y: float, height: int, width: int) -> tuple[int, int]:
    """Normalized gaze to (row, col) pixel indices, clamped to the image."""
    col = int(np.clip(round_half_away(x * width - 0.5), 0, width - 1))
    row = int(np.clip(round_half_away(y * height - 0.5), 0, height - 1))
    return row, col


def make_heatmap_target(sample: GazeSample, height: int, width: int, sigma: float = 3.0) -> np.ndarray:
    if height < 4 or width < 4:
        raise ValueError("heatmap must be at least 4x4")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if sample.label not in IN_VIEW:
        return np.full((height, width), 1.0 / (height * width))
    row, col = rasterize(sample.x, sample.y, height, width)
    gy = np.exp(-((np.arange(height) - row) ** 2) / (2 * sigma**2))
    gx = np.exp(-((np.arange(width) - col) ** 2) / (2 * sigma**2))
    grid = np.outer(gy, gx)
    return grid / grid.sum()


# ------------------------------------------------------------ clips

def segment_clips(session: SessionRecord, clip_len: float = 5.0, labels: dict | None = None,
                  cfg: AnnotationConfig | None = None, with_frames: bool = True) -> list[Clip]:
    """Non-overlapping ``clip_len`` windows over the synchronized timeline, for
    every view. A trailing remainder is dropped."""
    fps = session.config.fps
    length = clip_len * fps
    if abs(length - round(length)) > 1e-9:
        raise ValueError("clip_len * fps must be an integer")
    length = int(round(length))
    labels = labels if labels is not None else label_session(session, cfg)
    n = session.n_frames
    rel = None
    if n:
        rel = np.stack([
            relative_extrinsics(session.poses["head"][i], session.poses["neck"][i]).rotation
            for i in range(n)
        ])
    clips = []
    for start in range(0, n - length + 1, length):
        for v in VIEWS:
            frames = None
            if with_frames and session.frames is not None:
                frames = session.synced_frames(v)[start:start + length]
            clips.append(Clip(
                session_id=session.session_id,
                view=v,
                start=start,
                length=length,
                samples=labels[v][start:start + length],
                frames=frames,
                rel_rotations=rel[start:start + length] if rel is not None else None,
            ))
    return clips


def pair_clips(clips: list[Clip]) -> list[ClipPair]:
    by_key = {}
    for c in clips:
        by_key.setdefault((c.session_id, c.start), {})[c.view] = c
    return [ClipPair(d["head"], d["neck"]) for _, d in sorted(by_key.items())
            if "head" in d and "neck" in d]


def sample_frames(clip_length: int, num_frames: int = 8, stride: int = 8, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> list[int]:
    """Frame indices ``s, s+stride, ...``; ``s`` is random in train mode, 0 in eval."""
    span = (num_frames - 1) * stride + 1
    if clip_length < span:
        raise ClipTooShort(f"clip of {clip_length} frames cannot hold {num_frames}x{stride}")
    if mode == "train":
        start = int(rng.integers(0, clip_length - span + 1))
    elif mode == "eval":
        start = 0
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return [start + k * stride for k in range(num_frames)]


CROP_MODES = ("left", "center", "right")


def crop_origin(width: int, crop_w: int, mode: str) -> int:
    if crop_w > width:
        raise ValueError("crop wider than frame")
    if mode == "left":
        return 0
    if mode == "center":
        return (width - crop_w) // 2
    if mode == "right":
        return width - crop_w
    raise ValueError(f"unknown crop mode {mode!r}")


def crop_augment(frames: np.ndarray, samples: list[GazeSample], mode: str, crop_w: int):
    """Crop frames horizontally and renormalize gaze to the crop.

    In-view samples that leave the crop become truncated.
    """
    width = frames.shape[2]
    x0 = crop_origin(width, crop_w, mode)
    out_frames = frames[:, :, x0:x0 + crop_w]
    out = []
    for s in samples:
        x = (s.x * width - x0) / crop_w
        label = s.label
        if label in IN_VIEW and not 0.0 <= x < 1.0:
            label = TRUNCATED
        out.append(dataclasses.replace(s, x=x, label=label))
    return out_frames, out


def uncrop_x(x: float, width: int, crop_w: int, mode: str) -> float:
    return (x * crop_w + crop_origin(width, crop_w, mode)) / width


# ------------------------------------------------------------ session pipeline

@dataclass
class SessionAnnotation:
    session_id: str
    offset: int
    mapping_error: float  # max pixel error of recomputed cross-view mapping
    labels: dict
    clips: list = field(default_factory=list)


def align_session(session: SessionRecord) -> int:
    """Recover the head/neck frame offset from the embedded markers and trim
    each stream's leading frames accordingly."""
    if session.frames is not None:
        ids = {v: decode_stream_markers(session.frames[v], stop_after_run=True) for v in VIEWS}
    else:
        ids = session.markers
    offset = synchronize(ids["head"], ids["neck"])
    # streams start at their first marker; the later one defines the shared timeline
    first_head = int(np.argmax(np.asarray(ids["head"]) >= 0))
    session.lead = {"head": first_head, "neck": first_head + offset}
    return offset


def verify_mapping(session: SessionRecord) -> float:
    head_i, neck_i = session.config.intrinsics("head"), session.config.intrinsics("neck")
    worst = 0.0
    gh, gn = session.gaze["head"], session.gaze["neck"]
    for i in range(session.n_frames):
        if not gh.in_bounds[i] or not np.isfinite(gn.x[i]):
            continue
        px = map_gaze_cross_view(
            PixelPoint(float(gh.x[i]), float(gh.y[i]), True), float(gh.depth[i]),
            (head_i, session.poses["head"][i]), (neck_i, session.poses["neck"][i]),
        )
        worst = max(worst, abs(px.x - gn.x[i]), abs(px.y - gn.y[i]))
    return worst


def annotate_session(session: SessionRecord, cfg: AnnotationConfig | None = None,
                     with_frames: bool = True) -> SessionAnnotation:
    cfg = cfg or AnnotationConfig()
    offset = align_session(session)
    err = verify_mapping(session)
    labels = label_session(session, cfg)
    clips = segment_clips(session, cfg.clip_len, labels, cfg, with_frames=with_frames)
    return SessionAnnotation(session.session_id, offset, err, labels, clips)
