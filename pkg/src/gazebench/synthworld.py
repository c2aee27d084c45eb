"""Deterministic paired head/neck session generator.

A session is a fixation/saccade gaze trajectory over static world landmarks,
observed by a head camera that loosely tracks the gaze and a neck camera that
sits below eye level, pitched down, and follows the torso with smaller motion.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import BehindCamera, ConfigInvalid, MarkerOverflow
from .geometry import (
    Intrinsics,
    PixelPoint,
    Pose,
    map_gaze_cross_view,
    pose_looking,
    project,
    project_many,
)

VIEWS = ("head", "neck")

# marker block: finder row, data rows, parity row; each cell is CELL x CELL px
MARKER_COLS = 4
MARKER_DATA_ROWS = 5
MARKER_BITS = MARKER_COLS * MARKER_DATA_ROWS
MARKER_CELL = 2
_FINDER = (1, 0, 1, 1)


@dataclass
class SceneConfig:
    fps: float = 20.0
    duration: float = 180.0
    width: int = 64
    height: int = 64
    head_focal: float = 30.0
    neck_focal: float = 34.0
    neck_drop: float = 0.25  # m below eye level
    neck_forward: float = 0.08
    neck_pitch: float = 0.41  # rad, downward tilt of the neck camera
    head_motion: float = 0.03  # rad, rotational jitter
    neck_motion: float = 0.01
    head_coupling: float = 0.75  # fraction of gaze angle the head turns
    head_lag: float = 0.08  # s, head tracking time constant
    torso_follow: float = 0.3
    torso_lag: float = 1.5  # s
    fixation_duration: tuple = (0.25, 1.2)
    saccade_displacement: tuple = (0.08, 0.45)  # normalized reference-view units
    gaze_region_u: tuple = (-0.1, 1.1)
    gaze_region_v: tuple = (0.33, 1.1)
    target_depth: tuple = (0.45, 2.5)
    landmark_count: int = 40
    low_confidence_fraction: float = 0.03
    neck_frame_offset: int = 0
    marker_window: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("fixation_duration", "saccade_displacement", "gaze_region_u",
                     "gaze_region_v", "target_depth"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not self.fps > 0:
            raise ConfigInvalid("fps must be positive")
        if not self.duration > 0:
            raise ConfigInvalid("duration must be positive")
        if self.width < 8 or self.height < 8:
            raise ConfigInvalid("image too small")
        if self.head_focal <= 0 or self.neck_focal <= 0:
            raise ConfigInvalid("focal lengths must be positive")
        if self.neck_motion > self.head_motion:
            raise ConfigInvalid("neck motion amplitude may not exceed head motion")
        if self.head_motion < 0 or self.neck_motion < 0:
            raise ConfigInvalid("motion amplitudes must be nonnegative")
        for name in ("fixation_duration", "saccade_displacement", "gaze_region_u",
                     "gaze_region_v", "target_depth"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigInvalid(f"{name} range is empty")
        if self.fixation_duration[0] <= 0 or self.target_depth[0] <= 0:
            raise ConfigInvalid("durations and depths must be positive")
        if self.saccade_displacement[0] < 0:
            raise ConfigInvalid("saccade displacement must be nonnegative")
        if not 0.0 <= self.low_confidence_fraction <= 1.0:
            raise ConfigInvalid("low_confidence_fraction must lie in [0, 1]")
        if self.landmark_count < 0 or self.marker_window < 0:
            raise ConfigInvalid("counts must be nonnegative")
        if self.n_frames < 1:
            raise ConfigInvalid("session has no frames")

    @property
    def n_frames(self) -> int:
        return int(round(self.fps * self.duration))

    @property
    def marker_frames(self) -> int:
        return int(round(self.fps * self.marker_window))

    def intrinsics(self, view: str) -> Intrinsics:
        f = self.head_focal if view == "head" else self.neck_focal
        return Intrinsics(f, f, self.width / 2, self.height / 2, self.width, self.height)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ViewGaze:
    """Per-frame gaze of one view in pixel coordinates."""

    x: np.ndarray
    y: np.ndarray
    depth: np.ndarray
    confidence: np.ndarray
    in_bounds: np.ndarray


@dataclass
class SessionRecord:
    config: SceneConfig
    session_id: str
    frames: dict | None  # view -> (n_stream, H, W, 1) uint8, or None when not rendered
    poses: dict  # view -> list[Pose] on the synchronized timeline
    targets: np.ndarray  # (N, 3) world gaze targets
    gaze: dict  # view -> ViewGaze
    markers: dict  # view -> int64 per stream frame, -1 where no marker is shown
    lead: dict  # view -> leading frames recorded before the shared timeline
    landmarks: np.ndarray
    segments: list = field(default_factory=list)  # (start, end) fixation frame spans

    @property
    def n_frames(self) -> int:
        return len(self.targets)

    @property
    def frame_offset(self) -> int:
        """Injected offset: head stream frame i shows the same instant as neck i+offset."""
        return self.lead["neck"] - self.lead["head"]

    def synced_frames(self, view: str) -> np.ndarray:
        lead = self.lead[view]
        return self.frames[view][lead:lead + self.n_frames]


# ---------------------------------------------------------------- rendering

LANDMARK_INTENSITY = 0.15
LANDMARK_SIGMA = 1.2
LANDMARK_CAP = 0.3
TARGET_SIGMA = 2.0
TARGET_RING_RADIUS = 5.0
TARGET_RING_INTENSITY = 0.7


def _blobs(xy: np.ndarray, sigma: float, width: int, height: int):
    gx = np.exp(-((np.arange(width)[None, :] - xy[:, :1]) ** 2) / (2 * sigma**2))
    gy = np.exp(-((np.arange(height)[None, :] - xy[:, 1:2]) ** 2) / (2 * sigma**2))
    return gx, gy


def render_frame(landmarks, gaze_target, cam: tuple[Intrinsics, Pose]) -> np.ndarray:
    """Grayscale (H, W) frame in [0, 1].

    Landmarks are dim Gaussian blobs; the gaze target is a bright core with a
    fainter ring around it. Only points projecting inside the image are drawn.
    Pixel index ``i`` is rendered at continuous coordinate ``i``.
    """
    intr, pose = cam
    w, h = intr.width, intr.height
    frame = np.zeros((h, w))
    landmarks = np.asarray(landmarks, dtype=np.float64).reshape(-1, 3)
    if len(landmarks):
        xy, _, valid = project_many(landmarks, intr, pose)
        keep = valid & (xy[:, 0] >= 0) & (xy[:, 0] < w) & (xy[:, 1] >= 0) & (xy[:, 1] < h)
        if keep.any():
            gx, gy = _blobs(xy[keep], LANDMARK_SIGMA, w, h)
            frame = np.minimum(LANDMARK_INTENSITY * gy.T @ gx, LANDMARK_CAP)
    if gaze_target is not None:
        try:
            px, _ = project(gaze_target, intr, pose)
        except BehindCamera:
            px = None
        if px is not None and px.in_bounds:
            xs = np.arange(w)[None, :] - px.x
            ys = np.arange(h)[:, None] - px.y
            r2 = xs**2 + ys**2
            core = np.exp(-r2 / (2 * TARGET_SIGMA**2))
            ring = TARGET_RING_INTENSITY * np.exp(
                -((np.sqrt(r2) - TARGET_RING_RADIUS) ** 2) / (2 * 0.8**2)
            )
            frame = np.maximum(frame, np.maximum(core, ring))
    return frame


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------- markers

def marker_capacity() -> int:
    return 1 << MARKER_BITS


def _marker_cells(marker_id: int) -> np.ndarray:
    bits = [(marker_id >> i) & 1 for i in range(MARKER_BITS)]
    data = np.array(bits, dtype=np.uint8).reshape(MARKER_DATA_ROWS, MARKER_COLS)
    parity = data.sum(axis=0) % 2
    return np.vstack([np.array(_FINDER, dtype=np.uint8), data, parity[None, :]])


def embed_sync_marker(frame: np.ndarray, marker_id: int) -> np.ndarray:
    """Return a copy of ``frame`` with ``marker_id`` written into the top-left
    corner as a grid of black/white cells (finder row, data, column parity)."""
    if marker_id < 0:
        raise ValueError("marker_id must be nonnegative")
    if marker_id >= marker_capacity():
        raise MarkerOverflow(f"marker id {marker_id} exceeds {MARKER_BITS}-bit grid")
    out = np.array(frame, copy=True)
    cells = _marker_cells(int(marker_id))
    block = np.kron(cells, np.ones((MARKER_CELL, MARKER_CELL), dtype=np.uint8))
    rows, cols = block.shape
    if out.shape[0] < rows or out.shape[1] < cols:
        raise ValueError("frame too small for a marker")
    white = 255 if out.dtype == np.uint8 else 1.0
    region = out[:rows, :cols]
    region[...] = (block * white).reshape(region.shape[:2] + (1,) * (region.ndim - 2))
    return out


def decode_sync_marker(frame: np.ndarray) -> int | None:
    """Marker id in ``frame`` or None when no valid marker block is present."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if np.asarray(frame).dtype == np.uint8:
        arr = arr / 255.0
    rows = (MARKER_DATA_ROWS + 2) * MARKER_CELL
    cols = MARKER_COLS * MARKER_CELL
    if arr.shape[0] < rows or arr.shape[1] < cols:
        return None
    block = arr[:rows, :cols].reshape(rows // MARKER_CELL, MARKER_CELL, MARKER_COLS, MARKER_CELL)
    values = block.mean(axis=(1, 3))
    # cells are painted pure black or white; anything else is scene content
    if np.any((values > 0.02) & (values < 0.98)):
        return None
    cells = (values > 0.5).astype(np.uint8)
    if tuple(cells[0]) != _FINDER:
        return None
    data = cells[1:-1]
    if not np.array_equal(data.sum(axis=0) % 2, cells[-1]):
        return None
    bits = data.reshape(-1)
    return int(sum(int(b) << i for i, b in enumerate(bits)))


# ---------------------------------------------------------------- generation

def _reference_ray(u: float, v: float, cfg: SceneConfig) -> np.ndarray:
    """Direction through normalized (u, v) of the torso-forward reference view."""
    return np.array(
        [(u * cfg.width - cfg.width / 2) / cfg.head_focal,
         (v * cfg.height - cfg.height / 2) / cfg.head_focal, 1.0]
    )


def _sample_gaze_plan(cfg: SceneConfig, rng: np.random.Generator):
    """Piecewise-constant reference-view gaze positions and depths per frame."""
    n = cfg.n_frames
    u_lo, u_hi = cfg.gaze_region_u
    v_lo, v_hi = cfg.gaze_region_v
    uv = np.empty((n, 2))
    depth = np.empty(n)
    segments = []
    cur = np.array([rng.uniform(u_lo, u_hi), rng.uniform(v_lo, v_hi)])
    d = rng.uniform(*cfg.target_depth)
    t = 0
    while t < n:
        length = max(1, int(round(rng.uniform(*cfg.fixation_duration) * cfg.fps)))
        end = min(n, t + length)
        uv[t:end] = cur
        depth[t:end] = d
        segments.append((t, end))
        t = end
        # saccade: jump by a magnitude within the configured range
        mag = rng.uniform(*cfg.saccade_displacement)
        for _ in range(32):
            ang = rng.uniform(0.0, 2 * math.pi)
            nxt = cur + mag * np.array([math.cos(ang), math.sin(ang)])
            if u_lo <= nxt[0] <= u_hi and v_lo <= nxt[1] <= v_hi:
                break
        else:
            centre = np.array([(u_lo + u_hi) / 2, (v_lo + v_hi) / 2])
            step = centre - cur
            norm = np.linalg.norm(step)
            nxt = cur + mag * (step / norm if norm > 0 else np.array([1.0, 0.0]))
        cur = nxt
        d = rng.uniform(*cfg.target_depth)
    return uv, depth, segments


def _angles(direction: np.ndarray) -> tuple[float, float]:
    """Yaw (right positive) and pitch (down positive) of a world direction."""
    x, y, z = direction
    yaw = math.atan2(x, z)
    pitch = math.atan2(y, math.hypot(x, z))
    return yaw, pitch


def _ar1(rng, n: int, amplitude: float, dims: int, rho: float = 0.9) -> np.ndarray:
    """Stationary AR(1) noise with marginal std ``amplitude``."""
    out = np.zeros((n, dims))
    if amplitude == 0 or n == 0:
        return out
    eps = rng.normal(0.0, amplitude * math.sqrt(1 - rho**2), size=(n, dims))
    out[0] = rng.normal(0.0, amplitude, size=dims)
    for i in range(1, n):
        out[i] = rho * out[i - 1] + eps[i]
    return out


def _landmarks(cfg: SceneConfig, rng) -> np.ndarray:
    n = cfg.landmark_count
    yaw = rng.uniform(-1.4, 1.4, n)
    pitch = rng.uniform(-0.5, 1.0, n)
    dist = rng.uniform(0.8, 4.0, n)
    return np.stack(
        [dist * np.cos(pitch) * np.sin(yaw), dist * np.sin(pitch), dist * np.cos(pitch) * np.cos(yaw)],
        axis=1,
    )


def generate_session(config: SceneConfig, render: bool = True) -> SessionRecord:
    """Generate one session. ``render=False`` skips pixels (gaze/poses only)."""
    cfg = config
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_frames
    dt = 1.0 / cfg.fps

    landmarks = _landmarks(cfg, rng)
    uv, depth, segments = _sample_gaze_plan(cfg, rng)
    rays = np.stack([_reference_ray(u, v, cfg) for u, v in uv]) if n else np.zeros((0, 3))
    targets = rays / rays[:, 2:3] * depth[:, None]

    head_noise = _ar1(rng, n, cfg.head_motion, 3)
    neck_noise = _ar1(rng, n, cfg.neck_motion, 3)
    low_conf = rng.random(n) < cfg.low_confidence_fraction
    confidence = np.where(low_conf, rng.uniform(0.05, 0.45, n), 1.0)

    a_head = 1.0 - math.exp(-dt / cfg.head_lag) if cfg.head_lag > 0 else 1.0
    a_torso = 1.0 - math.exp(-dt / cfg.torso_lag) if cfg.torso_lag > 0 else 1.0
    eye = np.zeros(3)
    head_yaw = head_pitch = None
    torso_yaw = 0.0
    poses = {"head": [], "neck": []}
    for i in range(n):
        g_yaw, g_pitch = _angles(targets[i] - eye)
        want = (cfg.head_coupling * g_yaw, cfg.head_coupling * g_pitch)
        if head_yaw is None:
            head_yaw, head_pitch = want
        else:
            head_yaw += a_head * (want[0] - head_yaw)
            head_pitch += a_head * (want[1] - head_pitch)
        torso_yaw += a_torso * (cfg.torso_follow * head_yaw - torso_yaw)
        hn, nn = head_noise[i], neck_noise[i]
        poses["head"].append(pose_looking(eye, head_yaw + hn[0], head_pitch + hn[1], hn[2]))
        c, s = math.cos(torso_yaw), math.sin(torso_yaw)
        neck_centre = np.array([s * cfg.neck_forward, cfg.neck_drop, c * cfg.neck_forward])
        poses["neck"].append(
            pose_looking(neck_centre, torso_yaw + nn[0], cfg.neck_pitch + nn[1], nn[2])
        )

    gaze = {}
    head_intr, neck_intr = cfg.intrinsics("head"), cfg.intrinsics("neck")
    cols = {v: {k: np.empty(n) for k in ("x", "y", "depth", "conf")} for v in VIEWS}
    inb = {v: np.zeros(n, dtype=bool) for v in VIEWS}
    for i in range(n):
        hp, hd = project(targets[i], head_intr, poses["head"][i])
        cols["head"]["x"][i], cols["head"]["y"][i] = hp.x, hp.y
        cols["head"]["depth"][i], cols["head"]["conf"][i] = hd, confidence[i]
        inb["head"][i] = hp.in_bounds
        neck_cam = (neck_intr, poses["neck"][i])
        try:
            if hp.in_bounds:
                npx = map_gaze_cross_view(hp, hd, (head_intr, poses["head"][i]), neck_cam)
            else:
                npx, _ = project(targets[i], *neck_cam)
            nd = float(poses["neck"][i].apply(targets[i])[2])
            nconf = confidence[i]
        except BehindCamera:
            npx, nd, nconf = PixelPoint(math.nan, math.nan, False), math.nan, 0.0
        cols["neck"]["x"][i], cols["neck"]["y"][i] = npx.x, npx.y
        cols["neck"]["depth"][i], cols["neck"]["conf"][i] = nd, nconf
        inb["neck"][i] = npx.in_bounds
    for v in VIEWS:
        c = cols[v]
        gaze[v] = ViewGaze(c["x"], c["y"], c["depth"], c["conf"], inb[v])

    off = int(cfg.neck_frame_offset)
    lead = {"head": max(0, -off), "neck": max(0, off)}
    window = min(cfg.marker_frames, n)
    markers = {}
    for v in VIEWS:
        ids = np.full(lead[v] + n, -1, dtype=np.int64)
        ids[lead[v]:lead[v] + window] = np.arange(window)
        markers[v] = ids

    frames = None
    if render:
        frames = {}
        for v in VIEWS:
            intr = cfg.intrinsics(v)
            stream = np.empty((lead[v] + n, cfg.height, cfg.width, 1), dtype=np.uint8)
            for j in range(lead[v] + n):
                # leading frames precede the shared timeline; camera idles at its first pose
                i = max(0, j - lead[v])
                img = to_uint8(render_frame(landmarks, targets[i], (intr, poses[v][i])))
                if markers[v][j] >= 0:
                    img = embed_sync_marker(img, int(markers[v][j]))
                stream[j, :, :, 0] = img
            frames[v] = stream

    return SessionRecord(
        config=cfg,
        session_id=f"s{cfg.seed:06d}",
        frames=frames,
        poses=poses,
        targets=targets,
        gaze=gaze,
        markers=markers,
        lead=lead,
        landmarks=landmarks,
        segments=segments,
    )


# ---------------------------------------------------------------- session files

def _num(v: float):
    return None if not math.isfinite(v) else float(v)


def write_session(record: SessionRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = record.config
    meta = {
        "session_id": record.session_id,
        "config": cfg.to_dict(),
        "fps": cfg.fps,
        "n_frames": record.n_frames,
        "sizes": {v: [cfg.height, cfg.width] for v in VIEWS},
        "intrinsics": {v: cfg.intrinsics(v).to_dict() for v in VIEWS},
        "lead": record.lead,
        "frame_offset": record.frame_offset,
        "rendered": record.frames is not None,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(out / "poses.jsonl", "w") as fh:
        for i in range(record.n_frames):
            for v in VIEWS:
                p = record.poses[v][i]
                fh.write(json.dumps({
                    "frame": i, "view": v,
                    "rotation": [float(a) for a in p.rotation.reshape(-1)],
                    "translation": [float(a) for a in p.translation],
                }) + "\n")
    with open(out / "gaze.jsonl", "w") as fh:
        for i in range(record.n_frames):
            for v in VIEWS:
                g = record.gaze[v]
                fh.write(json.dumps({
                    "frame": i, "view": v, "x": _num(g.x[i]), "y": _num(g.y[i]),
                    "depth": _num(g.depth[i]), "confidence": float(g.confidence[i]),
                    "in_bounds": bool(g.in_bounds[i]),
                }) + "\n")
    with open(out / "markers.jsonl", "w") as fh:
        for v in VIEWS:
            for j, m in enumerate(record.markers[v]):
                fh.write(json.dumps({"view": v, "frame": j, "marker": int(m)}) + "\n")
    np.savetxt(out / "targets.txt", record.targets, fmt="%.17g")
    if record.frames is not None:
        for v in VIEWS:
            tensorio.save(out / f"frames_{v}.gzt", record.frames[v])
    return out


def read_session(path) -> SessionRecord:
    """Load a session directory written by :func:`write_session`."""
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    cfg = SceneConfig.from_dict(meta["config"])
    n = int(meta["n_frames"])
    poses = {v: [None] * n for v in VIEWS}
    for line in (root / "poses.jsonl").read_text().splitlines():
        rec = json.loads(line)
        poses[rec["view"]][rec["frame"]] = Pose(
            np.array(rec["rotation"]).reshape(3, 3), np.array(rec["translation"])
        )
    cols = {v: {k: np.full(n, np.nan) for k in ("x", "y", "depth", "confidence")} for v in VIEWS}
    inb = {v: np.zeros(n, dtype=bool) for v in VIEWS}
    for line in (root / "gaze.jsonl").read_text().splitlines():
        rec = json.loads(line)
        v, i = rec["view"], rec["frame"]
        for k in ("x", "y", "depth", "confidence"):
            if rec[k] is not None:
                cols[v][k][i] = rec[k]
        inb[v][i] = rec["in_bounds"]
    gaze = {
        v: ViewGaze(cols[v]["x"], cols[v]["y"], cols[v]["depth"], cols[v]["confidence"], inb[v])
        for v in VIEWS
    }
    markers = {v: [] for v in VIEWS}
    for line in (root / "markers.jsonl").read_text().splitlines():
        rec = json.loads(line)
        markers[rec["view"]].append(rec["marker"])
    markers = {v: np.array(m, dtype=np.int64) for v, m in markers.items()}
    frames = None
    if meta.get("rendered") and (root / "frames_head.gzt").exists():
        frames = {v: tensorio.load(root / f"frames_{v}.gzt") for v in VIEWS}
    targets = np.loadtxt(root / "targets.txt", ndmin=2) if n else np.zeros((0, 3))
    return SessionRecord(
        config=cfg,
        session_id=meta["session_id"],
        frames=frames,
        poses=poses,
        targets=targets.reshape(-1, 3),
        gaze=gaze,
        markers=markers,
        lead={k: int(v) for k, v in meta["lead"].items()},
        landmarks=np.zeros((0, 3)),
    )
