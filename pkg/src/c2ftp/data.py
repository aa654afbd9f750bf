"""Track ingestion, scene-window construction, occupancy grid and maneuver labels.

Coordinates are metric throughout: ``x`` is lateral, ``y`` longitudinal.
Every window is expressed relative to the target's last observed position.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
import torch

from .config import Config, ConfigError

FOOT = 0.3048
CACHE_FORMAT = "c2ftp-windows"
CACHE_VERSION = 1
# role -> share of the data; the 7:2:1 ratio is read as train:test:val
SPLIT_ROLES = (("train", 7), ("test", 2), ("val", 1))


class DataError(ValueError):
    """Malformed input data."""


class TrackPoint(NamedTuple):
    agent_id: int
    frame: int
    x: float
    y: float
    lane_id: int
    speed: Optional[float] = None


@dataclass(frozen=True)
class Track:
    agent_id: int
    frames: np.ndarray  # int64
    x: np.ndarray
    y: np.ndarray
    lane: np.ndarray  # int64
    speed: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Track):
            return NotImplemented
        if self.agent_id != other.agent_id or (self.speed is None) != (other.speed is None):
            return False
        pairs = [(self.frames, other.frames), (self.x, other.x), (self.y, other.y), (self.lane, other.lane)]
        if self.speed is not None:
            pairs.append((self.speed, other.speed))
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)

    def points(self) -> list[TrackPoint]:
        sp = self.speed if self.speed is not None else [None] * len(self)
        return [
            TrackPoint(self.agent_id, int(f), float(x), float(y), int(l), None if s is None else float(s))
            for f, x, y, l, s in zip(self.frames, self.x, self.y, self.lane, sp)
        ]

    def xy(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=-1)


class Lateral(enum.IntEnum):
    LEFT = 0
    KEEP = 1
    RIGHT = 2


class Longitudinal(enum.IntEnum):
    BRAKE = 0
    MAINTAIN = 1


@dataclass(frozen=True)
class ManeuverLabel:
    lateral: Lateral
    longitudinal: Longitudinal

    @property
    def mode_index(self) -> int:
        return 2 * int(self.lateral) + int(self.longitudinal)

    @classmethod
    def from_index(cls, index: int) -> "ManeuverLabel":
        if not 0 <= index < 6:
            raise ValueError(f"mode index {index} outside [0, 6)")
        return cls(Lateral(index // 2), Longitudinal(index % 2))


@dataclass(frozen=True)
class OccupancyGrid:
    rows: int
    cols: int
    cell_to_neighbor: dict  # (row, col) -> agent_id
    mask: np.ndarray  # rows x cols, center cell True (target)

    @property
    def center(self) -> tuple[int, int]:
        return self.rows // 2, self.cols // 2


@dataclass(frozen=True)
class SceneWindow:
    agent_id: int
    frame: int  # frame of the last observed history point
    target_history: np.ndarray  # (t_h, 2)
    target_future: np.ndarray  # (t_f, 2)
    frame_origin: np.ndarray  # (2,) absolute position of the normalization origin
    lanes: np.ndarray  # (t_h + t_f,) lane ids of the target
    speeds: np.ndarray  # (t_h + t_f,) m/s
    neighbor_cells: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # flat cell ids
    neighbor_histories: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 2)))
    maneuver: Optional[ManeuverLabel] = None


# ---------------------------------------------------------------------------
# ingestion

_REQUIRED = ["agent_id", "frame", "x", "y", "lane_id"]


def ingest_tracks(path: str | Path, unit: str = "meters") -> list[Track]:
    """Read a track CSV (``agent_id,frame,x,y,lane_id[,speed]``), converting to meters."""
    if unit not in ("feet", "meters"):
        raise ConfigError(f"unit must be 'feet' or 'meters', got {unit!r}")
    scale = FOOT if unit == "feet" else 1.0
    rows: dict[int, list[tuple]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        if header[:5] != _REQUIRED or header[5:] not in ([], ["speed"]):
            raise DataError(f"line 1: bad header {header!r}, expected {','.join(_REQUIRED)}[,speed]")
        has_speed = len(header) == 6
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                agent, frame, lane = int(row[0]), int(row[1]), int(row[4])
                x, y = float(row[2]) * scale, float(row[3]) * scale
                speed = float(row[5]) * scale if has_speed else None
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"line {lineno}: non-finite coordinate")
            if lane < 1:
                raise DataError(f"line {lineno}: lane_id must be >= 1")
            rows[agent].append((frame, x, y, lane, speed))

    tracks = []
    for agent in sorted(rows):
        pts = sorted(rows[agent], key=lambda r: r[0])
        frames = np.array([p[0] for p in pts], dtype=np.int64)
        if np.any(np.diff(frames) <= 0):
            raise DataError(f"agent {agent}: frames are not strictly increasing")
        tracks.append(
            Track(
                agent_id=agent,
                frames=frames,
                x=np.array([p[1] for p in pts]),
                y=np.array([p[2] for p in pts]),
                lane=np.array([p[3] for p in pts], dtype=np.int64),
                speed=np.array([p[4] for p in pts]) if has_speed else None,
            )
        )
    return tracks


def write_tracks(tracks: Sequence[Track], path: str | Path) -> None:
    """Write tracks in meters using the ingest CSV schema (round-trips exactly)."""
    has_speed = bool(tracks) and all(t.speed is not None for t in tracks)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(_REQUIRED + (["speed"] if has_speed else []))
        for t in tracks:
            for i in range(len(t)):
                row = [t.agent_id, int(t.frames[i]), repr(float(t.x[i])), repr(float(t.y[i])), int(t.lane[i])]
                if has_speed:
                    row.append(repr(float(t.speed[i])))
                w.writerow(row)


# ---------------------------------------------------------------------------
# windows


def downsample(track: Track, stride: int) -> Track:
    keep = track.frames % stride == 0
    return Track(
        agent_id=track.agent_id,
        frames=track.frames[keep],
        x=track.x[keep],
        y=track.y[keep],
        lane=track.lane[keep],
        speed=None if track.speed is None else track.speed[keep],
    )


def _speeds(track: Track, hz: int) -> np.ndarray:
    if track.speed is not None:
        return track.speed
    xy = track.xy()
    if len(xy) < 2:
        return np.zeros(len(xy))
    step = np.linalg.norm(np.diff(xy, axis=0), axis=-1) * hz
    return np.concatenate([step[:1], step])


def _stride(source_hz: int, target_hz: int) -> int:
    if source_hz <= 0 or target_hz <= 0 or source_hz % target_hz:
        raise ConfigError(f"source rate {source_hz} Hz is not a multiple of {target_hz} Hz")
    return source_hz // target_hz


def build_windows(
    tracks: Iterable[Track],
    source_hz: int,
    target_hz: int = 5,
    t_h: int = 15,
    t_f: int = 25,
) -> list[SceneWindow]:
    """Slide a ``t_h + t_f`` window (stride 1 at the target rate) over every track."""
    stride = _stride(source_hz, target_hz)
    span = t_h + t_f
    out = []
    for track in tracks:
        ds = downsample(track, stride)
        if len(ds) < span:
            continue
        xy = ds.xy()
        speeds = _speeds(ds, target_hz)
        # windows may not cross a gap in the downsampled frames
        breaks = np.flatnonzero(np.diff(ds.frames) != stride) + 1
        for lo, hi in zip(np.r_[0, breaks], np.r_[breaks, len(ds)]):
            for s in range(lo, hi - span + 1):
                origin = xy[s + t_h - 1].copy()
                rel = xy[s : s + span] - origin
                out.append(
                    SceneWindow(
                        agent_id=ds.agent_id,
                        frame=int(ds.frames[s + t_h - 1]),
                        target_history=rel[:t_h],
                        target_future=rel[t_h:],
                        frame_origin=origin,
                        lanes=ds.lane[s : s + span].copy(),
                        speeds=speeds[s : s + span].copy(),
                        neighbor_histories=np.zeros((0, t_h, 2)),
                    )
                )
    return out


class FrameIndex:
    """Downsampled tracks indexed by frame for neighbor lookup."""

    def __init__(self, tracks: Iterable[Track], source_hz: int, target_hz: int = 5):
        stride = _stride(source_hz, target_hz)
        self.stride = stride
        self.tracks: dict[int, Track] = {}
        self.at_frame: dict[int, list[tuple[int, int]]] = defaultdict(list)  # frame -> (agent, row)
        for t in tracks:
            ds = downsample(t, stride)
            self.tracks[t.agent_id] = ds
            for i, f in enumerate(ds.frames):
                self.at_frame[int(f)].append((t.agent_id, i))

    def history(self, agent_id: int, frame: int, t_h: int) -> np.ndarray:
        """Positions at the ``t_h`` frames ending at ``frame``; missing frames take the nearest sample."""
        tr = self.tracks[agent_id]
        want = frame - self.stride * np.arange(t_h - 1, -1, -1)
        idx = np.clip(np.searchsorted(tr.frames, want), 0, len(tr) - 1)
        left = np.clip(idx - 1, 0, len(tr) - 1)
        use_left = np.abs(tr.frames[left] - want) < np.abs(tr.frames[idx] - want)
        idx = np.where(use_left, left, idx)
        return tr.xy()[idx]


def assign_neighbor_grid(
    window: SceneWindow, index: FrameIndex, config: Config | None = None
) -> tuple[OccupancyGrid, SceneWindow]:
    """Place agents present at the window's last history frame on the occupancy grid."""
    cfg = config or Config()
    rows, cols = cfg.grid_rows, cfg.grid_cols
    half_rows, half_cols = rows // 2, cols // 2
    reach_ft = cfg.grid_row_ft * half_rows
    lane0 = int(window.lanes[cfg.t_h - 1])
    best: dict[tuple[int, int], tuple[float, int]] = {}
    for agent, i in index.at_frame.get(window.frame, []):
        if agent == window.agent_id:
            continue
        tr = index.tracks[agent]
        dy_ft = (tr.y[i] - window.frame_origin[1]) / FOOT
        offset = int(tr.lane[i]) - lane0
        if not cfg.left_is_smaller_lane:
            offset = -offset
        if abs(dy_ft) > reach_ft or abs(offset) > half_cols:
            continue
        cell = (int(math.floor(dy_ft / cfg.grid_row_ft + 0.5)) + half_rows, offset + half_cols)
        if cell == (half_rows, half_cols):
            continue  # target owns the center cell
        if cell not in best or abs(dy_ft) < best[cell][0]:
            best[cell] = (abs(dy_ft), agent)

    mask = np.zeros((rows, cols), dtype=bool)
    mask[half_rows, half_cols] = True
    cells = sorted(best)
    for c in cells:
        mask[c] = True
    grid = OccupancyGrid(rows, cols, {c: best[c][1] for c in cells}, mask)
    hist = np.zeros((len(cells), cfg.t_h, 2))
    for j, c in enumerate(cells):
        hist[j] = index.history(best[c][1], window.frame, cfg.t_h) - window.frame_origin
    flat = np.array([r * cols + c for r, c in cells], dtype=np.int64)
    return grid, dataclasses.replace(window, neighbor_cells=flat, neighbor_histories=hist)


def label_maneuver(window: SceneWindow, config: Config | None = None) -> ManeuverLabel:
    cfg = config or Config()
    t_h = len(window.target_history)
    lane0 = window.lanes[t_h - 1]
    lateral = Lateral.KEEP
    changed = np.flatnonzero(window.lanes[t_h:] != lane0)
    if changed.size:
        smaller = window.lanes[t_h + changed[0]] < lane0
        lateral = Lateral.LEFT if smaller == cfg.left_is_smaller_lane else Lateral.RIGHT
    v0 = float(window.speeds[t_h - 1])
    longitudinal = Longitudinal.MAINTAIN
    if v0 > 0 and float(np.mean(window.speeds[t_h:])) < cfg.brake_ratio * v0:
        longitudinal = Longitudinal.BRAKE
    return ManeuverLabel(lateral, longitudinal)


def prepare_scenes(tracks: Sequence[Track], source_hz: int, config: Config | None = None) -> list[SceneWindow]:
    """Windows with neighbors and labels attached."""
    cfg = config or Config()
    index = FrameIndex(tracks, source_hz, cfg.target_hz)
    out = []
    for w in build_windows(tracks, source_hz, cfg.target_hz, cfg.t_h, cfg.t_f):
        _, w = assign_neighbor_grid(w, index, cfg)
        out.append(dataclasses.replace(w, maneuver=label_maneuver(w, cfg)))
    return out


def split_dataset(windows: Sequence, seed: int = 0) -> dict[str, list]:
    """Deterministic 7:2:1 split, read as train:test:val."""
    n = len(windows)
    order = np.random.default_rng(seed).permutation(n)
    sizes = {"train": n * 7 // 10, "test": n * 2 // 10}
    sizes["val"] = n - sizes["train"] - sizes["test"]
    out, start = {}, 0
    for role, _ in SPLIT_ROLES:
        out[role] = [windows[i] for i in order[start : start + sizes[role]]]
        start += sizes[role]
    return out


def split_indices(n: int, seed: int = 0) -> dict[str, np.ndarray]:
    parts = split_dataset(list(range(n)), seed)
    return {k: np.asarray(v, dtype=np.int64) for k, v in parts.items()}


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticConfig:
    lanes: int = 3
    agents: int = 30
    duration: float = 20.0  # seconds
    hz: int = 10
    straight: float = 0.6
    lane_change: float = 0.25
    brake: float = 0.15
    noise: float = 0.05  # position noise sigma, meters
    seed: int = 0
    lane_width: float = 3.7
    speed_range: tuple = (10.0, 20.0)
    decel_range: tuple = (2.5, 4.0)
    min_speed: float = 0.0
    lane_change_scale: float = 1.5  # sigmoid time constant, seconds
    spacing: float = 30.0  # mean longitudinal gap per lane, meters


def generate_synthetic(cfg: SyntheticConfig) -> list[Track]:
    if cfg.duration <= 0 or cfg.hz <= 0:
        raise ConfigError("duration and hz must be positive")
    if cfg.lanes < 1 or cfg.agents < 0:
        raise ConfigError("need at least one lane and a non-negative agent count")
    mix = np.array([cfg.straight, cfg.lane_change, cfg.brake], dtype=float)
    if np.any(mix < 0) or mix.sum() <= 0:
        raise ConfigError("maneuver mix must be non-negative and not all zero")
    rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.duration * cfg.hz))
    t = np.arange(n) / cfg.hz
    w = cfg.lane_width
    road = max(cfg.agents / cfg.lanes, 1.0) * cfg.spacing
    tracks = []
    for agent in range(1, cfg.agents + 1):
        kind = rng.choice(3, p=mix / mix.sum())
        lane = int(rng.integers(1, cfg.lanes + 1))
        y0 = rng.uniform(0.0, road)
        v0 = rng.uniform(*cfg.speed_range)
        x = np.full(n, (lane - 0.5) * w)
        if kind == 1 and cfg.lanes > 1:
            dirs = [d for d in (-1, 1) if 1 <= lane + d <= cfg.lanes]
            d = dirs[rng.integers(len(dirs))]
            tc = rng.uniform(0.15 * cfg.duration, 0.85 * cfg.duration)
            x = x + d * w / (1.0 + np.exp(-(t - tc) / cfg.lane_change_scale))
        if kind == 2:
            v0 = rng.uniform(cfg.speed_range[1], cfg.speed_range[1] * 1.2)
            a = rng.uniform(*cfg.decel_range)
            t_stop = max((v0 - cfg.min_speed) / a, 0.0)
            tt = np.minimum(t, t_stop)
            speed = np.maximum(v0 - a * t, cfg.min_speed)
            y = y0 + v0 * tt - 0.5 * a * tt**2 + cfg.min_speed * (t - tt)
        else:
            speed = np.full(n, v0)
            y = y0 + v0 * t
        lanes = np.clip(np.floor(x / w).astype(np.int64) + 1, 1, cfg.lanes)
        noise = rng.normal(0.0, cfg.noise, size=(2, n)) if cfg.noise > 0 else np.zeros((2, n))
        tracks.append(
            Track(agent, np.arange(n, dtype=np.int64), x + noise[0], y + noise[1], lanes, speed.astype(float))
        )
    return tracks


# ---------------------------------------------------------------------------
# window cache


def save_windows(windows: Sequence[SceneWindow], path: str | Path, meta: dict | None = None) -> None:
    """Columnar ``.npz`` cache; neighbors stored CSR-style with per-scene offsets."""
    n = len(windows)
    t_h = windows[0].target_history.shape[0] if n else (meta or {}).get("t_h", 15)
    t_f = windows[0].target_future.shape[0] if n else (meta or {}).get("t_f", 25)
    counts = [len(w.neighbor_cells) for w in windows]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    modes = np.array([w.maneuver.mode_index if w.maneuver else -1 for w in windows], dtype=np.int64)
    header = {"format": CACHE_FORMAT, "version": CACHE_VERSION, "t_h": t_h, "t_f": t_f, **(meta or {})}
    arrays = dict(
        agent_id=np.array([w.agent_id for w in windows], dtype=np.int64),
        frame=np.array([w.frame for w in windows], dtype=np.int64),
        history=np.stack([w.target_history for w in windows]) if n else np.zeros((0, t_h, 2)),
        future=np.stack([w.target_future for w in windows]) if n else np.zeros((0, t_f, 2)),
        origin=np.stack([w.frame_origin for w in windows]) if n else np.zeros((0, 2)),
        lanes=np.stack([w.lanes for w in windows]) if n else np.zeros((0, t_h + t_f), dtype=np.int64),
        speeds=np.stack([w.speeds for w in windows]) if n else np.zeros((0, t_h + t_f)),
        mode=modes,
        nbr_offsets=offsets,
        nbr_cells=np.concatenate([w.neighbor_cells for w in windows]).astype(np.int64) if n else np.zeros(0, np.int64),
        nbr_history=(
            np.concatenate([w.neighbor_histories.reshape(-1, t_h, 2) for w in windows])
            if n
            else np.zeros((0, t_h, 2))
        ),
        meta=np.array(json.dumps(header, sort_keys=True)),
    )
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_windows(path: str | Path) -> tuple[list[SceneWindow], dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CACHE_FORMAT:
            raise DataError(f"{path}: not a window cache")
        if meta.get("version") != CACHE_VERSION:
            raise DataError(f"{path}: unsupported cache version {meta.get('version')}")
        a = {k: z[k] for k in z.files if k != "meta"}
    off = a["nbr_offsets"]
    out = []
    for i in range(len(a["agent_id"])):
        lo, hi = off[i], off[i + 1]
        out.append(
            SceneWindow(
                agent_id=int(a["agent_id"][i]),
                frame=int(a["frame"][i]),
                target_history=a["history"][i],
                target_future=a["future"][i],
                frame_origin=a["origin"][i],
                lanes=a["lanes"][i],
                speeds=a["speeds"][i],
                neighbor_cells=a["nbr_cells"][lo:hi],
                neighbor_histories=a["nbr_history"][lo:hi],
                maneuver=ManeuverLabel.from_index(int(a["mode"][i])) if a["mode"][i] >= 0 else None,
            )
        )
    return out, meta


# ---------------------------------------------------------------------------
# tensors


@dataclass
class SceneBatch:
    history: torch.Tensor  # (B, t_h, 2)
    future: torch.Tensor  # (B, t_f, 2)
    nbr_history: torch.Tensor  # (M, t_h, 2)
    nbr_batch: torch.Tensor  # (M,) scene index within the batch
    nbr_cell: torch.Tensor  # (M,) flat grid cell
    mode: torch.Tensor  # (B,) label mode index, -1 when unlabeled

    def __len__(self) -> int:
        return self.history.shape[0]

    def to(self, dtype: torch.dtype) -> "SceneBatch":
        return dataclasses.replace(
            self,
            history=self.history.to(dtype),
            future=self.future.to(dtype),
            nbr_history=self.nbr_history.to(dtype),
        )


class SceneTensors:
    """Whole dataset as tensors; :meth:`batch` gathers a subset without Python loops."""

    def __init__(self, windows: Sequence[SceneWindow], dtype: torch.dtype = torch.float32):
        if not windows:
            raise ValueError("no scenes")
        self.windows = list(windows)
        t_h = windows[0].target_history.shape[0]
        self.history = torch.as_tensor(np.stack([w.target_history for w in windows]), dtype=dtype)
        self.future = torch.as_tensor(np.stack([w.target_future for w in windows]), dtype=dtype)
        counts = np.array([len(w.neighbor_cells) for w in windows])
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.counts = counts
        nh = [w.neighbor_histories.reshape(-1, t_h, 2) for w in windows]
        self.nbr_history = torch.as_tensor(np.concatenate(nh), dtype=dtype)
        self.nbr_cell = torch.as_tensor(np.concatenate([w.neighbor_cells for w in windows]).astype(np.int64))
        self.mode = torch.tensor([w.maneuver.mode_index if w.maneuver else -1 for w in windows])

    def __len__(self) -> int:
        return self.history.shape[0]

    def batch(self, indices) -> SceneBatch:
        idx = np.asarray(indices, dtype=np.int64)
        counts = self.counts[idx]
        starts = self.offsets[idx]
        total = int(counts.sum())
        # flat positions of every neighbor belonging to the selected scenes
        rep = np.repeat(np.arange(len(idx)), counts)
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        pos = torch.as_tensor(starts[rep] + within, dtype=torch.long)
        return SceneBatch(
            history=self.history[idx],
            future=self.future[idx],
            nbr_history=self.nbr_history[pos],
            nbr_batch=torch.as_tensor(rep, dtype=torch.long),
            nbr_cell=self.nbr_cell[pos],
            mode=self.mode[idx],
        )

    def batches(self, batch_size: int, shuffle: bool = False, generator: torch.Generator | None = None):
        n = len(self)
        order = torch.randperm(n, generator=generator).numpy() if shuffle else np.arange(n)
        for s in range(0, n, batch_size):
            yield self.batch(order[s : s + batch_size])
