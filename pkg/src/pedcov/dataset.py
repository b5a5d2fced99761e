"""Annotation ingestion, windowing, kinematics and leave-one-out splits.

Annotation files are plain text, one ``frame ped_id x y`` row per line
(whitespace separated, world coordinates in metres).  Lines starting with
``#`` and blank lines are ignored.  A scene directory holds one such file per
scene; the scene name is the file stem.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

T_OBS = 8
T_PRED = 12
WINDOW_LEN = T_OBS + T_PRED
DT = 0.4
DEFAULT_FRAME_STRIDE = 10
NEIGHBOR_RADIUS = 10.0


class AnnotationError(ValueError):
    """Raised when an annotation file cannot be parsed.

    ``problems`` holds ``(line_number, message)`` pairs.
    """

    def __init__(self, path, problems: list[tuple[int, str]]):
        self.path = str(path)
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        super().__init__(f"{self.path}: {lines}{more}")


@dataclass(frozen=True)
class RawAnnotation:
    frame: int
    ped_id: int
    x: float
    y: float


@dataclass
class NeighborTrack:
    ped_id: int
    pos: np.ndarray  # (T_OBS, 2), zeros where absent
    mask: np.ndarray  # (T_OBS,) bool


@dataclass
class TrackletWindow:
    agent_id: int
    obs: np.ndarray  # (T_OBS, 2)
    fut: np.ndarray  # (T_PRED, 2)
    neighbors: list[NeighborTrack] = field(default_factory=list)
    dt: float = DT
    scene: str = ""
    start_frame: int = 0

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.fut = np.asarray(self.fut, dtype=np.float64)
        if self.obs.shape != (T_OBS, 2):
            raise ValueError(f"obs must have shape ({T_OBS}, 2), got {self.obs.shape}")
        if self.fut.shape != (T_PRED, 2):
            raise ValueError(f"fut must have shape ({T_PRED}, 2), got {self.fut.shape}")
        if any(n.ped_id == self.agent_id for n in self.neighbors):
            raise ValueError(f"agent {self.agent_id} listed as its own neighbor")
        if not (np.all(np.isfinite(self.obs)) and np.all(np.isfinite(self.fut))):
            raise ValueError("window positions must be finite")

    @property
    def last_obs(self) -> np.ndarray:
        return self.obs[-1]

    def translated(self, offset) -> "TrackletWindow":
        off = np.asarray(offset, dtype=np.float64)
        nbrs = [
            NeighborTrack(n.ped_id, np.where(n.mask[:, None], n.pos + off, 0.0), n.mask.copy())
            for n in self.neighbors
        ]
        return TrackletWindow(
            self.agent_id, self.obs + off, self.fut + off, nbrs, self.dt, self.scene, self.start_frame
        )


@dataclass(frozen=True)
class Kinematics:
    vel: np.ndarray  # (T_OBS, 2)
    acc: np.ndarray  # (T_OBS, 2)


@dataclass(frozen=True)
class SplitPlan:
    train_scenes: tuple[str, ...]
    test_scene: str

    def __post_init__(self):
        if self.test_scene in self.train_scenes:
            raise ValueError(f"test scene {self.test_scene!r} also in training scenes")


def parse_annotation_file(path) -> list[RawAnnotation]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise AnnotationError(path, [(0, f"unreadable file: {exc}")]) from exc

    rows: list[RawAnnotation] = []
    problems: list[tuple[int, str]] = []
    seen: dict[tuple[int, int], int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 4:
            problems.append((lineno, f"expected 4 fields (frame ped_id x y), got {len(fields)}"))
            continue
        try:
            frame = int(float(fields[0]))
            ped = int(float(fields[1]))
            x, y = float(fields[2]), float(fields[3])
        except ValueError:
            problems.append((lineno, f"non-numeric field in {stripped!r}"))
            continue
        if not (np.isfinite(x) and np.isfinite(y)):
            problems.append((lineno, "non-finite coordinate"))
            continue
        key = (frame, ped)
        if key in seen:
            problems.append((lineno, f"duplicate (frame={frame}, ped_id={ped}), first at line {seen[key]}"))
            continue
        seen[key] = lineno
        rows.append(RawAnnotation(frame, ped, x, y))
    if problems:
        raise AnnotationError(path, problems)
    rows.sort(key=lambda a: (a.ped_id, a.frame))
    return rows


def write_annotation_file(path, annotations: Sequence[RawAnnotation]) -> None:
    lines = [f"{a.frame} {a.ped_id} {a.x:.6f} {a.y:.6f}" for a in annotations]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_scene_dir(directory, scenes: Sequence[str] | None = None) -> dict[str, list[RawAnnotation]]:
    """Parse every scene file in ``directory`` (or just the named ``scenes``)."""
    directory = Path(directory)
    files = {p.stem: p for p in sorted(directory.iterdir()) if p.is_file() and not p.name.startswith(".")}
    if scenes is None:
        scenes = sorted(files)
    missing = [s for s in scenes if s not in files]
    if missing:
        raise FileNotFoundError(f"scene file(s) not found in {directory}: {', '.join(missing)}")
    return {s: parse_annotation_file(files[s]) for s in scenes}


def _gap_free_runs(frames: list[int], stride: int) -> list[tuple[int, int]]:
    runs = []
    start = 0
    for i in range(1, len(frames) + 1):
        if i == len(frames) or frames[i] - frames[i - 1] != stride:
            runs.append((start, i))
            start = i
    return runs


def build_windows(
    annotations: Sequence[RawAnnotation],
    dt: float = DT,
    frame_stride: int = DEFAULT_FRAME_STRIDE,
    scene: str = "",
    neighbor_radius: float = NEIGHBOR_RADIUS,
) -> list[TrackletWindow]:
    by_ped: dict[int, list[RawAnnotation]] = defaultdict(list)
    by_frame: dict[int, dict[int, np.ndarray]] = defaultdict(dict)
    for a in annotations:
        by_ped[a.ped_id].append(a)
        by_frame[a.frame][a.ped_id] = np.array([a.x, a.y])

    windows = []
    for ped in sorted(by_ped):
        track = sorted(by_ped[ped], key=lambda a: a.frame)
        frames = [a.frame for a in track]
        xy = np.array([[a.x, a.y] for a in track], dtype=np.float64)
        for lo, hi in _gap_free_runs(frames, frame_stride):
            for s in range(lo, hi - WINDOW_LEN + 1):
                obs = xy[s : s + T_OBS]
                fut = xy[s + T_OBS : s + WINDOW_LEN]
                last_frame = frames[s + T_OBS - 1]
                neighbors = _neighbors_at(by_frame, ped, last_frame, obs[-1], frame_stride, neighbor_radius)
                windows.append(TrackletWindow(ped, obs, fut, neighbors, dt, scene, frames[s]))
    return windows


def _neighbors_at(by_frame, agent, last_frame, agent_pos, stride, radius) -> list[NeighborTrack]:
    out = []
    present_now = by_frame.get(last_frame, {})
    for other in sorted(present_now):
        if other == agent:
            continue
        if np.linalg.norm(present_now[other] - agent_pos) > radius:
            continue
        pos = np.zeros((T_OBS, 2))
        mask = np.zeros(T_OBS, dtype=bool)
        for k in range(T_OBS):
            f = last_frame - (T_OBS - 1 - k) * stride
            p = by_frame.get(f, {}).get(other)
            if p is not None:
                pos[k] = p
                mask[k] = True
        out.append(NeighborTrack(other, pos, mask))
    return out


def derive_kinematics(w: TrackletWindow) -> Kinematics:
    vel = np.zeros_like(w.obs)
    vel[1:] = np.diff(w.obs, axis=0) / w.dt
    vel[0] = vel[1]
    acc = np.zeros_like(w.obs)
    acc[1:] = np.diff(vel, axis=0) / w.dt
    return Kinematics(vel, acc)


def leave_one_out(scenes: Sequence[str]) -> list[SplitPlan]:
    scenes = list(scenes)
    if len(scenes) < 2:
        raise ValueError("leave-one-out needs at least 2 scenes")
    if len(set(scenes)) != len(scenes):
        raise ValueError(f"duplicate scene names in {scenes}")
    return [SplitPlan(tuple(s for s in scenes if s != test), test) for test in scenes]
