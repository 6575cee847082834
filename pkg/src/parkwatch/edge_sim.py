"""Deterministic scenario world and detector emulators.

A scenario scripts vehicles (arrival, optional mid-approach pause, parking,
departure) and lighting events on one camera node. The world is a piecewise
linear interpolation over waypoints; two emulators turn it into detector
output. The snapshot emulator sees every visible vehicle with a configurable
recall and jitters boxes and scores; the motion emulator emits one blob per
moving vehicle and nothing for stationary ones. Everything is driven by a
single seeded generator, so a scenario reproduces byte-identical streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ParseError, SpaceMapError
from .model import (
    BG_CLASS_LABEL,
    VEHICLE_CLASSES,
    BoundingBox,
    Detection,
    DetectionKind,
    PipelineConfig,
    SpaceMap,
    SpaceStatus,
)
from .wire import DetectionMessage, SnapshotNotice, RAW_FRAME_KB

SSD_INTERVAL_MS = 1000  # snapshot detector cadence (1 Hz)
BG_INTERVAL_MS = 200    # motion detector cadence (5 Hz)

EXIT_TRAVEL_S = 12.0        # drive time from the space back to the exit point
MOTION_EPSILON_PX = 0.5     # displacement per tick below which a vehicle is static
OCCLUSION_COVER = 0.9       # fraction of a box hidden behind a nearer vehicle

_SCENARIO_VERSION = "1"
_VEHICLE_CLASS_LIST = tuple(sorted(VEHICLE_CLASSES))


@dataclass(frozen=True)
class LightingEvent:
    """Window during which the snapshot detector degrades."""

    start_ms: int
    end_ms: int
    recall_mult: float
    score_mult: float

    def __post_init__(self):
        if not (0 <= self.start_ms < self.end_ms):
            raise ValueError(f"need 0 <= start < end, got {self.start_ms}..{self.end_ms}")
        if self.recall_mult < 0 or self.score_mult < 0:
            raise ValueError("multipliers must be non-negative")

    def covers(self, ts: int) -> bool:
        return self.start_ms <= ts < self.end_ms


@dataclass(frozen=True)
class VehicleSchedule:
    """One vehicle's scripted life: arrive, optionally pause, park, depart."""

    vehicle_id: str
    vclass: str
    width: int
    height: int
    arrive_ms: int
    space_id: str
    pause_s: float
    park_ms: int
    depart_ms: int | None = None

    def __post_init__(self):
        if self.vclass not in VEHICLE_CLASSES:
            raise ValueError(f"unknown vehicle class {self.vclass!r}")
        if self.width < 1 or self.height < 1:
            raise ValueError("vehicle body must be at least 1x1 px")
        if not (0 <= self.arrive_ms < self.park_ms):
            raise ValueError(f"need 0 <= arrive < park, got {self.arrive_ms}, {self.park_ms}")
        if self.depart_ms is not None and self.depart_ms <= self.park_ms:
            raise ValueError(f"depart {self.depart_ms} must follow park {self.park_ms}")
        if self.pause_s < 0:
            raise ValueError("pause_s must be non-negative")
        if self.park_ms - self.arrive_ms <= self.pause_s * 1000:
            raise ValueError("approach leaves no drive time around the pause")


@dataclass(frozen=True)
class Scenario:
    """Deterministic world description for one node."""

    node_id: str
    img_w: int
    img_h: int
    duration_ms: int
    seed: int
    vehicles: tuple[VehicleSchedule, ...] = ()
    lighting: tuple[LightingEvent, ...] = ()

    def __post_init__(self):
        if self.img_w < 1 or self.img_h < 1 or self.duration_ms < 1:
            raise ValueError("image dimensions and duration must be positive")
        ids = [v.vehicle_id for v in self.vehicles]
        if len(ids) != len(set(ids)):
            raise ValueError("vehicle ids must be unique")
        for v in self.vehicles:
            if v.width > self.img_w or v.height > self.img_h:
                raise ValueError(f"vehicle {v.vehicle_id} does not fit the image")


class VehiclePose(NamedTuple):
    schedule: VehicleSchedule
    bbox: BoundingBox
    moving: bool


Scene = list[VehiclePose]


class _Trajectory:
    """Precomputed waypoint segments for one vehicle.

    Segments are (t0, t1, x0, y0, x1, y1); position interpolates linearly
    inside each. The parked interval caches its box since it dominates the
    timeline.
    """

    def __init__(self, v: VehicleSchedule, space_rect: BoundingBox, img_h: int, duration_ms: int):
        self.schedule = v
        sx, sy = space_rect.center
        entry = (sx, img_h - v.height / 2.0)
        pause_ms = int(v.pause_s * 1000)
        segments: list[tuple[int, int, float, float, float, float]] = []
        if pause_ms > 0:
            mid = ((entry[0] + sx) / 2.0, (entry[1] + sy) / 2.0)
            drive = (v.park_ms - v.arrive_ms) - pause_ms
            t1 = v.arrive_ms + drive // 2
            t2 = t1 + pause_ms
            segments.append((v.arrive_ms, t1, entry[0], entry[1], mid[0], mid[1]))
            segments.append((t1, t2, mid[0], mid[1], mid[0], mid[1]))
            segments.append((t2, v.park_ms, mid[0], mid[1], sx, sy))
        else:
            segments.append((v.arrive_ms, v.park_ms, entry[0], entry[1], sx, sy))
        depart = v.depart_ms if v.depart_ms is not None else duration_ms + 1
        segments.append((v.park_ms, depart, sx, sy, sx, sy))
        if v.depart_ms is not None:
            exit_end = v.depart_ms + int(EXIT_TRAVEL_S * 1000)
            segments.append((v.depart_ms, exit_end, sx, sy, entry[0], entry[1]))
            self.gone_ms = exit_end
        else:
            self.gone_ms = duration_ms + 1
        self.segments = segments
        self.parked_bbox = self._bbox_at(sx, sy)

    def position(self, ts: int) -> tuple[float, float] | None:
        if ts < self.schedule.arrive_ms or ts >= self.gone_ms:
            return None
        for t0, t1, x0, y0, x1, y1 in self.segments:
            if t0 <= ts < t1:
                if x0 == x1 and y0 == y1:
                    return (x0, y0)
                f = (ts - t0) / (t1 - t0)
                return (x0 + (x1 - x0) * f, y0 + (y1 - y0) * f)
        return None

    def pose(self, ts: int, prev_ts: int) -> VehiclePose | None:
        pos = self.position(ts)
        if pos is None:
            return None
        v = self.schedule
        if v.park_ms <= ts < (v.depart_ms if v.depart_ms is not None else self.gone_ms):
            return VehiclePose(v, self.parked_bbox, False)
        prev = self.position(prev_ts)
        moving = prev is None or math.hypot(pos[0] - prev[0], pos[1] - prev[1]) > MOTION_EPSILON_PX
        return VehiclePose(v, self._bbox_at(*pos), moving)

    def _bbox_at(self, cx: float, cy: float) -> BoundingBox:
        w = self.schedule.width
        h = self.schedule.height
        return BoundingBox(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


class ScenarioWorld:
    """Scenario plus space geometry, ready to be sampled tick by tick."""

    def __init__(self, scenario: Scenario, spaces: SpaceMap):
        self.scenario = scenario
        self.spaces = spaces.for_node(scenario.node_id)
        if not self.spaces:
            raise SpaceMapError(f"space map has no spaces for node {scenario.node_id!r}")
        by_id = {s.space_id: s for s in self.spaces}
        self._trajectories = []
        for v in scenario.vehicles:
            space = by_id.get(v.space_id)
            if space is None:
                raise SpaceMapError(
                    f"vehicle {v.vehicle_id} targets space {v.space_id!r} "
                    f"not owned by node {scenario.node_id!r}"
                )
            self._trajectories.append(_Trajectory(v, space.rect, scenario.img_h, scenario.duration_ms))

    def scene_at(self, ts: int, prev_ts: int | None = None) -> Scene:
        """Vehicle poses at ts; motion is judged against prev_ts (one tick back)."""
        if not (0 <= ts <= self.scenario.duration_ms):
            raise ValueError(f"ts {ts} outside scenario duration {self.scenario.duration_ms}")
        if prev_ts is None:
            prev_ts = ts - BG_INTERVAL_MS
        scene: Scene = []
        for traj in self._trajectories:
            pose = traj.pose(ts, prev_ts)
            if pose is not None:
                scene.append(pose)
        return scene

    def ground_truth_at(self, ts: int) -> dict[str, SpaceStatus]:
        """Occupied iff some schedule's park interval covers ts (half-open)."""
        statuses = {s.space_id: SpaceStatus.VACANT for s in self.spaces}
        for v in self.scenario.vehicles:
            depart = v.depart_ms if v.depart_ms is not None else self.scenario.duration_ms + 1
            if v.park_ms <= ts < depart:
                statuses[v.space_id] = SpaceStatus.OCCUPIED
        return statuses

    def truth_transitions(self) -> list[tuple[int, str, SpaceStatus]]:
        """Ground-truth event list: initial state, every change, final state."""
        rows: list[tuple[int, str, SpaceStatus]] = []
        initial = self.ground_truth_at(0)
        for space_id in sorted(initial):
            rows.append((0, space_id, initial[space_id]))
        changes: list[tuple[int, str, SpaceStatus]] = []
        for v in self.scenario.vehicles:
            if v.park_ms > 0:
                changes.append((v.park_ms, v.space_id, SpaceStatus.OCCUPIED))
            if v.depart_ms is not None and v.depart_ms <= self.scenario.duration_ms:
                changes.append((v.depart_ms, v.space_id, SpaceStatus.VACANT))
        rows.extend(sorted(changes, key=lambda r: (r[0], r[1])))
        final = self.ground_truth_at(self.scenario.duration_ms)
        for space_id in sorted(final):
            rows.append((self.scenario.duration_ms, space_id, final[space_id]))
        return rows


def _is_hidden(pose: VehiclePose, scene: Scene) -> bool:
    """True when a nearer vehicle (lower bottom edge) covers most of this box."""
    box = pose.bbox
    for other in scene:
        if other is pose or other.bbox.y2 <= box.y2:
            continue
        ow = min(box.x2, other.bbox.x2) - max(box.x1, other.bbox.x1)
        oh = min(box.y2, other.bbox.y2) - max(box.y1, other.bbox.y1)
        if ow > 0 and oh > 0 and ow * oh >= OCCLUSION_COVER * box.area:
            return True
    return False


def visible_poses(scene: Scene) -> list[VehiclePose]:
    """Drop vehicles hidden behind a nearer vehicle."""
    return [pose for pose in scene if not _is_hidden(pose, scene)]


def lighting_multipliers(lighting, ts: int) -> tuple[float, float]:
    """Combined (recall, score) multipliers of every event covering ts."""
    recall = 1.0
    score = 1.0
    for event in lighting:
        if event.covers(ts):
            recall *= event.recall_mult
            score *= event.score_mult
    return recall, score


def emulate_ssd(
    scene: Scene,
    lighting,
    ts: int,
    frame_seq: int,
    node_id: str,
    img_w: int,
    img_h: int,
    cfg: PipelineConfig,
    rng: np.random.Generator,
) -> list[Detection]:
    """Snapshot detections for one frame.

    Each visible vehicle is reported with probability recall * multiplier,
    with every box edge jittered by a few pixels and a confidence drawn from
    the configured band (scaled by the event multiplier, clamped to [0, 1]).
    False positives arrive as a Poisson stream of vehicle-class boxes.
    """
    recall_mult, score_mult = lighting_multipliers(lighting, ts)
    recall = min(cfg.ssd_recall * recall_mult, 1.0)
    detections: list[Detection] = []
    poses = visible_poses(scene)
    if poses:
        rolls = rng.random(len(poses))
        jitter = rng.integers(-cfg.ssd_jitter_px, cfg.ssd_jitter_px + 1, size=(len(poses), 4))
        scores = rng.uniform(cfg.ssd_score_lo, cfg.ssd_score_hi, size=len(poses))
        for i, pose in enumerate(poses):
            if rolls[i] >= recall:
                continue
            box = _jittered_box(pose.bbox, jitter[i], img_w, img_h)
            raw = min(max(scores[i] * score_mult, 0.0), 1.0)
            detections.append(
                Detection(node_id, frame_seq, ts, DetectionKind.SSD,
                          pose.schedule.vclass, box, _quantize(raw))
            )
    if cfg.ssd_fp_rate > 0:
        for _ in range(int(rng.poisson(cfg.ssd_fp_rate))):
            detections.append(
                Detection(node_id, frame_seq, ts, DetectionKind.SSD,
                          _VEHICLE_CLASS_LIST[int(rng.integers(len(_VEHICLE_CLASS_LIST)))],
                          _random_box(rng, img_w, img_h),
                          _quantize(float(rng.uniform(cfg.ssd_score_lo, cfg.ssd_score_hi))))
            )
    return detections


def emulate_bg(
    scene: Scene,
    ts: int,
    frame_seq: int,
    node_id: str,
    img_w: int,
    img_h: int,
    cfg: PipelineConfig,
    rng: np.random.Generator,
) -> list[Detection]:
    """Motion blobs for one frame: moving vehicles only, nearby blobs merged."""
    blobs: list[tuple[int, int, int, int]] = []
    for pose in scene:
        if not pose.moving or _is_hidden(pose, scene):
            continue
        b = pose.bbox
        m = cfg.bg_blob_margin_px
        blobs.append((
            max(int(round(b.x1)) - m, 0),
            max(int(round(b.y1)) - m, 0),
            min(int(round(b.x2)) + m, img_w),
            min(int(round(b.y2)) + m, img_h),
        ))
    merged = _merge_blobs(blobs, cfg.bg_merge_dist_px)
    if cfg.bg_noise_rate > 0:
        for _ in range(int(rng.poisson(cfg.bg_noise_rate))):
            box = _random_box(rng, img_w, img_h)
            merged.append((int(box.x1), int(box.y1), int(box.x2), int(box.y2)))
    return [
        Detection(node_id, frame_seq, ts, DetectionKind.BG, BG_CLASS_LABEL,
                  BoundingBox(*blob), 1.0)
        for blob in merged
    ]


def _merge_blobs(blobs: list[tuple[int, int, int, int]], merge_dist: int) -> list:
    """Union-find clustering: blobs whose rectangle gap is within merge_dist."""
    n = len(blobs)
    if n <= 1:
        return list(blobs)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            a, b = blobs[i], blobs[j]
            gap_x = max(a[0], b[0]) - min(a[2], b[2])
            gap_y = max(a[1], b[1]) - min(a[3], b[3])
            if max(gap_x, gap_y) <= merge_dist:
                parent[find(i)] = find(j)
    clusters: dict[int, list[int]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)
    out = []
    for members in clusters.values():
        xs1, ys1, xs2, ys2 = zip(*(blobs[i] for i in members))
        out.append((min(xs1), min(ys1), max(xs2), max(ys2)))
    out.sort()
    return out


def _jittered_box(b: BoundingBox, offsets, img_w: int, img_h: int) -> BoundingBox:
    x1 = int(round(b.x1)) + int(offsets[0])
    y1 = int(round(b.y1)) + int(offsets[1])
    x2 = int(round(b.x2)) + int(offsets[2])
    y2 = int(round(b.y2)) + int(offsets[3])
    x1 = min(max(x1, 0), img_w - 1)
    y1 = min(max(y1, 0), img_h - 1)
    x2 = min(max(x2, x1 + 1), img_w)
    y2 = min(max(y2, y1 + 1), img_h)
    return BoundingBox(x1, y1, x2, y2)


def _random_box(rng: np.random.Generator, img_w: int, img_h: int) -> BoundingBox:
    w = int(rng.integers(30, min(150, img_w) + 1))
    h = int(rng.integers(30, min(150, img_h) + 1))
    x1 = int(rng.integers(0, img_w - w + 1))
    y1 = int(rng.integers(0, img_h - h + 1))
    return BoundingBox(x1, y1, x1 + w, y1 + h)


def _quantize(score: float) -> float:
    # Scores travel as 4-decimal text; quantize at the source so the wire
    # round-trip is exact.
    return float(f"{score:.4f}")


def generate_messages(scenario: Scenario, spaces: SpaceMap, cfg: PipelineConfig):
    """Yield the node's full message stream in transmission order.

    Ticks are merged by timestamp; at equal timestamps snapshot-detector
    frames precede motion frames, which precede frame-upload notices.
    """
    world = ScenarioWorld(scenario, spaces)
    rng = np.random.default_rng(scenario.seed)
    node = scenario.node_id
    img_w, img_h = scenario.img_w, scenario.img_h
    snapshot_ms = int(cfg.snapshot_interval_s * 1000)

    ticks: list[tuple[int, int, int]] = []  # (ts, priority, frame_seq)
    ticks.extend((ts, 0, i) for i, ts in enumerate(range(0, scenario.duration_ms, SSD_INTERVAL_MS)))
    ticks.extend((ts, 1, i) for i, ts in enumerate(range(0, scenario.duration_ms, BG_INTERVAL_MS)))
    ticks.extend((ts, 2, i) for i, ts in enumerate(range(0, scenario.duration_ms, snapshot_ms)))
    ticks.sort()

    for ts, priority, seq in ticks:
        if priority == 2:
            yield SnapshotNotice(node, ts, RAW_FRAME_KB)
            continue
        scene = world.scene_at(ts)
        if priority == 0:
            dets = emulate_ssd(scene, scenario.lighting, ts, seq, node, img_w, img_h, cfg, rng)
            yield DetectionMessage(node, seq, ts, DetectionKind.SSD, tuple(dets))
        else:
            dets = emulate_bg(scene, ts, seq, node, img_w, img_h, cfg, rng)
            yield DetectionMessage(node, seq, ts, DetectionKind.BG, tuple(dets))


def scenario_from_text(text: str) -> Scenario:
    """Parse the line-based scenario format.

    Records: header ``N,1,<node_id>,<img_w>,<img_h>,<duration_ms>,<seed>``,
    vehicles ``V,<id>,<class>,<w>,<h>,<arrive_ms>,<space_id>,<pause_s>,
    <park_ms>,<depart_ms|->`` and lighting ``L,<start_ms>,<end_ms>,
    <recall_mult>,<score_mult>``. Comments start with ``#``.
    """
    header = None
    vehicles: list[VehicleSchedule] = []
    lighting: list[LightingEvent] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        tag = parts[0]
        try:
            if tag == "N":
                if header is not None:
                    raise ParseError("duplicate scenario header", line=lineno)
                if len(parts) != 7:
                    raise ParseError(f"header needs 7 fields, got {len(parts)}", line=lineno)
                if parts[1] != _SCENARIO_VERSION:
                    raise ParseError(f"unsupported version {parts[1]!r}", line=lineno)
                header = (parts[2], int(parts[3]), int(parts[4]), int(parts[5]), int(parts[6]))
            elif tag == "V":
                if len(parts) != 10:
                    raise ParseError(f"vehicle needs 10 fields, got {len(parts)}", line=lineno)
                depart = None if parts[9] == "-" else int(parts[9])
                vehicles.append(VehicleSchedule(
                    vehicle_id=parts[1], vclass=parts[2],
                    width=int(parts[3]), height=int(parts[4]),
                    arrive_ms=int(parts[5]), space_id=parts[6],
                    pause_s=float(parts[7]), park_ms=int(parts[8]), depart_ms=depart,
                ))
            elif tag == "L":
                if len(parts) != 5:
                    raise ParseError(f"lighting needs 5 fields, got {len(parts)}", line=lineno)
                lighting.append(LightingEvent(
                    start_ms=int(parts[1]), end_ms=int(parts[2]),
                    recall_mult=float(parts[3]), score_mult=float(parts[4]),
                ))
            else:
                raise ParseError(f"unknown record tag {tag!r}", line=lineno)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
    if header is None:
        raise ParseError("scenario has no N header record")
    node_id, img_w, img_h, duration_ms, seed = header
    try:
        return Scenario(node_id, img_w, img_h, duration_ms, seed,
                        tuple(vehicles), tuple(lighting))
    except ValueError as exc:
        raise ParseError(str(exc)) from exc


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_text(Path(path).read_text(encoding="utf-8"))


def scenario_to_text(scenario: Scenario) -> str:
    lines = [
        f"N,{_SCENARIO_VERSION},{scenario.node_id},{scenario.img_w},{scenario.img_h},"
        f"{scenario.duration_ms},{scenario.seed}"
    ]
    for v in scenario.vehicles:
        depart = "-" if v.depart_ms is None else str(v.depart_ms)
        lines.append(
            f"V,{v.vehicle_id},{v.vclass},{v.width},{v.height},{v.arrive_ms},"
            f"{v.space_id},{_num(v.pause_s)},{v.park_ms},{depart}"
        )
    for e in scenario.lighting:
        lines.append(f"L,{e.start_ms},{e.end_ms},{_num(e.recall_mult)},{_num(e.score_mult)}")
    return "\n".join(lines) + "\n"


def _num(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(value)


def with_seed(scenario: Scenario, seed: int) -> Scenario:
    return replace(scenario, seed=seed)
