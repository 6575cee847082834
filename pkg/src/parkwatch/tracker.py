"""Multi-object tracker over motion-blob detections.

Constant-velocity Kalman prediction on (center-x, center-y, area, aspect),
min-cost IoU assignment, and a re-identification pass that merges a freshly
confirmed track with a recently retired one when their boxes overlap enough.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DetectionKindError, OrderingError
from .model import BoundingBox, Detection, DetectionKind, PipelineConfig, iou

# Constant-velocity model on z = (cx, cy, area, aspect); aspect has no rate.
# Noise levels assume the 5 FPS blob cadence.
_F = np.eye(7)
_F[0, 4] = _F[1, 5] = _F[2, 6] = 1.0
_H = np.eye(4, 7)
_Q = np.diag([1.0, 1.0, 1.0, 0.01, 0.01, 0.01, 1e-4])
_R = np.diag([1.0, 1.0, 10.0, 10.0])
_P0 = np.diag([10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4])

_MIN_DIM = 1e-6


class TrackLifecycle(Enum):
    TENTATIVE = "tentative"
    ACTIVE = "active"
    RETIRED = "retired"


class TrackEventKind(Enum):
    SPAWN = "spawn"
    UPDATE = "update"
    RETIRE = "retire"
    MERGE = "merge"


def _to_z(bbox: BoundingBox) -> np.ndarray:
    w = bbox.width
    h = bbox.height
    return np.array([bbox.x1 + w / 2.0, bbox.y1 + h / 2.0, w * h, w / h])


def _to_bbox(x: np.ndarray) -> BoundingBox:
    s = max(float(x[2]), _MIN_DIM)
    r = max(float(x[3]), _MIN_DIM)
    w = (s * r) ** 0.5
    h = s / w
    # Shift rather than truncate when the prediction overshoots the image origin.
    x1 = max(float(x[0]) - w / 2.0, 0.0)
    y1 = max(float(x[1]) - h / 2.0, 0.0)
    return BoundingBox(x1, y1, x1 + w, y1 + h)


class KalmanBoxState:
    """Seven-state filter: measured box coordinates plus their first rates."""

    def __init__(self, bbox: BoundingBox):
        self.x = np.zeros(7)
        self.x[:4] = _to_z(bbox)
        self.P = _P0.copy()

    def predict(self) -> None:
        # A shrinking track must not predict a negative area.
        if self.x[2] + self.x[6] <= 0:
            self.x[6] = 0.0
        self.x = _F @ self.x
        self.P = _F @ self.P @ _F.T + _Q

    def update(self, bbox: BoundingBox) -> None:
        z = _to_z(bbox)
        y = z - _H @ self.x
        S = _H @ self.P @ _H.T + _R
        K = self.P @ _H.T @ np.linalg.inv(S)
        self.x = self.x + K @ y
        self.P = (np.eye(7) - K @ _H) @ self.P
        self.x[2] = max(self.x[2], _MIN_DIM)
        self.x[3] = max(self.x[3], _MIN_DIM)

    def predicted_bbox(self) -> BoundingBox:
        return _to_bbox(self.x)


@dataclass
class Track:
    """Identity-bearing trajectory with endpoints and lifecycle."""

    track_id: int
    kstate: KalmanBoxState = field(repr=False)
    first_ts: int = 0
    last_ts: int = 0
    first_bbox: BoundingBox | None = None
    last_bbox: BoundingBox | None = None
    hits: int = 1
    hit_streak: int = 1
    time_since_update: int = 0
    lifecycle: TrackLifecycle = TrackLifecycle.TENTATIVE

    @property
    def tracked_duration_ms(self) -> int:
        return self.last_ts - self.first_ts


@dataclass(frozen=True)
class TrackEvent:
    """One lifecycle event; retire events carry the finished track."""

    kind: TrackEventKind
    ts: int
    track_id: int
    bbox: BoundingBox
    track: Track = field(repr=False)


def solve_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Min-total-cost pairing of rows to columns (optimal, deterministic)."""
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


class SortTracker:
    """Per-node tracker; feed it strictly ts-ordered batches of BG detections."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.tracks: list[Track] = []
        self.archive: list[tuple[int, Track]] = []  # (retirement ts, track)
        self.next_id = 1
        self.last_ts: int | None = None

    def step(self, detections: list[Detection], ts: int) -> list[TrackEvent]:
        """Advance one frame: predict, associate, update, spawn, age out."""
        if self.last_ts is not None and ts <= self.last_ts:
            raise OrderingError(f"step ts {ts} not after previous ts {self.last_ts}")
        for det in detections:
            if det.kind is not DetectionKind.BG:
                raise DetectionKindError(f"tracker consumes BG detections, got {det.kind.name}")
        self.last_ts = ts

        events: list[TrackEvent] = []
        predictions = []
        for track in self.tracks:
            track.kstate.predict()
            predictions.append(track.kstate.predicted_bbox())

        matches, unmatched_dets = self._associate(predictions, detections)
        matched_tracks = {ti for ti, _ in matches}
        n_before = len(self.tracks)

        for ti, di in matches:
            track = self.tracks[ti]
            det = detections[di]
            track.kstate.update(det.bbox)
            track.last_bbox = det.bbox
            track.last_ts = ts
            track.hits += 1
            track.hit_streak += 1
            track.time_since_update = 0
            events.append(TrackEvent(TrackEventKind.UPDATE, ts, track.track_id, det.bbox, track))
            if track.lifecycle is TrackLifecycle.TENTATIVE and track.hit_streak >= self.cfg.min_hits:
                self._promote(track, ts, events)

        for di in unmatched_dets:
            det = detections[di]
            track = Track(
                track_id=self.next_id,
                kstate=KalmanBoxState(det.bbox),
                first_ts=ts,
                last_ts=ts,
                first_bbox=det.bbox,
                last_bbox=det.bbox,
            )
            self.next_id += 1
            self.tracks.append(track)
            events.append(TrackEvent(TrackEventKind.SPAWN, ts, track.track_id, det.bbox, track))
            if self.cfg.min_hits <= 1:
                self._promote(track, ts, events)

        survivors = []
        for i, track in enumerate(self.tracks):
            if i < n_before and i not in matched_tracks:
                track.time_since_update += 1
                track.hit_streak = 0
            if track.time_since_update > self.cfg.max_age_frames:
                if track.lifecycle is TrackLifecycle.ACTIVE:
                    track.lifecycle = TrackLifecycle.RETIRED
                    self.archive.append((ts, track))
                    events.append(
                        TrackEvent(TrackEventKind.RETIRE, ts, track.track_id, track.last_bbox, track)
                    )
                # Tracks that never confirmed vanish silently.
            else:
                survivors.append(track)
        self.tracks = survivors

        window_ms = self.cfg.reid_window_s * 1000.0
        self.archive = [(rts, t) for rts, t in self.archive if ts - rts <= window_ms]
        return events

    def _promote(self, track: Track, ts: int, events: list[TrackEvent]) -> None:
        track.lifecycle = TrackLifecycle.ACTIVE
        if self.cfg.reid_enabled and self.reidentify(track, ts):
            events.append(TrackEvent(TrackEventKind.MERGE, ts, track.track_id, track.last_bbox, track))

    def reidentify(self, new_track: Track, ts: int) -> bool:
        """Merge a just-confirmed track with the best-overlapping archived one.

        Candidates must have retired within reid_window_s seconds and overlap
        new_track's first box with IoU at or above iou_track. The highest IoU
        wins; ties go to the most recent retirement. On a merge the new track
        adopts the old identity and starting point.
        """
        window_ms = self.cfg.reid_window_s * 1000.0
        best = None
        best_key = None
        for idx, (rts, old) in enumerate(self.archive):
            if ts - rts > window_ms:
                continue
            overlap = iou(old.last_bbox, new_track.first_bbox)
            if overlap < self.cfg.iou_track:
                continue
            key = (overlap, rts)
            if best_key is None or key > best_key:
                best_key = key
                best = idx
        if best is None:
            return False
        _, old = self.archive.pop(best)
        new_track.track_id = old.track_id
        new_track.first_ts = old.first_ts
        new_track.first_bbox = old.first_bbox
        new_track.hits += old.hits
        return True

    def _associate(self, predictions, detections):
        if not predictions or not detections:
            return [], list(range(len(detections)))
        overlap = np.zeros((len(predictions), len(detections)))
        for ti, pred in enumerate(predictions):
            for di, det in enumerate(detections):
                overlap[ti, di] = iou(pred, det.bbox)
        pairs = solve_assignment(1.0 - overlap)
        matches = [(ti, di) for ti, di in pairs if overlap[ti, di] >= self.cfg.min_assoc_iou]
        matched_dets = {di for _, di in matches}
        unmatched = [di for di in range(len(detections)) if di not in matched_dets]
        return matches, unmatched


def track_events_to_csv(events, node_id: str) -> str:
    """Debug log lines: ts,node_id,track_id,event,x1,y1,x2,y2."""
    lines = []
    for ev in events:
        b = ev.bbox
        lines.append(
            f"{ev.ts},{node_id},{ev.track_id},{ev.kind.value},"
            f"{int(b.x1)},{int(b.y1)},{int(b.x2)},{int(b.y2)}"
        )
    return "\n".join(lines) + ("\n" if lines else "")
