"""Snapshot occupancy from classified detections.

Each snapshot is resolved independently: every (space, detection) pair gets a
matching score, scores are validated against a hysteresis threshold chosen by
the space's previous status, and conflicts are settled so that one detection
occupies at most one space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DetectionKindError, SpaceMapError, StateError
from .model import (
    Detection,
    DetectionKind,
    ParkingSpace,
    PipelineConfig,
    SpaceStatus,
    is_vehicle,
    iou,
)


@dataclass(frozen=True)
class MatchCandidate:
    """A valid (space, detection) pairing and its score."""

    space_id: str
    detection_index: int
    v_score: float


@dataclass(frozen=True)
class SsdSnapshot:
    """Resolved statuses for one detector frame.

    The detections are retained verbatim so the occlusion analysis can look at
    boxes that did not win any space.
    """

    ts: int
    statuses: dict[str, SpaceStatus]
    winners: dict[str, int]
    detections: tuple[Detection, ...]


def match_score(space: ParkingSpace, det: Detection) -> float:
    """Overlap-weighted confidence: iou(space, box) * sqrt(score).

    The square root softens the confidence term so box placement dominates.
    """
    if det.kind is not DetectionKind.SSD:
        raise DetectionKindError(f"match_score takes SSD detections, got {det.kind.name}")
    if not is_vehicle(det.class_label):
        raise DetectionKindError(f"match_score takes vehicle classes, got {det.class_label!r}")
    return iou(space.rect, det.bbox) * math.sqrt(det.score)


def resolve_snapshot(
    spaces,
    detections,
    prev: dict[str, SpaceStatus],
    cfg: PipelineConfig,
    ts: int = 0,
    allow_unknown: bool = False,
) -> SsdSnapshot:
    """Resolve one frame of detections into per-space statuses.

    A pair is valid when its score clears th_min for a previously occupied
    space or th_max otherwise (unknown counts as vacant, using the stricter
    threshold). Each detection then keeps only its best valid pair; any space
    left with at least one surviving pair is occupied, the rest are vacant.
    Best-pair ties go to the space whose rectangle center is closer to the
    image bottom, then to the smaller space_id.
    """
    spaces = list(spaces)
    for space in spaces:
        status = prev.get(space.space_id)
        if status is None:
            raise SpaceMapError(f"previous status missing for space {space.space_id}")
        if status is SpaceStatus.UNKNOWN and not allow_unknown:
            raise StateError(f"space {space.space_id} still unknown after bootstrap")

    detections = tuple(detections)
    survivors: dict[str, list[tuple[float, int]]] = {s.space_id: [] for s in spaces}
    for di, det in enumerate(detections):
        best_space = None
        best_v = 0.0
        best_cy = 0.0
        for space in spaces:
            v = match_score(space, det)
            threshold = cfg.th_min if prev[space.space_id] is SpaceStatus.OCCUPIED else cfg.th_max
            if v < threshold:
                continue
            cy = space.rect.center[1]
            if (
                best_space is None
                or v > best_v
                or (v == best_v and (cy > best_cy or (cy == best_cy and space.space_id < best_space)))
            ):
                best_space, best_v, best_cy = space.space_id, v, cy
        if best_space is not None:
            survivors[best_space].append((best_v, di))

    statuses: dict[str, SpaceStatus] = {}
    winners: dict[str, int] = {}
    for space in spaces:
        pairs = survivors[space.space_id]
        if pairs:
            statuses[space.space_id] = SpaceStatus.OCCUPIED
            winners[space.space_id] = max(pairs, key=lambda p: (p[0], -p[1]))[1]
        else:
            statuses[space.space_id] = SpaceStatus.VACANT
    return SsdSnapshot(ts=ts, statuses=statuses, winners=winners, detections=detections)
