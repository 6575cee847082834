"""Final occupancy judgement.

Combines the snapshot-based and track-based status maps. A warning state
machine watches for a sudden collapse of the snapshot detector (typically a
lighting change) and lets track-based statuses fill the gaps while it lasts.
A separate check spots one vehicle box covering two adjacent spaces and hands
the hidden space over to the track-based result.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import SpaceMapError
from .model import PipelineConfig, RecordSource, SpaceStatus, intersection_area
from .occupancy_ssd import SsdSnapshot


class FusionMode(Enum):
    NORMAL = "normal"
    WARNING = "warning"


@dataclass(frozen=True)
class FusionState:
    """Warning-mode state, advanced once per fusion step."""

    mode: FusionMode = FusionMode.NORMAL
    ssd_prev_count: int = 0
    last_step_ts: int = 0


@dataclass(frozen=True)
class OcclusionFlag:
    """One vehicle box covering two neighboring spaces."""

    host_space_id: str
    occluded_space_id: str
    detection_index: int


def safe_ratio(a: int, b: int) -> float:
    """a/b with the zero-denominator conventions: 0/0 is 1, a/0 caps at 2."""
    if b > 0:
        return a / b
    return 1.0 if a == 0 else 2.0


def lighting_metric(ssd_t: int, bg_t: int, ssd_prev: int) -> float:
    """Collapse indicator: snapshot count vs track count plus vs its own past.

    Near 2.0 when the snapshot detector agrees with the track-based count and
    with its own previous step; falls well below 1 when it suddenly loses most
    targets.
    """
    if ssd_t < 0 or bg_t < 0 or ssd_prev < 0:
        raise ValueError(f"counts must be non-negative, got ({ssd_t}, {bg_t}, {ssd_prev})")
    return safe_ratio(ssd_t, bg_t) + safe_ratio(ssd_t, ssd_prev)


def update_mode(state: FusionState, ssd_t: int, bg_t: int, cfg: PipelineConfig, ts: int = 0) -> FusionState:
    """Advance the warning machine one fusion step.

    Normal mode enters Warning when the lighting metric drops below r_warn;
    Warning returns to Normal once the snapshot/track ratio alone recovers to
    r_reactivate. The previous-count register updates unconditionally.
    """
    mode = state.mode
    if mode is FusionMode.NORMAL:
        if lighting_metric(ssd_t, bg_t, state.ssd_prev_count) < cfg.r_warn:
            mode = FusionMode.WARNING
    else:
        if safe_ratio(ssd_t, bg_t) >= cfg.r_reactivate:
            mode = FusionMode.NORMAL
    return FusionState(mode=mode, ssd_prev_count=ssd_t, last_step_ts=ts)


def detect_occlusions(snapshot: SsdSnapshot, spaces, cfg: PipelineConfig) -> list[OcclusionFlag]:
    """Flag neighbor pairs whose areas are both nearly inside one vehicle box.

    Coverage of a space is the overlapped fraction of its own area; both
    spaces of a pair must reach occ_pct. The host (the space the vehicle is
    actually in) is the one whose rectangle center sits lower in the image;
    the other one is reported occluded.
    """
    spaces = list(spaces)
    by_id = {s.space_id: s for s in spaces}
    flags: list[OcclusionFlag] = []
    for di, det in enumerate(snapshot.detections):
        covered = [
            s for s in spaces
            if intersection_area(s.rect, det.bbox) >= cfg.occ_pct * s.rect.area
        ]
        if len(covered) < 2:
            continue
        seen = set()
        for s in covered:
            for neighbor_id in s.neighbors:
                other = by_id.get(neighbor_id)
                if other is None or other not in covered:
                    continue
                pair = tuple(sorted((s.space_id, other.space_id)))
                if pair in seen:
                    continue
                seen.add(pair)
                host, hidden = _host_of(s, other)
                flags.append(OcclusionFlag(host.space_id, hidden.space_id, di))
    return flags


def _host_of(a, b):
    ay = a.rect.center[1]
    by = b.rect.center[1]
    if ay != by:
        return (a, b) if ay > by else (b, a)
    return (a, b) if a.space_id < b.space_id else (b, a)


def fuse(
    ssd: dict[str, SpaceStatus],
    bg: dict[str, SpaceStatus],
    mode: FusionMode,
    flags,
) -> dict[str, tuple[SpaceStatus, RecordSource]]:
    """Combine the two status maps into the final per-space answer.

    Normal mode passes the snapshot statuses through. Warning mode keeps
    snapshot-occupied spaces occupied (the snapshot detector rarely invents
    vehicles) and takes the track-based status everywhere else. Flagged
    occluded spaces always take the track-based status, and each host space
    is forced occupied.
    """
    if set(ssd) != set(bg):
        raise SpaceMapError("status maps cover different space sets")
    occluded = {f.occluded_space_id for f in flags}
    hosts = {f.host_space_id for f in flags}

    final: dict[str, tuple[SpaceStatus, RecordSource]] = {}
    for space_id, ssd_status in ssd.items():
        if space_id in occluded:
            final[space_id] = (bg[space_id], RecordSource.FUSED_OCCLUSION)
        elif space_id in hosts:
            source = RecordSource.SSD if ssd_status is SpaceStatus.OCCUPIED else RecordSource.FUSED_OCCLUSION
            final[space_id] = (SpaceStatus.OCCUPIED, source)
        elif mode is FusionMode.WARNING and ssd_status is not SpaceStatus.OCCUPIED:
            final[space_id] = (bg[space_id], RecordSource.FUSED_WARNING)
        else:
            final[space_id] = (ssd_status, RecordSource.SSD)
    return final
