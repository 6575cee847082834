"""Per-space occupancy maintained from finished tracks.

A retired track changes a space only when it lasted long enough and its
endpoints straddle the space boundary: leaving a space marks it vacant,
arriving into one marks it occupied.
"""

from __future__ import annotations

from .errors import SpaceMapError, StateError
from .model import PipelineConfig, SpaceStatus, space_containing
from .tracker import Track, TrackLifecycle


class BgStatusMap:
    """Single-writer status map, seeded once from a snapshot and then event-driven."""

    def __init__(self):
        self._statuses: dict[str, SpaceStatus] = {}
        self._last_event_ts: dict[str, int] = {}
        self._bootstrapped = False

    @property
    def bootstrapped(self) -> bool:
        return self._bootstrapped

    def bootstrap(self, initial: dict[str, SpaceStatus]) -> None:
        """Seed the map; callable exactly once."""
        if self._bootstrapped:
            raise StateError("status map already bootstrapped")
        self._statuses = dict(initial)
        self._last_event_ts = {space_id: 0 for space_id in initial}
        self._bootstrapped = True

    def apply_track(self, track: Track, spaces, cfg: PipelineConfig) -> list[tuple[str, SpaceStatus]]:
        """Apply one retired track; returns the (space_id, status) rules that fired.

        Tracks shorter than t_track_s never change anything. A track that
        starts inside one space and ends inside another fires both the vacate
        and the occupy rule.
        """
        if not self._bootstrapped:
            raise StateError("status map not bootstrapped")
        if track.lifecycle is not TrackLifecycle.RETIRED:
            raise StateError(f"track {track.track_id} is {track.lifecycle.value}, not retired")
        if track.tracked_duration_ms < cfg.t_track_s * 1000.0:
            return []

        start = space_containing(track.first_bbox, spaces)
        end = space_containing(track.last_bbox, spaces)
        applied: list[tuple[str, SpaceStatus]] = []
        if start is not None and (end is None or end.space_id != start.space_id):
            self._set(start.space_id, SpaceStatus.VACANT, track.last_ts)
            applied.append((start.space_id, SpaceStatus.VACANT))
        if end is not None and (start is None or start.space_id != end.space_id):
            self._set(end.space_id, SpaceStatus.OCCUPIED, track.last_ts)
            applied.append((end.space_id, SpaceStatus.OCCUPIED))
        return applied

    def current(self) -> dict[str, SpaceStatus]:
        """Immutable-by-copy view of the statuses."""
        if not self._bootstrapped:
            raise StateError("status map not bootstrapped")
        return dict(self._statuses)

    def _set(self, space_id: str, status: SpaceStatus, ts: int) -> None:
        if space_id not in self._statuses:
            raise SpaceMapError(f"space {space_id} missing from bootstrapped map")
        self._statuses[space_id] = status
        self._last_event_ts[space_id] = ts
