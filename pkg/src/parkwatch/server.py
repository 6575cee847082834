"""Server side: message ingest, per-node pipelines, logs and evaluation.

Each node gets exactly one pipeline. Snapshot frames drive the matching path
and (on the first one) bootstrap everything; motion frames drive the tracker.
The warning machine steps on a fixed cadence and the fused statuses are
sampled to the occupancy log on another, both anchored at the node's first
snapshot frame. A pending cadence boundary fires as soon as a message at or
past it arrives, before the message itself when the message is strictly
later.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass
from pathlib import Path

from .errors import OrderingError, ParseError, RangeError, RoutingError
from .fusion import (
    FusionMode,
    FusionState,
    detect_occlusions,
    fuse,
    update_mode,
)
from .model import (
    OccupancyRecord,
    PipelineConfig,
    RecordSource,
    SpaceMap,
    SpaceStatus,
    is_vehicle,
)
from .occupancy_bg import BgStatusMap
from .occupancy_ssd import resolve_snapshot
from .tracker import SortTracker, TrackEvent, TrackEventKind
from .wire import DetectionKind, DetectionMessage, SnapshotNotice, VolumeLedger, decode_stream

logger = logging.getLogger(__name__)


def _occupied_count(statuses: dict[str, SpaceStatus]) -> int:
    return sum(1 for s in statuses.values() if s is SpaceStatus.OCCUPIED)


class NodePipeline:
    """Single-writer pipeline for one camera node."""

    def __init__(self, node_id: str, spaces, cfg: PipelineConfig, track_sink=None):
        self.node_id = node_id
        self.spaces = tuple(sorted(spaces, key=lambda s: s.space_id))
        self.cfg = cfg
        self.prev_ssd: dict[str, SpaceStatus] = {
            s.space_id: SpaceStatus.UNKNOWN for s in self.spaces
        }
        self.tracker = SortTracker(cfg)
        self.bg = BgStatusMap()
        self.fusion = FusionState()
        self.flags: list = []
        self.mode_transitions: list[tuple[int, FusionMode]] = []
        self.last_ts: int | None = None
        self._bootstrap_ts: int | None = None
        self._next_fusion_ts: int | None = None
        self._next_sample_ts: int | None = None
        self._track_sink = track_sink
        self._pre_bootstrap_retirements = 0

    @property
    def bootstrapped(self) -> bool:
        return self._bootstrap_ts is not None

    def ingest(self, msg: DetectionMessage | SnapshotNotice) -> list[OccupancyRecord]:
        """Process one message; returns any occupancy records it produced."""
        if self.last_ts is not None and msg.ts < self.last_ts:
            raise OrderingError(
                f"node {self.node_id}: message ts {msg.ts} before last ts {self.last_ts}"
            )
        out: list[OccupancyRecord] = []
        self._fire_boundaries(msg.ts, out, inclusive=False)
        if isinstance(msg, DetectionMessage):
            if msg.kind is DetectionKind.SSD:
                self._ingest_ssd(msg, out)
            else:
                self._ingest_bg(msg)
        self._fire_boundaries(msg.ts, out, inclusive=True)
        self.last_ts = msg.ts
        return out

    def _ingest_ssd(self, msg: DetectionMessage, out: list[OccupancyRecord]) -> None:
        vehicles = [d for d in msg.detections if is_vehicle(d.class_label)]
        snapshot = resolve_snapshot(
            self.spaces, vehicles, self.prev_ssd, self.cfg,
            ts=msg.ts, allow_unknown=not self.bootstrapped,
        )
        self.flags = detect_occlusions(snapshot, self.spaces, self.cfg)
        self.prev_ssd = snapshot.statuses
        if not self.bootstrapped:
            self._bootstrap(msg.ts, out)

    def _bootstrap(self, ts: int, out: list[OccupancyRecord]) -> None:
        self._bootstrap_ts = ts
        self.bg.bootstrap(self.prev_ssd)
        self.fusion = FusionState(
            mode=FusionMode.NORMAL,
            ssd_prev_count=_occupied_count(self.prev_ssd),
            last_step_ts=ts,
        )
        self._next_fusion_ts = ts + int(self.cfg.fusion_step_s * 1000)
        self._next_sample_ts = ts + int(self.cfg.sample_interval_s * 1000)
        self._emit_sample(ts, out)

    def _ingest_bg(self, msg: DetectionMessage) -> None:
        events = self.tracker.step(list(msg.detections), msg.ts)
        if self._track_sink is not None:
            for ev in events:
                self._track_sink(self.node_id, ev)
        for ev in events:
            if ev.kind is not TrackEventKind.RETIRE:
                continue
            if self.bootstrapped:
                self.bg.apply_track(ev.track, self.spaces, self.cfg)
            else:
                self._pre_bootstrap_retirements += 1

    def _fire_boundaries(self, ts: int, out: list[OccupancyRecord], inclusive: bool) -> None:
        if not self.bootstrapped:
            return
        fusion_ms = int(self.cfg.fusion_step_s * 1000)
        sample_ms = int(self.cfg.sample_interval_s * 1000)
        while True:
            candidates = []
            if self._due(self._next_fusion_ts, ts, inclusive):
                candidates.append((self._next_fusion_ts, 0))
            if self._due(self._next_sample_ts, ts, inclusive):
                candidates.append((self._next_sample_ts, 1))
            if not candidates:
                return
            boundary, which = min(candidates)
            if which == 0:
                self._step_fusion(boundary)
                self._next_fusion_ts = boundary + fusion_ms
            else:
                self._emit_sample(boundary, out)
                self._next_sample_ts = boundary + sample_ms

    @staticmethod
    def _due(boundary: int | None, ts: int, inclusive: bool) -> bool:
        if boundary is None:
            return False
        return boundary <= ts if inclusive else boundary < ts

    def _step_fusion(self, ts: int) -> None:
        before = self.fusion.mode
        self.fusion = update_mode(
            self.fusion,
            _occupied_count(self.prev_ssd),
            _occupied_count(self.bg.current()),
            self.cfg,
            ts=ts,
        )
        if self.fusion.mode is not before:
            self.mode_transitions.append((ts, self.fusion.mode))

    def _emit_sample(self, ts: int, out: list[OccupancyRecord]) -> None:
        final = fuse(self.prev_ssd, self.bg.current(), self.fusion.mode, self.flags)
        for space in self.spaces:
            status, source = final[space.space_id]
            out.append(OccupancyRecord(ts, self.node_id, space.space_id, status, source))


class OccupancyServer:
    """Routes decoded messages to per-node pipelines."""

    def __init__(self, spaces: SpaceMap, cfg: PipelineConfig, track_sink=None):
        self.pipelines: dict[str, NodePipeline] = {
            node_id: NodePipeline(node_id, spaces.for_node(node_id), cfg, track_sink)
            for node_id in spaces.node_ids()
        }
        self.dropped_messages = 0

    def ingest(self, msg: DetectionMessage | SnapshotNotice) -> list[OccupancyRecord]:
        pipeline = self.pipelines.get(msg.node_id)
        if pipeline is None:
            raise RoutingError(f"no pipeline for node {msg.node_id!r}")
        try:
            return pipeline.ingest(msg)
        except OrderingError as exc:
            self.dropped_messages += 1
            logger.warning("dropped out-of-order message: %s", exc)
            return []


@dataclass(frozen=True)
class ReplayResult:
    records: list[OccupancyRecord]
    ledger: VolumeLedger
    server: OccupancyServer


def replay_stream(data: bytes | str, spaces: SpaceMap, cfg: PipelineConfig,
                  track_sink=None) -> ReplayResult:
    """Decode a wire log and run it through a fresh server."""
    server = OccupancyServer(spaces, cfg, track_sink)
    ledger = VolumeLedger()
    records: list[OccupancyRecord] = []
    for msg, nbytes in decode_stream(data):
        ledger.record(msg, nbytes)
        records.extend(server.ingest(msg))
    return ReplayResult(records=records, ledger=ledger, server=server)


# ---------------------------------------------------------------------------
# Occupancy log persistence (headerless CSV, one record per line)

def occupancy_to_lines(records) -> list[str]:
    return [
        f"{r.ts},{r.node_id},{r.space_id},{r.status.value},{r.source.value}"
        for r in records
    ]


def write_occupancy_csv(records, path: str | Path) -> None:
    lines = occupancy_to_lines(records)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def parse_occupancy_csv(text: str) -> list[OccupancyRecord]:
    """Strict parser; malformed rows name their line number."""
    records: list[OccupancyRecord] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ParseError(f"expected 5 fields, got {len(parts)}", line=lineno)
        ts_text, node_id, space_id, status_text, source_text = parts
        try:
            records.append(OccupancyRecord(
                ts=int(ts_text),
                node_id=node_id,
                space_id=space_id,
                status=SpaceStatus(status_text),
                source=RecordSource(source_text),
            ))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
    return records


def write_ground_truth_csv(rows, path: str | Path) -> None:
    """Rows are (ts_ms, space_id, status)."""
    Path(path).write_text(
        "".join(f"{ts},{space_id},{status.value}\n" for ts, space_id, status in rows),
        encoding="utf-8",
    )


def load_ground_truth_csv(source: str | Path) -> list[tuple[int, str, SpaceStatus]]:
    text = Path(source).read_text(encoding="utf-8") if isinstance(source, Path) else source
    rows: list[tuple[int, str, SpaceStatus]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ParseError(f"expected 3 fields, got {len(parts)}", line=lineno)
        try:
            rows.append((int(parts[0]), parts[1], SpaceStatus(parts[2])))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
    return rows


# ---------------------------------------------------------------------------
# Evaluation

@dataclass(frozen=True)
class EvaluationReport:
    """Accuracy of the fused log against ground truth at sampled instants."""

    overall_accuracy_pct: float
    by_condition: dict[str, float]
    confusion: dict[str, int]
    n_instants: int
    n_spaces: int
    instants: tuple[int, ...]

    def as_dict(self) -> dict:
        return {
            "overall_accuracy_pct": self.overall_accuracy_pct,
            "by_condition": dict(sorted(self.by_condition.items())),
            "confusion": dict(sorted(self.confusion.items())),
            "n_instants": self.n_instants,
            "n_spaces": self.n_spaces,
        }


class StatusSeries:
    """Carry-forward lookup over a ts-sorted per-space status series."""

    def __init__(self):
        self._by_space: dict[str, tuple[list[int], list[SpaceStatus]]] = {}

    def add(self, ts: int, space_id: str, status: SpaceStatus) -> None:
        ts_list, st_list = self._by_space.setdefault(space_id, ([], []))
        ts_list.append(ts)
        st_list.append(status)

    @property
    def space_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._by_space))

    def bounds(self) -> tuple[int, int]:
        """(latest series start, earliest series end) across spaces."""
        starts = [ts[0] for ts, _ in self._by_space.values()]
        ends = [ts[-1] for ts, _ in self._by_space.values()]
        return max(starts), min(ends)

    def status_at(self, space_id: str, instant: int) -> SpaceStatus | None:
        entry = self._by_space.get(space_id)
        if entry is None:
            return None
        ts_list, st_list = entry
        idx = bisect.bisect_right(ts_list, instant) - 1
        return st_list[idx] if idx >= 0 else None


def evaluate(
    records,
    truth_rows,
    sample_interval_s: float,
    condition_windows=(),
) -> EvaluationReport:
    """Sample both series on a fixed grid and score per-space agreement.

    The grid starts where both series have begun and steps sample_interval_s
    until either ends. Accuracy is correct comparisons over all comparisons,
    as a percentage. condition_windows entries are (start_ms, end_ms, tag);
    instants outside every window count toward the "normal" condition.
    """
    predicted = StatusSeries()
    for r in records:
        predicted.add(r.ts, r.space_id, r.status)
    truth = StatusSeries()
    for ts, space_id, status in truth_rows:
        truth.add(ts, space_id, status)
    if not predicted.space_ids or not truth.space_ids:
        raise RangeError("evaluation needs non-empty log and truth")

    spaces = tuple(sorted(set(predicted.space_ids) & set(truth.space_ids)))
    if not spaces:
        raise RangeError("log and truth share no spaces")
    p_start, p_end = predicted.bounds()
    t_start, t_end = truth.bounds()
    start = max(p_start, t_start)
    end = min(p_end, t_end)
    if start > end:
        raise RangeError(f"no common time range (log {p_start}..{p_end}, truth {t_start}..{t_end})")

    step_ms = int(sample_interval_s * 1000)
    instants = tuple(range(start, end + 1, step_ms))
    confusion = {"occ_occ": 0, "occ_vac": 0, "vac_occ": 0, "vac_vac": 0}
    per_condition: dict[str, list[int]] = {}
    for instant in instants:
        tag = "normal"
        for w_start, w_end, w_tag in condition_windows:
            if w_start <= instant < w_end:
                tag = w_tag
                break
        bucket = per_condition.setdefault(tag, [0, 0])
        for space_id in spaces:
            got = predicted.status_at(space_id, instant)
            expected = truth.status_at(space_id, instant)
            correct = got is expected
            bucket[0] += int(correct)
            bucket[1] += 1
            key = (
                ("occ" if got is SpaceStatus.OCCUPIED else "vac")
                + "_"
                + ("occ" if expected is SpaceStatus.OCCUPIED else "vac")
            )
            confusion[key] += 1

    total_correct = sum(c for c, _ in per_condition.values())
    total = sum(n for _, n in per_condition.values())
    return EvaluationReport(
        overall_accuracy_pct=100.0 * total_correct / total,
        by_condition={tag: 100.0 * c / n for tag, (c, n) in per_condition.items()},
        confusion=confusion,
        n_instants=len(instants),
        n_spaces=len(spaces),
        instants=instants,
    )


# ---------------------------------------------------------------------------
# Occupancy-pattern report

def weekly_pattern(records, bucket_s: float) -> list[tuple[int, str, int, int]]:
    """Bucketed occupied counts per node: (bucket_start_ms, node_id, occupied, total).

    Buckets are anchored at each node's first record and report the statuses
    in force at the bucket start instant.
    """
    if not records:
        raise RangeError("occupancy log is empty")
    per_node: dict[str, StatusSeries] = {}
    node_bounds: dict[str, tuple[int, int]] = {}
    for r in records:
        per_node.setdefault(r.node_id, StatusSeries()).add(r.ts, r.space_id, r.status)
        lo, hi = node_bounds.get(r.node_id, (r.ts, r.ts))
        node_bounds[r.node_id] = (min(lo, r.ts), max(hi, r.ts))

    bucket_ms = int(bucket_s * 1000)
    rows: list[tuple[int, str, int, int]] = []
    for node_id in sorted(per_node):
        series = per_node[node_id]
        start, end = node_bounds[node_id]
        spaces = series.space_ids
        for bucket_start in range(start, end + 1, bucket_ms):
            occupied = sum(
                1 for sid in spaces
                if series.status_at(sid, bucket_start) is SpaceStatus.OCCUPIED
            )
            rows.append((bucket_start, node_id, occupied, len(spaces)))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def weekly_pattern_to_csv(rows) -> str:
    return "".join(f"{ts},{node},{occ},{total}\n" for ts, node, occ, total in rows)


def track_sink_to_file(handle):
    """A track_sink that appends debug CSV lines to an open text file."""
    from .tracker import track_events_to_csv

    def sink(node_id: str, event: TrackEvent) -> None:
        handle.write(track_events_to_csv([event], node_id))

    return sink
