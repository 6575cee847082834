"""Edge-to-server line protocol and transmitted-byte accounting.

Grammar, version 1, UTF-8, LF-terminated records:

    H,1,<node_id>,<frame_seq>,<ts_ms>,<S|B>,<count>
    D,<class>,<x1>,<y1>,<x2>,<y2>,<score.4f>
    P,1,<node_id>,<ts_ms>,<nominal_kb>

A header opens a message and is followed by exactly ``count`` detection
records. P records stand for the periodic full-frame snapshot; they carry the
nominal size of the frame instead of pixels. A file of concatenated records
doubles as a replay log.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import GeometryError, ParseError
from .model import BoundingBox, Detection, DetectionKind

PROTOCOL_VERSION = "1"

# Raw-video equivalents used for the reduction-ratio arithmetic.
RAW_FRAME_KB = 100
RAW_FPS = 10
NOMINAL_DETECTION_KB_PER_MIN = 40


@dataclass(frozen=True)
class DetectionMessage:
    """One detector frame: shared header fields plus its detections."""

    node_id: str
    frame_seq: int
    ts: int
    kind: DetectionKind
    detections: tuple[Detection, ...] = ()

    def __post_init__(self):
        for det in self.detections:
            if det.kind is not self.kind:
                raise ValueError(f"detection kind {det.kind.name} differs from message kind {self.kind.name}")
            if det.node_id != self.node_id or det.frame_seq != self.frame_seq or det.ts != self.ts:
                raise ValueError("detection header fields differ from message header")


@dataclass(frozen=True)
class SnapshotNotice:
    """Marker for the periodic full-frame upload; carries its nominal size only."""

    node_id: str
    ts: int
    nominal_kb: int


def encode(msg: DetectionMessage | SnapshotNotice) -> bytes:
    """Canonical byte encoding; equal messages encode to identical bytes."""
    if isinstance(msg, SnapshotNotice):
        return f"P,{PROTOCOL_VERSION},{msg.node_id},{msg.ts},{msg.nominal_kb}\n".encode()
    lines = [f"H,{PROTOCOL_VERSION},{msg.node_id},{msg.frame_seq},{msg.ts},{msg.kind.value},{len(msg.detections)}"]
    for det in msg.detections:
        b = det.bbox
        lines.append(
            f"D,{det.class_label},{_coord(b.x1)},{_coord(b.y1)},{_coord(b.x2)},{_coord(b.y2)},{det.score:.4f}"
        )
    return ("\n".join(lines) + "\n").encode()


def _coord(value: float) -> int:
    if not float(value).is_integer():
        raise ParseError(f"wire coordinates must be integers, got {value!r}")
    return int(value)


def decode_stream(data: bytes | str):
    """Yield (message, encoded_byte_length) pairs from a replay log.

    Rejects unknown tags, wrong field counts, non-numeric fields, invalid
    boxes and header/record count mismatches, naming the offending line.
    """
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    pending: _PendingMessage | None = None
    lineno = 0
    for lineno, line in enumerate(text.split("\n")[:-1], start=1):
        parts = line.split(",")
        tag = parts[0]
        if tag == "D":
            if pending is None or pending.remaining == 0:
                raise ParseError("detection record outside a message", line=lineno)
            pending.add(_parse_detection(parts, lineno, pending), len(line) + 1)
            if pending.remaining == 0:
                yield pending.finish(lineno), pending.nbytes
                pending = None
            continue
        if pending is not None:
            raise ParseError(
                f"expected {pending.remaining} more detection record(s)", line=lineno
            )
        if tag == "H":
            pending = _parse_header(parts, lineno, len(line) + 1)
            if pending.remaining == 0:
                yield pending.finish(lineno), pending.nbytes
                pending = None
        elif tag == "P":
            yield _parse_notice(parts, lineno), len(line) + 1
        else:
            raise ParseError(f"unknown record tag {tag!r}", line=lineno)
    if pending is not None:
        raise ParseError(
            f"stream ended expecting {pending.remaining} more detection record(s)", line=lineno
        )
    if text and not text.endswith("\n"):
        raise ParseError("stream does not end with a newline", line=text.count("\n") + 1)


def decode(data: bytes | str) -> list[DetectionMessage | SnapshotNotice]:
    return [msg for msg, _ in decode_stream(data)]


@dataclass
class _PendingMessage:
    node_id: str
    frame_seq: int
    ts: int
    kind: DetectionKind
    remaining: int
    nbytes: int
    detections: list[Detection] = field(default_factory=list)

    def add(self, det: Detection, nbytes: int) -> None:
        self.detections.append(det)
        self.remaining -= 1
        self.nbytes += nbytes

    def finish(self, lineno: int) -> DetectionMessage:
        try:
            return DetectionMessage(
                self.node_id, self.frame_seq, self.ts, self.kind, tuple(self.detections)
            )
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc


def _parse_header(parts: list[str], lineno: int, nbytes: int) -> _PendingMessage:
    if len(parts) != 7:
        raise ParseError(f"header needs 7 fields, got {len(parts)}", line=lineno)
    _, version, node_id, frame_seq, ts, kind, count = parts
    if version != PROTOCOL_VERSION:
        raise ParseError(f"unsupported version {version!r}", line=lineno, field="version")
    if kind not in ("S", "B"):
        raise ParseError(f"kind must be S or B, got {kind!r}", line=lineno, field="kind")
    return _PendingMessage(
        node_id=_token(node_id, lineno, "node_id"),
        frame_seq=_int(frame_seq, lineno, "frame_seq"),
        ts=_int(ts, lineno, "ts_ms"),
        kind=DetectionKind(kind),
        remaining=_int(count, lineno, "count"),
        nbytes=nbytes,
    )


def _parse_detection(parts: list[str], lineno: int, pending: _PendingMessage) -> Detection:
    if len(parts) != 7:
        raise ParseError(f"detection needs 7 fields, got {len(parts)}", line=lineno)
    _, label, x1, y1, x2, y2, score_text = parts
    try:
        score = float(score_text)
    except ValueError:
        raise ParseError(f"non-numeric score {score_text!r}", line=lineno, field="score") from None
    coords = (
        _int(x1, lineno, "x1"),
        _int(y1, lineno, "y1"),
        _int(x2, lineno, "x2"),
        _int(y2, lineno, "y2"),
    )
    try:
        bbox = BoundingBox(*coords)
        return Detection(
            node_id=pending.node_id,
            frame_seq=pending.frame_seq,
            ts=pending.ts,
            kind=pending.kind,
            class_label=_token(label, lineno, "class"),
            bbox=bbox,
            score=score,
        )
    except (GeometryError, ValueError) as exc:
        raise ParseError(str(exc), line=lineno) from exc


def _parse_notice(parts: list[str], lineno: int) -> SnapshotNotice:
    if len(parts) != 5:
        raise ParseError(f"snapshot notice needs 5 fields, got {len(parts)}", line=lineno)
    _, version, node_id, ts, nominal_kb = parts
    if version != PROTOCOL_VERSION:
        raise ParseError(f"unsupported version {version!r}", line=lineno, field="version")
    return SnapshotNotice(
        node_id=_token(node_id, lineno, "node_id"),
        ts=_int(ts, lineno, "ts_ms"),
        nominal_kb=_int(nominal_kb, lineno, "nominal_kb"),
    )


def _int(text: str, lineno: int, fieldname: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r}", line=lineno, field=fieldname) from None
    if value < 0:
        raise ParseError(f"negative value {value}", line=lineno, field=fieldname)
    return value


def _token(text: str, lineno: int, fieldname: str) -> str:
    if not text:
        raise ParseError("empty value", line=lineno, field=fieldname)
    return text


@dataclass
class _NodeVolume:
    detection_bytes: int = 0
    snapshot_bytes: int = 0
    snapshot_nominal_kb: int = 0


class VolumeLedger:
    """Cumulative transmitted-byte counters per node, by record class."""

    def __init__(self, frame_kb: int = RAW_FRAME_KB, fps: int = RAW_FPS):
        self.frame_kb = frame_kb
        self.fps = fps
        self._nodes: dict[str, _NodeVolume] = {}

    def record(self, msg: DetectionMessage | SnapshotNotice, nbytes: int) -> None:
        node = self._nodes.setdefault(msg.node_id, _NodeVolume())
        if isinstance(msg, SnapshotNotice):
            node.snapshot_bytes += nbytes
            node.snapshot_nominal_kb += msg.nominal_kb
        else:
            node.detection_bytes += nbytes

    def add(self, node_id: str, *, detection_bytes: int = 0, snapshot_bytes: int = 0,
            snapshot_nominal_kb: int = 0) -> None:
        node = self._nodes.setdefault(node_id, _NodeVolume())
        node.detection_bytes += detection_bytes
        node.snapshot_bytes += snapshot_bytes
        node.snapshot_nominal_kb += snapshot_nominal_kb

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._nodes))

    def detection_bytes(self, node_id: str | None = None) -> int:
        return self._sum("detection_bytes", node_id)

    def snapshot_bytes(self, node_id: str | None = None) -> int:
        return self._sum("snapshot_bytes", node_id)

    def snapshot_nominal_kb(self, node_id: str | None = None) -> int:
        return self._sum("snapshot_nominal_kb", node_id)

    def _sum(self, attr: str, node_id: str | None) -> int:
        if node_id is not None:
            node = self._nodes.get(node_id, _NodeVolume())
            return getattr(node, attr)
        return sum(getattr(n, attr) for n in self._nodes.values())


@dataclass(frozen=True)
class VolumeReport:
    """Raw-equivalent vs transmitted volume, KB = 1000 bytes throughout."""

    elapsed_s: int
    raw_equivalent_kb: int
    detection_kb: float
    snapshot_wire_kb: float
    snapshot_nominal_kb: int
    actual_kb: float
    nominal_estimate_kb: float
    ratio: float

    def as_dict(self) -> dict:
        return {
            "elapsed_s": self.elapsed_s,
            "raw_equivalent_kb": self.raw_equivalent_kb,
            "detection_kb": self.detection_kb,
            "snapshot_wire_kb": self.snapshot_wire_kb,
            "snapshot_nominal_kb": self.snapshot_nominal_kb,
            "actual_kb": self.actual_kb,
            "nominal_estimate_kb": self.nominal_estimate_kb,
            "ratio": self.ratio,
        }


def volume_report(ledger: VolumeLedger, elapsed_s: int) -> VolumeReport:
    """Compare transmitted bytes against the raw-video equivalent.

    The raw equivalent assumes full frames at the ledger's nominal frame size
    and rate for the whole elapsed time. The nominal estimate prices the
    detection stream at a flat per-minute figure instead of the true bytes.
    """
    if elapsed_s <= 0:
        raise ValueError(f"elapsed_s must be positive, got {elapsed_s}")
    raw_kb = ledger.fps * ledger.frame_kb * elapsed_s
    detection_kb = ledger.detection_bytes() / 1000
    snapshot_wire_kb = ledger.snapshot_bytes() / 1000
    nominal_kb = ledger.snapshot_nominal_kb()
    actual_kb = detection_kb + snapshot_wire_kb + nominal_kb
    estimate_kb = NOMINAL_DETECTION_KB_PER_MIN * (elapsed_s / 60) + nominal_kb
    ratio = raw_kb / actual_kb if actual_kb > 0 else float("inf")
    return VolumeReport(
        elapsed_s=elapsed_s,
        raw_equivalent_kb=raw_kb,
        detection_kb=detection_kb,
        snapshot_wire_kb=snapshot_wire_kb,
        snapshot_nominal_kb=nominal_kb,
        actual_kb=actual_kb,
        nominal_estimate_kb=estimate_kb,
        ratio=ratio,
    )
