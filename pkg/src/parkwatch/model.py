"""Core geometry, detection, status and configuration types shared by all stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path

from .errors import ConfigError, GeometryError, ParseError, SpaceMapError

VEHICLE_CLASSES = frozenset({"car", "van", "bus", "truck"})

BG_CLASS_LABEL = "blob"

_SPACE_MAP_VERSION = "1"


class DetectionKind(Enum):
    SSD = "S"
    BG = "B"


class SpaceStatus(Enum):
    OCCUPIED = "occupied"
    VACANT = "vacant"
    UNKNOWN = "unknown"


class RecordSource(Enum):
    SSD = "ssd"
    BG = "bg"
    FUSED_WARNING = "fused_warning"
    FUSED_OCCLUSION = "fused_occlusion"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned rectangle in image coordinates (origin top-left, y grows down).

    Edges are strictly ordered, so the box always has positive area.
    Edges count as inside for containment checks.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise GeometryError(f"{name} must be finite and non-negative, got {value!r}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(
                f"box must have positive area, got ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    """Overlap area of two boxes, 0.0 when they are disjoint or touch only at an edge."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    if iw <= 0:
        return 0.0
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes.

    Returns:
        Overlap area divided by union area, in [0, 1]. 0.0 for disjoint boxes.
    """
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def is_vehicle(class_label: str) -> bool:
    """True for the closed vehicle vocabulary (car, van, bus, truck); case-sensitive."""
    return class_label in VEHICLE_CLASSES


@dataclass(frozen=True)
class ParkingSpace:
    """A labeled parking space: rectangle plus adjacency and placement tags."""

    space_id: str
    rect: BoundingBox
    neighbors: tuple[str, ...] = ()
    floor: str = ""
    node_id: str = ""

    def __post_init__(self):
        _check_token("space_id", self.space_id)
        _check_token("node_id", self.node_id, allow_empty=True)
        for n in self.neighbors:
            _check_token("neighbor", n)
        if self.space_id in self.neighbors:
            raise SpaceMapError(f"space {self.space_id} lists itself as a neighbor")


def center_in_space(b: BoundingBox, s: ParkingSpace) -> bool:
    """True when the box center lies inside the space rectangle (edges inclusive)."""
    cx, cy = b.center
    return s.rect.contains_point(cx, cy)


def space_containing(b: BoundingBox, spaces) -> ParkingSpace | None:
    """The space containing the box center, or None.

    If several space rectangles contain the center, the space whose rectangle
    center is nearest the box center wins; remaining ties go to the smaller
    space_id.
    """
    hits = [s for s in spaces if center_in_space(b, s)]
    if not hits:
        return None
    if len(hits) == 1:
        return hits[0]
    cx, cy = b.center

    def _key(s: ParkingSpace):
        sx, sy = s.rect.center
        return ((sx - cx) ** 2 + (sy - cy) ** 2, s.space_id)

    return min(hits, key=_key)


@dataclass(frozen=True)
class Detection:
    """One detector output at the edge: a classified box with a confidence score."""

    node_id: str
    frame_seq: int
    ts: int
    kind: DetectionKind
    class_label: str
    bbox: BoundingBox
    score: float

    def __post_init__(self):
        _check_token("node_id", self.node_id)
        _check_token("class_label", self.class_label)
        if self.frame_seq < 0:
            raise ValueError(f"frame_seq must be non-negative, got {self.frame_seq}")
        if self.ts < 0:
            raise ValueError(f"ts must be non-negative, got {self.ts}")
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score!r}")
        if self.kind is DetectionKind.BG:
            if self.class_label != BG_CLASS_LABEL:
                raise ValueError(f"BG detections carry class {BG_CLASS_LABEL!r}, got {self.class_label!r}")
            if self.score != 1.0:
                raise ValueError(f"BG detections carry score 1.0, got {self.score!r}")


@dataclass(frozen=True)
class OccupancyRecord:
    """Per-space status sample with source attribution."""

    ts: int
    node_id: str
    space_id: str
    status: SpaceStatus
    source: RecordSource


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the pipeline, detector emulators included.

    The first eight fields are the core detection parameters; the rest are
    artifact knobs (cadences, tracker internals, emulator noise).
    """

    th_max: float = 0.25
    th_min: float = 0.10
    iou_track: float = 0.60
    t_track_s: float = 8.0
    reid_window_s: float = 8.0
    r_warn: float = 0.8
    r_reactivate: float = 0.7
    occ_pct: float = 0.90
    fusion_step_s: float = 300.0
    snapshot_interval_s: float = 600.0
    sample_interval_s: float = 60.0
    max_age_frames: int = 5
    min_hits: int = 3
    min_assoc_iou: float = 0.3
    reid_enabled: bool = True
    ssd_recall: float = 0.97
    ssd_jitter_px: int = 2
    ssd_score_lo: float = 0.55
    ssd_score_hi: float = 0.99
    ssd_fp_rate: float = 0.01
    bg_blob_margin_px: int = 4
    bg_merge_dist_px: int = 20
    bg_noise_rate: float = 0.0

    def __post_init__(self):
        def _in_unit(name, value, closed_low=False):
            lo_ok = value >= 0.0 if closed_low else value > 0.0
            if not (lo_ok and value <= 1.0):
                raise ConfigError(f"{name} must be in {'[' if closed_low else '('}0, 1], got {value}")

        if not (0.0 < self.th_min < self.th_max < 1.0):
            raise ConfigError(
                f"need 0 < th_min < th_max < 1, got th_min={self.th_min} th_max={self.th_max}"
            )
        _in_unit("iou_track", self.iou_track)
        _in_unit("min_assoc_iou", self.min_assoc_iou)
        _in_unit("occ_pct", self.occ_pct)
        _in_unit("ssd_recall", self.ssd_recall, closed_low=True)
        for name in ("t_track_s", "reid_window_s", "fusion_step_s", "snapshot_interval_s",
                     "sample_interval_s", "r_warn", "r_reactivate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("max_age_frames", "min_hits"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("ssd_jitter_px", "bg_blob_margin_px", "bg_merge_dist_px",
                     "ssd_fp_rate", "bg_noise_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not (0.0 <= self.ssd_score_lo <= self.ssd_score_hi <= 1.0):
            raise ConfigError(
                f"need 0 <= ssd_score_lo <= ssd_score_hi <= 1, got "
                f"{self.ssd_score_lo}..{self.ssd_score_hi}"
            )

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        """Parse a key=value config file; unknown keys are rejected."""
        by_name = {f.name: f for f in fields(cls)}
        overrides = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError("expected key=value", line=lineno)
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in by_name:
                raise ParseError(f"unknown parameter {key!r}", line=lineno)
            ftype = by_name[key].type
            try:
                if ftype == "bool":
                    if value not in ("true", "false"):
                        raise ValueError(f"expected true or false, got {value!r}")
                    overrides[key] = value == "true"
                elif ftype == "int":
                    overrides[key] = int(value)
                else:
                    overrides[key] = float(value)
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, field=key) from exc
        try:
            return replace(cls(), **overrides)
        except ConfigError as exc:
            raise ParseError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


class SpaceMap:
    """All labeled parking spaces, indexed by id and grouped by owning node."""

    def __init__(self, spaces):
        self._spaces: dict[str, ParkingSpace] = {}
        for space in spaces:
            if space.space_id in self._spaces:
                raise SpaceMapError(f"duplicate space_id {space.space_id!r}")
            self._spaces[space.space_id] = space
        for space in self._spaces.values():
            for n in space.neighbors:
                other = self._spaces.get(n)
                if other is None:
                    raise SpaceMapError(f"space {space.space_id} references unknown neighbor {n!r}")
                if space.space_id not in other.neighbors:
                    raise SpaceMapError(
                        f"neighbor relation not symmetric between {space.space_id} and {n}"
                    )

    def __len__(self) -> int:
        return len(self._spaces)

    def __iter__(self):
        return iter(self._spaces.values())

    def __getitem__(self, space_id: str) -> ParkingSpace:
        try:
            return self._spaces[space_id]
        except KeyError:
            raise SpaceMapError(f"unknown space_id {space_id!r}") from None

    def __contains__(self, space_id: str) -> bool:
        return space_id in self._spaces

    def node_ids(self) -> tuple[str, ...]:
        return tuple(sorted({s.node_id for s in self._spaces.values()}))

    def for_node(self, node_id: str) -> tuple[ParkingSpace, ...]:
        return tuple(
            sorted((s for s in self._spaces.values() if s.node_id == node_id),
                   key=lambda s: s.space_id)
        )

    @classmethod
    def from_text(cls, text: str) -> "SpaceMap":
        """Parse the line-based space map format.

        One record per line:
        ``S,<version>,<node_id>,<space_id>,<floor>,<x1>,<y1>,<x2>,<y2>,<n1;n2;...>``
        Blank lines and ``#`` comments are skipped.
        """
        spaces = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if parts[0] != "S":
                raise ParseError(f"unknown record tag {parts[0]!r}", line=lineno)
            if len(parts) != 10:
                raise ParseError(f"expected 10 fields, got {len(parts)}", line=lineno)
            _, version, node_id, space_id, floor, x1, y1, x2, y2, neigh = parts
            if version != _SPACE_MAP_VERSION:
                raise ParseError(f"unsupported version {version!r}", line=lineno, field="version")
            try:
                rect = BoundingBox(float(x1), float(y1), float(x2), float(y2))
            except (ValueError, GeometryError) as exc:
                raise ParseError(str(exc), line=lineno, field="rect") from exc
            neighbors = tuple(n for n in neigh.split(";") if n)
            try:
                spaces.append(ParkingSpace(space_id, rect, neighbors, floor, node_id))
            except (ValueError, SpaceMapError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
        try:
            return cls(spaces)
        except SpaceMapError as exc:
            raise ParseError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "SpaceMap":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = []
        for s in sorted(self._spaces.values(), key=lambda s: (s.node_id, s.space_id)):
            r = s.rect
            lines.append(
                f"S,{_SPACE_MAP_VERSION},{s.node_id},{s.space_id},{s.floor},"
                f"{_fmt(r.x1)},{_fmt(r.y1)},{_fmt(r.x2)},{_fmt(r.y2)},{';'.join(s.neighbors)}"
            )
        return "\n".join(lines) + "\n"


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(value)


def _check_token(name: str, value: str, allow_empty: bool = False):
    if not isinstance(value, str):
        raise ValueError(f"{name} must be a string, got {type(value).__name__}")
    if not value and not allow_empty:
        raise ValueError(f"{name} must not be empty")
    if any(c in value for c in ",;\n\r"):
        raise ValueError(f"{name} must not contain separators, got {value!r}")
