"""Geo-tagged buildings, pairwise distances and anchor-specific scale partitions.

Every building acts as an anchor; the remaining buildings are assigned to
nested relevance levels by distance thresholds. Level 0 holds the anchor
itself (and anything at distance <= thresholds[0]); level L, one past the
last threshold, holds the pure negatives.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError

EARTH_RADIUS_M = 6_371_000.0

PLANAR = "planar"
GEO = "geo"
COORD_SYSTEMS = (PLANAR, GEO)
SPLITS = ("train", "test")


@dataclass(frozen=True)
class BuildingRecord:
    building_id: int
    coord: tuple[float, float]
    system: str = PLANAR
    name: str | None = None
    split: str = "train"

    def __post_init__(self):
        if self.system not in COORD_SYSTEMS:
            raise ConfigError(f"unknown coordinate system {self.system!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        object.__setattr__(self, "coord", (float(self.coord[0]), float(self.coord[1])))
        _check_coord(self.coord, self.system)


def _check_coord(coord: Sequence[float], system: str) -> None:
    a, b = coord
    if not (math.isfinite(a) and math.isfinite(b)):
        raise InputError(f"non-finite coordinate {coord!r}")
    if system == GEO and not (-90.0 <= a <= 90.0 and -180.0 <= b <= 180.0):
        raise InputError(f"geographic coordinate out of range: {coord!r}")


@dataclass(frozen=True)
class CampusRegistry:
    """Ordered collection of buildings sharing one coordinate system."""

    buildings: tuple[BuildingRecord, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buildings", tuple(self.buildings))
        systems = {b.system for b in self.buildings}
        if len(systems) > 1:
            raise ConfigError(f"registry mixes coordinate systems: {sorted(systems)}")
        index = {}
        for i, b in enumerate(self.buildings):
            if b.building_id in index:
                raise InputError(f"duplicate building_id {b.building_id}")
            index[b.building_id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.buildings)

    def __iter__(self):
        return iter(self.buildings)

    def __contains__(self, building_id) -> bool:
        return building_id in self._index

    @property
    def coord_system(self) -> str:
        return self.buildings[0].system if self.buildings else PLANAR

    @property
    def ids(self) -> np.ndarray:
        return np.array([b.building_id for b in self.buildings], dtype=np.int64)

    @property
    def coords(self) -> np.ndarray:
        return np.array([b.coord for b in self.buildings], dtype=np.float64).reshape(-1, 2)

    def index_of(self, building_id: int) -> int:
        try:
            return self._index[building_id]
        except KeyError:
            raise KeyError(f"building {building_id} not in registry") from None

    def get(self, building_id: int) -> BuildingRecord:
        return self.buildings[self.index_of(building_id)]

    def subset(self, split: str) -> "CampusRegistry":
        return CampusRegistry(tuple(b for b in self.buildings if b.split == split))


@dataclass(frozen=True)
class ScaleConfig:
    """Distance thresholds in meters; ``L = len(thresholds)``."""

    thresholds: tuple[float, ...] = (0.0, 200.0, 500.0)

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        object.__setattr__(self, "thresholds", t)
        if len(t) < 1:
            raise ConfigError("at least one threshold is required")
        if t[0] < 0 or not all(math.isfinite(x) for x in t):
            raise ConfigError(f"thresholds must be finite and >= 0: {t}")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ConfigError(f"thresholds must be strictly increasing: {t}")

    @property
    def n_scales(self) -> int:
        return len(self.thresholds)


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

def _distance_kernel(a: np.ndarray, b: np.ndarray, system: str) -> np.ndarray:
    # a, b broadcastable arrays of shape (..., 2)
    if system == PLANAR:
        dx = a[..., 0] - b[..., 0]
        dy = a[..., 1] - b[..., 1]
        return np.sqrt(dx * dx + dy * dy)
    lat1 = np.radians(a[..., 0])
    lat2 = np.radians(b[..., 0])
    dlat = lat2 - lat1
    dlon = np.radians(b[..., 1]) - np.radians(a[..., 1])
    h = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


def geodesic_distance(a: Sequence[float], b: Sequence[float], system: str = PLANAR,
                      system_b: str | None = None) -> float:
    """Distance in meters between two coordinates.

    Planar coordinates use 2-D Euclidean distance; geographic ``(lat, lon)``
    pairs use the great-circle (haversine) distance on a sphere of mean
    Earth radius.
    """
    if system_b is not None and system_b != system:
        raise ConfigError(f"cannot mix coordinate systems {system!r} and {system_b!r}")
    if system not in COORD_SYSTEMS:
        raise ConfigError(f"unknown coordinate system {system!r}")
    _check_coord(a, system)
    _check_coord(b, system)
    pa = np.asarray(a, dtype=np.float64)
    pb = np.asarray(b, dtype=np.float64)
    return float(_distance_kernel(pa, pb, system))


def pairwise_distances(registry: CampusRegistry) -> np.ndarray:
    """All-pairs distance matrix in meters, in registry order."""
    if len(registry) == 0:
        raise InputError("registry is empty")
    xy = registry.coords
    d = _distance_kernel(xy[:, None, :], xy[None, :, :], registry.coord_system)
    np.fill_diagonal(d, 0.0)
    return d


# ---------------------------------------------------------------------------
# relevance levels
# ---------------------------------------------------------------------------

def relevance_level(d: float, config: ScaleConfig) -> int:
    """Smallest ``l`` with ``d <= thresholds[l]``, or ``L`` beyond the last threshold."""
    if not d >= 0:
        raise InputError(f"distance must be non-negative, got {d}")
    return int(np.searchsorted(config.thresholds, d, side="left"))


def relevance_levels(d: np.ndarray, config: ScaleConfig) -> np.ndarray:
    """Vectorised :func:`relevance_level`."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d >= 0)):
        raise InputError("distances must be non-negative")
    return np.searchsorted(np.asarray(config.thresholds), d, side="left").astype(np.int64)


def level_matrix(registry: CampusRegistry, config: ScaleConfig,
                 distances: np.ndarray | None = None) -> np.ndarray:
    """Building x building relevance levels; row = anchor."""
    if distances is None:
        distances = pairwise_distances(registry)
    return relevance_levels(distances, config)


@dataclass(frozen=True)
class ScalePartition:
    """Nested scale sets around one anchor building."""

    anchor_building_id: int
    levels: dict  # building_id -> level
    n_scales: int

    def at_level(self, level: int) -> list[int]:
        return [b for b, lv in self.levels.items() if lv == level]

    def at_most(self, level: int) -> list[int]:
        return [b for b, lv in self.levels.items() if lv <= level]

    def beyond(self, level: int) -> list[int]:
        return [b for b, lv in self.levels.items() if lv > level]

    def pure_negatives(self) -> list[int]:
        return self.at_level(self.n_scales)

    def image_counts(self, images_per_building: dict) -> list[int]:
        """Cumulative image counts ``|S^{<=l}|`` for ``l = 0..L-1``."""
        out = []
        for lv in range(self.n_scales):
            out.append(sum(images_per_building.get(b, 0) for b in self.at_most(lv)))
        return out


def build_scale_partition(anchor: int, registry: CampusRegistry, config: ScaleConfig,
                          distances: np.ndarray | None = None) -> ScalePartition:
    i = registry.index_of(anchor)
    if distances is None:
        row = pairwise_distances(registry)[i]
    else:
        row = distances[i]
    lv = relevance_levels(row, config)
    levels = {int(b): int(l) for b, l in zip(registry.ids, lv)}
    levels[int(anchor)] = 0
    return ScalePartition(int(anchor), levels, config.n_scales)


def build_all_partitions(registry: CampusRegistry, config: ScaleConfig) -> list[ScalePartition]:
    d = pairwise_distances(registry)
    return [build_scale_partition(b.building_id, registry, config, d) for b in registry]


def distance_ranking(anchor: int, registry: CampusRegistry,
                     distances: np.ndarray | None = None) -> list[int]:
    """Other buildings by ascending distance from ``anchor``; ties by building id."""
    i = registry.index_of(anchor)
    row = pairwise_distances(registry)[i] if distances is None else distances[i]
    ids = registry.ids
    keep = np.arange(len(registry)) != i
    order = np.lexsort((ids[keep], row[keep]))
    return [int(x) for x in ids[keep][order]]


@dataclass(frozen=True)
class RelevanceTable:
    """Per (query image, gallery image) relevance level."""

    query_ids: np.ndarray
    gallery_ids: np.ndarray
    levels: np.ndarray  # (n_query, n_gallery) int
    n_scales: int


def relevance_table(query_ids: Iterable[int], query_buildings: Iterable[int],
                    gallery_ids: Iterable[int], gallery_buildings: Iterable[int],
                    registry: CampusRegistry, config: ScaleConfig) -> RelevanceTable:
    qb = np.asarray(list(query_buildings), dtype=np.int64)
    gb = np.asarray(list(gallery_buildings), dtype=np.int64)
    lv = level_matrix(registry, config)
    qi = np.array([registry.index_of(int(b)) for b in qb], dtype=np.int64)
    gi = np.array([registry.index_of(int(b)) for b in gb], dtype=np.int64)
    levels = lv[np.ix_(qi, gi)] if len(qi) and len(gi) else np.zeros((len(qi), len(gi)), np.int64)
    # same building is always level 0, even with a positive first threshold
    levels[qb[:, None] == gb[None, :]] = 0
    return RelevanceTable(np.asarray(list(query_ids), dtype=np.int64),
                          np.asarray(list(gallery_ids), dtype=np.int64),
                          levels, config.n_scales)


# ---------------------------------------------------------------------------
# registry file (JSON lines)
# ---------------------------------------------------------------------------

def save_registry(registry: CampusRegistry, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in registry:
            fh.write(json.dumps({"building_id": b.building_id, "name": b.name,
                                 "coord": [b.coord[0], b.coord[1]], "system": b.system,
                                 "split": b.split}) + "\n")


def load_registry(path) -> CampusRegistry:
    out = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(BuildingRecord(int(obj["building_id"]), tuple(obj["coord"]),
                                          obj.get("system", PLANAR), obj.get("name"),
                                          obj.get("split", "train")))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                if isinstance(exc, (ConfigError, InputError)):
                    raise
                raise InputError(f"{path}:{lineno}: bad registry line ({exc})") from exc
    return CampusRegistry(tuple(out))
