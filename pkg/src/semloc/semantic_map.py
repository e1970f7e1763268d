"""Top-down semantic map, class-wise truncated distance fields, road sampling.

The map is a grid of class indices.  Pixel coordinates follow image
convention: x is the column, y is the row, and integer coordinates sit on
cell centers, so the in-bounds query domain is [0, w-1] x [0, h-1].
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

__all__ = [
    "UNLABELLED",
    "IGNORE",
    "ClassSet",
    "SemanticMap",
    "ClassTDF",
    "NoRoadCellsError",
    "build_tdf",
    "query_tdf",
    "sample_road_cells",
]


class NoRoadCellsError(ValueError):
    """Raised when road-prior initialization is impossible."""

# Cell value for map pixels that carry no class; contributes no distance
# sources to any field.
UNLABELLED = 255
# Remap target for scan labels excluded from scoring.
IGNORE = -1

CANONICAL_CLASSES = ("road", "terrain", "vegetation", "building")
# Raw scan label space: canonical classes plus the two scan-side extras.
RAW_VEHICLE = 4
RAW_OTHER = 5


def _default_remap():
    remap = {i: i for i in range(len(CANONICAL_CLASSES))}
    remap[RAW_VEHICLE] = 0  # vehicles read as road surface in the top-down view
    remap[RAW_OTHER] = IGNORE
    return remap


@dataclass(frozen=True)
class ClassSet:
    """Canonical scoring classes and the raw-label remap table.

    `names` orders the canonical classes; `remap` sends every raw scan
    label to a canonical index or IGNORE.  Raw labels absent from the
    table are ignored.
    """

    names: tuple = CANONICAL_CLASSES
    remap: dict = field(default_factory=_default_remap)
    ignore: frozenset = frozenset()

    def __post_init__(self):
        if len(self.names) == 0:
            raise ValueError("class set must name at least one class")
        n = len(self.names)
        for raw, canon in self.remap.items():
            if canon != IGNORE and not (0 <= canon < n):
                raise ValueError(f"remap of raw label {raw} -> {canon} out of range")

    @property
    def n_classes(self):
        return len(self.names)

    def index_of(self, name):
        return self.names.index(name)

    def remap_labels(self, raw_labels):
        """Vectorized raw label -> canonical index (IGNORE for unknown/ignored)."""
        raw_labels = np.asarray(raw_labels)
        out = np.full(raw_labels.shape, IGNORE, dtype=np.int32)
        for raw, canon in self.remap.items():
            if canon in self.ignore:
                canon = IGNORE
            out[raw_labels == raw] = canon
        return out


@dataclass
class SemanticMap:
    """Grid of class indices with optional scale prior and pixel origin."""

    cells: np.ndarray  # (h, w) uint8, canonical class index or UNLABELLED
    scale_prior: float | None = None  # px per meter, if known
    origin_px: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.cells.ndim != 2 or self.cells.size == 0:
            raise ValueError("map must be a non-empty 2D grid")
        self.origin_px = np.asarray(self.origin_px, dtype=np.float64)

    @property
    def height(self):
        return self.cells.shape[0]

    @property
    def width(self):
        return self.cells.shape[1]

    def world_to_px(self, xy_m, scale):
        """Map-frame meters -> continuous pixel coordinates at the given scale."""
        return np.asarray(xy_m, dtype=np.float64) * scale + self.origin_px

    def px_to_world(self, xy_px, scale):
        return (np.asarray(xy_px, dtype=np.float64) - self.origin_px) / scale


@dataclass
class ClassTDF:
    """Per-class truncated Euclidean distance field, distances in pixels.

    values[c, y, x] is the distance from cell (x, y) to the nearest cell
    of class c, capped at trunc_radius.  Fields of classes absent from
    the map are trunc_radius everywhere.
    """

    values: np.ndarray  # (n_classes, h, w) float32
    trunc_radius: float

    @property
    def n_classes(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]

    def query(self, class_index, points_px):
        return query_tdf(self, class_index, points_px)


def build_tdf(semantic_map, classes, trunc_radius):
    """Compute the class-wise truncated Euclidean distance field of a map.

    Uses an exact two-pass distance transform per class (distances are
    sqrt of integer squared cell offsets, so results match a brute-force
    nearest-same-class-cell search bit for bit).  Unlabelled cells are
    sources for no class.
    """
    if classes.n_classes == 0:
        raise ValueError("class set must not be empty")
    if trunc_radius <= 0:
        raise ValueError("trunc_radius must be positive")
    cells = semantic_map.cells
    fields = np.empty((classes.n_classes, cells.shape[0], cells.shape[1]), dtype=np.float32)
    for c in range(classes.n_classes):
        mask = cells == c
        if not mask.any():
            fields[c] = trunc_radius
            continue
        dist = distance_transform_edt(~mask)
        np.minimum(dist, trunc_radius, out=dist)
        fields[c] = dist.astype(np.float32)
    return ClassTDF(values=fields, trunc_radius=float(trunc_radius))


def query_tdf(tdf, class_index, points_px):
    """Bilinear field lookup at continuous pixel coordinates.

    points_px is (..., 2) as (x, y).  Points outside the cell-center hull
    [0, w-1] x [0, h-1] return trunc_radius: a particle drifting off the
    map is maximally penalized rather than rejected.
    """
    if not (0 <= class_index < tdf.n_classes):
        raise IndexError(f"class index {class_index} out of range")
    points_px = np.asarray(points_px, dtype=np.float64)
    scalar_input = points_px.ndim == 1
    pts = np.atleast_2d(points_px)
    plane = tdf.values[class_index]
    out = _bilinear(plane, pts[:, 0], pts[:, 1], tdf.trunc_radius)
    return float(out[0]) if scalar_input else out.reshape(points_px.shape[:-1])


def _bilinear(plane, x, y, fill):
    """Bilinear interpolation on one field plane; out-of-hull points get fill."""
    h, w = plane.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc), w - 2 if w > 1 else 0).astype(np.intp)
    y0 = np.minimum(np.floor(yc), h - 2 if h > 1 else 0).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v00 = plane[y0, x0].astype(np.float64)
    v01 = plane[y0, x1].astype(np.float64)
    v10 = plane[y1, x0].astype(np.float64)
    v11 = plane[y1, x1].astype(np.float64)
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    val = top + fy * (bot - top)
    return np.where(inside, val, fill)


def sample_road_cells(semantic_map, k, rng, road_index=0):
    """Draw k road cells uniformly with replacement; returns (k, 2) as (x, y) px."""
    ys, xs = np.nonzero(semantic_map.cells == road_index)
    if len(xs) == 0:
        raise NoRoadCellsError("map contains no road cells; cannot initialize on roads")
    idx = rng.integers(0, len(xs), size=k)
    return np.stack([xs[idx], ys[idx]], axis=1).astype(np.float64)
