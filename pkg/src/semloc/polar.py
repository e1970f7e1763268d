"""Polar-grid scan scoring.

A semantic scan is binned once into a per-class polar histogram; the map
side is sampled into a matching polar stack of truncated-distance values
per candidate pose.  The registration cost is then one inner product per
class, and rotating a candidate by a whole number of angular bins is an
index shift instead of a re-projection.

Angular bin i covers headings [i*dtheta, (i+1)*dtheta) after wrapping, so
a point straight ahead (atan2 = 0) lands in bin 0.  Radial bin j covers
ranges [j*dr, (j+1)*dr); points at or beyond r_max are not scored.
"""

from dataclasses import dataclass

import numpy as np

from . import _fastcost
from .semantic_map import IGNORE

__all__ = [
    "PolarGridSpec",
    "PolarClassHistogram",
    "PolarTDFStack",
    "rasterize_scan",
    "render_local_tdf",
    "rotate_histogram",
    "score",
    "cost_of_poses",
]


@dataclass(frozen=True)
class PolarGridSpec:
    n_theta: int = 100
    n_r: int = 25
    r_max: float = 25.0

    def __post_init__(self):
        if self.n_theta < 4 or self.n_theta % 2 != 0:
            raise ValueError("n_theta must be even and >= 4")
        if self.n_r < 1:
            raise ValueError("n_r must be >= 1")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")

    @property
    def d_theta(self):
        return 2.0 * np.pi / self.n_theta

    @property
    def d_r(self):
        return self.r_max / self.n_r

    def bin_centers(self):
        """Robot-frame metric coordinates of every bin center, shape (n_theta, n_r, 2)."""
        th = (np.arange(self.n_theta) + 0.5) * self.d_theta
        rr = (np.arange(self.n_r) + 0.5) * self.d_r
        x = np.cos(th)[:, None] * rr[None, :]
        y = np.sin(th)[:, None] * rr[None, :]
        return np.stack([x, y], axis=-1)


@dataclass
class PolarClassHistogram:
    """Per-class point counts over the polar grid."""

    counts: np.ndarray  # (n_classes, n_theta, n_r) int64
    total_points: int
    spec: PolarGridSpec


@dataclass
class PolarTDFStack:
    """Distance-field values sampled at every bin center for one pose/scale."""

    values: np.ndarray  # (n_classes, n_theta, n_r) float64
    spec: PolarGridSpec


def rasterize_scan(scan, spec, classes):
    """Bin a semantic scan into a polar class histogram.

    Points are projected to the ground plane (z dropped).  Points whose
    remapped class is ignored, or whose planar range reaches r_max, are
    excluded and do not count toward total_points.
    """
    counts = np.zeros((classes.n_classes, spec.n_theta, spec.n_r), dtype=np.int64)
    pts = np.asarray(scan.points, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(scan.labels)
    if pts.shape[0] != labels.shape[0]:
        raise ValueError("point/label count mismatch")
    if pts.shape[0] == 0:
        return PolarClassHistogram(counts=counts, total_points=0, spec=spec)

    canon = classes.remap_labels(labels)
    rng_xy = np.hypot(pts[:, 0], pts[:, 1])
    keep = (canon != IGNORE) & (rng_xy < spec.r_max)
    if not keep.any():
        return PolarClassHistogram(counts=counts, total_points=0, spec=spec)

    canon = canon[keep]
    x, y = pts[keep, 0], pts[keep, 1]
    r = rng_xy[keep]
    ti = np.floor(np.arctan2(y, x) / spec.d_theta).astype(np.int64) % spec.n_theta
    ri = np.floor(r / spec.d_r).astype(np.int64)
    ri = np.minimum(ri, spec.n_r - 1)  # guards r just below r_max rounding up
    np.add.at(counts, (canon, ti, ri), 1)
    return PolarClassHistogram(counts=counts, total_points=int(keep.sum()), spec=spec)


def render_local_tdf(tdf, pose, scale, spec, origin_px=(0.0, 0.0)):
    """Sample the map's distance fields over the polar grid around a pose.

    Each bin center is placed in the map frame via the candidate pose,
    converted to pixels at the candidate scale, and looked up in every
    class field (bilinear; off-map reads trunc_radius).
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    pose = np.asarray(pose, dtype=np.float64)
    centers = spec.bin_centers().reshape(-1, 2)
    c, s = np.cos(pose[2]), np.sin(pose[2])
    wx = pose[0] + c * centers[:, 0] - s * centers[:, 1]
    wy = pose[1] + s * centers[:, 0] + c * centers[:, 1]
    px = wx * scale + origin_px[0]
    py = wy * scale + origin_px[1]
    pts = np.stack([px, py], axis=1)
    values = np.empty((tdf.n_classes, spec.n_theta, spec.n_r))
    for ci in range(tdf.n_classes):
        values[ci] = tdf.query(ci, pts).reshape(spec.n_theta, spec.n_r)
    return PolarTDFStack(values=values, spec=spec)


def rotate_histogram(hist, k):
    """Histogram of the same scan rotated by k angular bins (counts shift)."""
    return PolarClassHistogram(
        counts=np.roll(hist.counts, k, axis=1),
        total_points=hist.total_points,
        spec=hist.spec,
    )


def score(hist, stack, alpha):
    """Weighted registration cost: sum_c alpha_c <counts_c, distances_c>."""
    if hist.counts.shape != stack.values.shape:
        raise ValueError(
            f"histogram/stack shape mismatch: {hist.counts.shape} vs {stack.values.shape}"
        )
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (hist.counts.shape[0],):
        raise ValueError("alpha must have one weight per class")
    per_class = np.einsum("ctr,ctr->c", hist.counts.astype(np.float64), stack.values)
    return float(per_class @ alpha)


class _SparseHistogram:
    """Nonzero histogram entries with precomputed bin-center offsets.

    Shared by every particle in a weighting pass: only bins that actually
    contain scan points contribute to the cost, so per-particle work is one
    field lookup per occupied (class, theta, r) bin.
    """

    def __init__(self, hist, alpha):
        cls, ti, ri = np.nonzero(hist.counts)
        # canonical order (class-major, then theta, then r) keeps summation
        # order identical between this path and dense score()
        self.cls = cls.astype(np.intp)
        centers = hist.spec.bin_centers()
        self.offsets = centers[ti, ri]  # (E, 2) robot-frame meters
        alpha = np.asarray(alpha, dtype=np.float64)
        self.weights = hist.counts[cls, ti, ri] * alpha[cls]
        self.n_entries = len(cls)


def cost_of_poses(tdf, poses, scales, hist, alpha, origin_px=(0.0, 0.0), pool=None, cap_m=None):
    """Registration cost of many (pose, scale) candidates against one scan.

    Mathematically identical to score(hist, render_local_tdf(...), alpha)
    per candidate, but only occupied bins are sampled and the candidates
    are processed as one vectorized batch (optionally fanned out over a
    thread pool; results do not depend on the pool size).

    With cap_m set, each bin's field value is clamped at cap_m * scale
    pixels before weighting: truncation then costs the same number of
    meters for every scale hypothesis, instead of trunc_radius/scale.
    """
    poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
    scales = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    n = len(poses)
    sparse = _SparseHistogram(hist, alpha)
    if sparse.n_entries == 0:
        return np.zeros(n)

    out = np.empty(n)
    # chunking bounds the (chunk x entries) temporaries and is the thread
    # fan-out unit; per-candidate sums are self-contained so the split
    # never changes results
    if _fastcost.HAVE_NUMBA:
        n_workers = getattr(pool, "_max_workers", 1) if pool is not None else 1
        chunk = n if n_workers <= 1 else max(64, -(-n // n_workers))
    else:
        chunk = max(1, min(n, int(4e6) // max(1, sparse.n_entries)))
    spans = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]

    if _fastcost.HAVE_NUMBA:
        nc, h, w = tdf.values.shape
        flat = tdf.values.reshape(-1)
        off_x = np.ascontiguousarray(sparse.offsets[:, 0])
        off_y = np.ascontiguousarray(sparse.offsets[:, 1])

        def run(span):
            lo, hi = span
            _fastcost.cost_kernel(
                poses[lo:hi], scales[lo:hi], sparse.cls, off_x, off_y, sparse.weights,
                flat, nc, h, w, tdf.trunc_radius,
                float(origin_px[0]), float(origin_px[1]),
                -1.0 if cap_m is None else float(cap_m), out[lo:hi],
            )

    else:

        def run(span):
            lo, hi = span
            out[lo:hi] = _cost_chunk(tdf, poses[lo:hi], scales[lo:hi], sparse, origin_px, cap_m)

    if pool is not None and len(spans) > 1:
        list(pool.map(run, spans))
    else:
        for span in spans:
            run(span)
    return out


def _cost_chunk(tdf, poses, scales, sparse, origin_px, cap_m=None):
    planes = tdf.values  # (n_classes, h, w) float32
    nc, h, w = planes.shape
    flat = planes.reshape(-1)
    trunc = tdf.trunc_radius

    cos_t = np.cos(poses[:, 2])[:, None]
    sin_t = np.sin(poses[:, 2])[:, None]
    ox, oy = sparse.offsets[:, 0][None, :], sparse.offsets[:, 1][None, :]
    s = scales[:, None]
    # world-frame meters -> map pixels, batched (P, E)
    px = (poses[:, 0][:, None] + cos_t * ox - sin_t * oy) * s + origin_px[0]
    py = (poses[:, 1][:, None] + sin_t * ox + cos_t * oy) * s + origin_px[1]

    inside = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    np.clip(px, 0, w - 1, out=px)
    np.clip(py, 0, h - 1, out=py)
    x0 = np.minimum(px.astype(np.intp), w - 2 if w > 1 else 0)
    y0 = np.minimum(py.astype(np.intp), h - 2 if h > 1 else 0)
    fx = px - x0
    fy = py - y0

    base = sparse.cls[None, :] * (h * w) + y0 * w + x0
    # upcast before arithmetic so results match query_tdf's float64 path
    v00 = flat[base].astype(np.float64)
    v01 = flat[base + (1 if w > 1 else 0)].astype(np.float64)
    v10 = flat[base + (w if h > 1 else 0)].astype(np.float64)
    v11 = flat[base + ((w + 1) if (h > 1 and w > 1) else 0)].astype(np.float64)
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    vals = np.where(inside, top + fy * (bot - top), trunc)
    if cap_m is not None:
        np.minimum(vals, (cap_m * scales)[:, None], out=vals)
    return vals @ sparse.weights
