"""Deterministic synthetic worlds and sensor streams for desk-scale testing.

Worlds are procedural semantic maps (roads along a graph, buildings hugging
the roads, vegetation blobs, terrain elsewhere).  Trajectories follow road
centerlines; scans sample the map along polar rays and are corrupted with
label flips, dropout and range jitter; odometry is the chained ground-truth
deltas plus per-meter Gaussian drift.  Everything is a pure function of
(spec, seed).
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import se2_between, wrap_angle
from .io import OdomFrame, ScanFrame
from .semantic_map import UNLABELLED, SemanticMap

__all__ = [
    "WorldSpec",
    "NoiseSpec",
    "World",
    "TrajectoryResult",
    "generate_world",
    "simulate_trajectory",
    "synthesize_scan",
    "perturb_odometry",
]

ROAD, TERRAIN, VEGETATION, BUILDING = 0, 1, 2, 3
LABEL_UNIVERSE = (0, 1, 2, 3, 4, 5)  # canonical classes + vehicle + other


@dataclass(frozen=True)
class WorldSpec:
    size: int = 256
    scale_true: float = 2.0  # px per meter
    road_style: str = "irregular"  # grid | radial | irregular
    building_density: float = 0.5
    tree_density: float = 0.5
    seed: int = 0
    road_width_px: float = 5.0

    def __post_init__(self):
        if self.size < 64:
            raise ValueError("world size must be >= 64 cells")
        if not (1.0 <= self.scale_true <= 10.0):
            raise ValueError("scale_true must lie in [1, 10] px/m")
        if self.road_style not in ("grid", "radial", "irregular"):
            raise ValueError(f"unknown road style {self.road_style!r}")
        for name in ("building_density", "tree_density"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class NoiseSpec:
    label_flip_prob: float = 0.0
    point_dropout_prob: float = 0.0
    odom_noise: tuple = (0.0, 0.0, 0.0)  # per-meter std on (dx, dy, dtheta)
    range_jitter_std: float = 0.0  # meters

    def __post_init__(self):
        for name in ("label_flip_prob", "point_dropout_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class World:
    map: SemanticMap
    roads: list  # centerline polylines, each (k, 2) px
    spec: WorldSpec
    node_pts: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    edges: list = field(default_factory=list)  # (node_a, node_b, polyline px)


@dataclass
class TrajectoryResult:
    poses: np.ndarray  # (n, 3) meters, map frame
    truncated: bool = False


# ---------------------------------------------------------------------------
# world generation


def _grid_layout(n, margin, rng):
    xs = np.linspace(margin, n - margin, 4)
    ys = np.linspace(margin, n - margin, 4)
    nodes = np.array([[x, y] for y in ys for x in xs], dtype=np.float64)
    edges = []
    for r in range(4):
        for c in range(4):
            i = r * 4 + c
            if c + 1 < 4:
                edges.append((i, i + 1))
            if r + 1 < 4:
                edges.append((i, i + 4))
    return nodes, edges


def _radial_layout(n, margin, rng):
    center = np.array([n / 2.0, n / 2.0])
    k = int(rng.integers(6, 9))
    radius = (n / 2.0 - margin) * 0.85
    angles = np.linspace(0, 2 * np.pi, k, endpoint=False) + rng.uniform(0, 2 * np.pi / k)
    ring = center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    nodes = np.vstack([center[None, :], ring])
    edges = [(0, i + 1) for i in range(k)]
    edges += [(i + 1, (i + 1) % k + 1) for i in range(k)]
    return nodes, edges


def _irregular_layout(n, margin, rng):
    target = int(rng.integers(10, 15))
    pts = []
    min_sep = (n - 2 * margin) / 4.2
    for _ in range(400):
        cand = rng.uniform(margin, n - margin, size=2)
        if all(np.hypot(*(cand - p)) >= min_sep for p in pts):
            pts.append(cand)
            if len(pts) == target:
                break
    nodes = np.array(pts)
    m = len(nodes)
    # minimum spanning tree keeps the graph connected
    dist = np.hypot(*(nodes[:, None, :] - nodes[None, :, :]).transpose(2, 0, 1))
    in_tree = [0]
    edges = []
    remaining = set(range(1, m))
    while remaining:
        best = None
        for a in in_tree:
            for b in remaining:
                if best is None or dist[a, b] < dist[best[0], best[1]]:
                    best = (a, b)
        edges.append(best)
        in_tree.append(best[1])
        remaining.discard(best[1])
    # a few shortcut edges create loops
    extra = 0
    order = np.argsort(dist.ravel())
    for flat in order:
        a, b = divmod(int(flat), m)
        if a >= b or (a, b) in edges or (b, a) in edges:
            continue
        if dist[a, b] > 2.2 * min_sep:
            break
        edges.append((a, b))
        extra += 1
        if extra >= 3:
            break
    return nodes, edges


def _edge_polyline(a_pt, b_pt, style, rng):
    if style != "irregular":
        return np.vstack([a_pt, b_pt])
    # subdivide with perpendicular jitter for curvy roads
    length = np.hypot(*(b_pt - a_pt))
    n_seg = max(2, int(length / 28.0))
    ts = np.linspace(0.0, 1.0, n_seg + 1)
    base = a_pt[None, :] + ts[:, None] * (b_pt - a_pt)[None, :]
    direction = (b_pt - a_pt) / max(length, 1e-9)
    normal = np.array([-direction[1], direction[0]])
    amp = min(length / 10.0, 9.0)
    jitter = rng.uniform(-amp, amp, size=len(ts))
    jitter[0] = jitter[-1] = 0.0
    return base + jitter[:, None] * normal[None, :]


def _paint_polyline(cells, polyline, width, value, only_on=None):
    radius = max(width / 2.0, 0.5)
    r_int = int(np.ceil(radius))
    dy, dx = np.mgrid[-r_int : r_int + 1, -r_int : r_int + 1]
    disk = np.stack([dx[dx**2 + dy**2 <= radius**2], dy[dx**2 + dy**2 <= radius**2]], axis=1)
    n = cells.shape[0]
    for i in range(len(polyline) - 1):
        a, b = polyline[i], polyline[i + 1]
        steps = max(2, int(np.hypot(*(b - a)) / 0.5) + 1)
        line = a[None, :] + np.linspace(0, 1, steps)[:, None] * (b - a)[None, :]
        pts = (np.round(line[:, None, :] + disk[None, :, :]).astype(int)).reshape(-1, 2)
        np.clip(pts, 0, n - 1, out=pts)
        if only_on is None:
            cells[pts[:, 1], pts[:, 0]] = value
        else:
            sel = cells[pts[:, 1], pts[:, 0]] == only_on
            cells[pts[sel, 1], pts[sel, 0]] = value


def _stamp_rect(cells, center, tangent, half_len, half_depth, value):
    """Fill a rotated rectangle, skipping road cells (roads win)."""
    n = cells.shape[0]
    normal = np.array([-tangent[1], tangent[0]])
    extent = int(np.ceil(np.hypot(half_len, half_depth))) + 1
    cx, cy = int(round(center[0])), int(round(center[1]))
    x0, x1 = max(cx - extent, 0), min(cx + extent + 1, n)
    y0, y1 = max(cy - extent, 0), min(cy + extent + 1, n)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    rel_x = xx - center[0]
    rel_y = yy - center[1]
    along = rel_x * tangent[0] + rel_y * tangent[1]
    across = rel_x * normal[0] + rel_y * normal[1]
    inside = (np.abs(along) <= half_len) & (np.abs(across) <= half_depth)
    patch = cells[y0:y1, x0:x1]
    inside &= patch != ROAD
    patch[inside] = value


def _place_buildings(cells, edges, widths, density, rng):
    spacing = 20.0
    for (_, _, polyline), width in zip(edges, widths):
        seg_vecs = np.diff(polyline, axis=0)
        seg_lens = np.hypot(seg_vecs[:, 0], seg_vecs[:, 1])
        total = seg_lens.sum()
        n_sites = int(total / spacing)
        # streets differ: some lined with buildings, some bare
        edge_density = min(1.0, density * rng.uniform(0.2, 1.8))
        for _ in range(n_sites):
            s = rng.uniform(0.1, 0.9) * total
            seg = int(np.searchsorted(np.cumsum(seg_lens), s))
            seg = min(seg, len(seg_vecs) - 1)
            t = (s - np.concatenate([[0], np.cumsum(seg_lens)])[seg]) / max(seg_lens[seg], 1e-9)
            base = polyline[seg] + t * seg_vecs[seg]
            tangent = seg_vecs[seg] / max(seg_lens[seg], 1e-9)
            normal = np.array([-tangent[1], tangent[0]])
            for side in (-1.0, 1.0):
                if rng.random() >= edge_density:
                    continue
                half_len = rng.uniform(3.0, 14.0)
                half_depth = rng.uniform(3.0, 10.0)
                gap = rng.uniform(1.5, 4.0)
                center = base + side * normal * (width / 2.0 + gap + half_depth)
                _stamp_rect(cells, center, tangent, half_len, half_depth, BUILDING)


def _paint_disk(cells, cx, cy, radius, value, only=TERRAIN):
    n = cells.shape[0]
    r_int = int(np.ceil(radius))
    x0, x1 = max(int(cx) - r_int, 0), min(int(cx) + r_int + 1, n)
    y0, y1 = max(int(cy) - r_int, 0), min(int(cy) + r_int + 1, n)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    patch = cells[y0:y1, x0:x1]
    patch[inside & (patch == only)] = value


def _place_vegetation(cells, density, rng):
    n = cells.shape[0]
    # a few large wooded regions give low-frequency structure ...
    for _ in range(int(density * (n / 64.0) ** 2 * 0.7)):
        cx, cy = rng.uniform(0, n, size=2)
        radius = rng.uniform(9.0, 26.0)
        _paint_disk(cells, cx, cy, radius, VEGETATION)
    # ... plus scattered single trees and small clumps
    for _ in range(int(density * (n * n) / 3000.0)):
        cx, cy = rng.uniform(0, n, size=2)
        _paint_disk(cells, cx, cy, rng.uniform(1.5, 5.0), VEGETATION)


def generate_world(spec):
    """Procedural semantic map plus its road centerline polylines."""
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    margin = max(12, n // 10)
    layout = {"grid": _grid_layout, "radial": _radial_layout, "irregular": _irregular_layout}
    nodes, edge_ids = layout[spec.road_style](n, margin, rng)
    edges = [(a, b, _edge_polyline(nodes[a], nodes[b], spec.road_style, rng)) for a, b in edge_ids]
    # streets of different calibers are a localization cue in themselves
    widths = spec.road_width_px * rng.uniform(0.7, 1.6, size=len(edges))

    for attempt in range(4):
        cells = np.full((n, n), TERRAIN, dtype=np.uint8)
        for (_, _, polyline), width in zip(edges, widths):
            _paint_polyline(cells, polyline, width, ROAD)
        if (cells == ROAD).mean() >= 0.05:
            break
        widths = widths + 2.0
    road_cells = cells.copy()

    _place_buildings(cells, edges, widths, spec.building_density, rng)
    _place_vegetation(cells, spec.tree_density, rng)
    cells[road_cells == ROAD] = ROAD  # roads always win

    semantic_map = SemanticMap(cells=cells, scale_prior=spec.scale_true)
    return World(
        map=semantic_map,
        roads=[polyline for _, _, polyline in edges],
        spec=spec,
        node_pts=nodes,
        edges=edges,
    )


# ---------------------------------------------------------------------------
# trajectory simulation


def _round_corner(prev_pt, corner, next_pt, cut, samples=7):
    """Quadratic Bezier replacing a polyline corner, cut meters each side."""
    v_in = corner - prev_pt
    v_out = next_pt - corner
    l_in = np.hypot(*v_in)
    l_out = np.hypot(*v_out)
    c = min(cut, 0.45 * l_in, 0.45 * l_out)
    if c <= 1e-6:
        return corner[None, :]
    p0 = corner - v_in / l_in * c
    p2 = corner + v_out / l_out * c
    ts = np.linspace(0.0, 1.0, samples)[:, None]
    return (1 - ts) ** 2 * p0 + 2 * ts * (1 - ts) * corner + ts**2 * p2


def simulate_trajectory(world, length_m, seed):
    """Random road-following walk resampled at 0.5 m with rounded corners.

    Revisits are allowed, so the requested length is reachable on any
    connected road graph; the truncated flag is set only when the walk hits
    a node with no outgoing edge.
    """
    rng = np.random.default_rng(seed)
    s = world.spec.scale_true
    adjacency = {}
    for idx, (a, b, _) in enumerate(world.edges):
        adjacency.setdefault(a, []).append((b, idx, False))
        adjacency.setdefault(b, []).append((a, idx, True))

    start = int(rng.choice(sorted(adjacency.keys())))
    path_px = [world.node_pts[start]]
    node, prev_edge = start, None
    walked_px = 0.0
    target_px = (length_m + 6.0) * s
    truncated = False
    while walked_px < target_px:
        options = adjacency.get(node, [])
        if not options:
            truncated = True
            break
        fresh = [o for o in options if o[1] != prev_edge]
        pick = fresh[rng.integers(len(fresh))] if fresh else options[rng.integers(len(options))]
        nxt, edge_idx, reverse = pick
        polyline = world.edges[edge_idx][2]
        if reverse:
            polyline = polyline[::-1]
        seg = polyline[1:]
        path_px.extend(seg)
        walked_px += np.hypot(*np.diff(polyline, axis=0).T).sum()
        node, prev_edge = nxt, edge_idx

    path_m = np.array(path_px) / s
    # round interior corners; the cut radius stays inside even the narrowest
    # road variant (0.7x nominal width)
    halfwidth_m = (0.35 * world.spec.road_width_px) / s
    cut = min(2.0, 1.6 * halfwidth_m)
    smooth = [path_m[0]]
    for i in range(1, len(path_m) - 1):
        smooth.append(_round_corner(path_m[i - 1], path_m[i], path_m[i + 1], cut))
    smooth.append(path_m[-1])
    path_m = np.vstack([np.atleast_2d(p) for p in smooth])

    deltas = np.diff(path_m, axis=0)
    seg_len = np.hypot(deltas[:, 0], deltas[:, 1])
    keep = seg_len > 1e-9
    path_m = np.vstack([path_m[0], path_m[1:][keep]])
    seg_len = seg_len[keep]
    arc = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = length_m
    if arc[-1] < length_m:
        truncated = True
        total = arc[-1]
    stations = np.arange(0.0, total + 1e-9, 0.5)
    xs = np.interp(stations, arc, path_m[:, 0])
    ys = np.interp(stations, arc, path_m[:, 1])
    headings = np.arctan2(np.diff(ys, append=ys[-1]), np.diff(xs, append=xs[-1]))
    if len(headings) > 1:
        headings[-1] = headings[-2]
    poses = np.column_stack([xs, ys, headings])
    return TrajectoryResult(poses=poses, truncated=truncated)


# ---------------------------------------------------------------------------
# sensors


def synthesize_scan(world, pose, spec, noise, rng, timestamp=0.0):
    """Sample the map along polar rays from a ground-truth pose.

    One candidate point per (angular bin, radial bin) center; each point is
    labelled by the map cell under its true world position, then labels are
    flipped, points dropped, and ranges jittered per the noise spec.  The z
    coordinate is drawn N(0, 0.5 m) to exercise ground-plane projection.
    """
    s = world.spec.scale_true
    cells = world.map.cells
    n = cells.shape[0]
    centers = spec.bin_centers().reshape(-1, 2)  # robot frame, meters
    c, sn = np.cos(pose[2]), np.sin(pose[2])
    wx = pose[0] + c * centers[:, 0] - sn * centers[:, 1]
    wy = pose[1] + sn * centers[:, 0] + c * centers[:, 1]
    px = np.round(wx * s + world.map.origin_px[0]).astype(int)
    py = np.round(wy * s + world.map.origin_px[1]).astype(int)
    valid = (px >= 0) & (px < n) & (py >= 0) & (py < n)
    labels = np.zeros(len(centers), dtype=np.int64)
    labels[valid] = cells[py[valid], px[valid]]
    valid &= labels != UNLABELLED  # unlabelled cells yield no return

    ranges = np.hypot(centers[:, 0], centers[:, 1])[valid]
    angles = np.arctan2(centers[:, 1], centers[:, 0])[valid]
    labels = labels[valid]
    m = len(labels)

    # corruption draws happen in a fixed order for determinism
    flip = rng.random(m) < noise.label_flip_prob
    universe = np.array(LABEL_UNIVERSE)
    pick = rng.integers(0, len(universe) - 1, size=m)
    if flip.any():
        cur_idx = np.searchsorted(universe, labels)
        alt = pick + (pick >= cur_idx)
        labels = np.where(flip, universe[alt], labels)
    keep = rng.random(m) >= noise.point_dropout_prob
    jitter = rng.normal(0.0, noise.range_jitter_std, size=m) if noise.range_jitter_std > 0 else np.zeros(m)
    zs = rng.normal(0.0, 0.5, size=m)

    ranges = np.maximum(ranges + jitter, 0.0)[keep]
    angles = angles[keep]
    points = np.column_stack([ranges * np.cos(angles), ranges * np.sin(angles), zs[keep]])
    return ScanFrame(timestamp=timestamp, points=points.astype(np.float32), labels=labels[keep].astype(np.uint16))


def perturb_odometry(gt_poses, noise, rng, timestamps=None):
    """Frame-to-frame SE(3) deltas with per-meter Gaussian drift.

    Returns n-1 OdomFrames for n poses; frame i carries the motion from
    pose i to pose i+1 and the timestamp of the destination frame.
    """
    gt_poses = np.asarray(gt_poses, dtype=np.float64)
    if len(gt_poses) < 2:
        raise ValueError("need at least two poses")
    stds = np.asarray(noise.odom_noise, dtype=np.float64)
    frames = []
    for i in range(1, len(gt_poses)):
        delta = se2_between(gt_poses[i - 1], gt_poses[i])
        step = float(np.hypot(delta[0], delta[1]))
        eps = rng.standard_normal(3) * stds * np.sqrt(max(step, 0.0))
        noisy = np.array([delta[0] + eps[0], delta[1] + eps[1], wrap_angle(delta[2] + eps[2])])
        t4 = np.eye(4)
        cd, sd = np.cos(noisy[2]), np.sin(noisy[2])
        t4[0, 0], t4[0, 1], t4[1, 0], t4[1, 1] = cd, -sd, sd, cd
        t4[0, 3], t4[1, 3] = noisy[0], noisy[1]
        ts = float(timestamps[i]) if timestamps is not None else float(i)
        frames.append(OdomFrame(timestamp=ts, transform=t4))
    return frames
