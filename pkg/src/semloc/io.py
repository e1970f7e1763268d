"""Persistent formats: run config, map bundles, TDF caches, scan and
odometry streams, result logs, and trajectory files.

All binary formats are little-endian and versioned by magic + u32.  CSV
floats are written with repr() so write -> read -> write is byte-stable.
"""

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mcl import FilterConfig
from .polar import PolarGridSpec
from .semantic_map import CANONICAL_CLASSES, ClassSet, ClassTDF, SemanticMap

__all__ = [
    "ConfigError",
    "FormatError",
    "RunConfig",
    "ScanFrame",
    "OdomFrame",
    "default_config_values",
    "load_config",
    "save_config",
    "load_map_bundle",
    "save_map_bundle",
    "read_tdf_cache",
    "write_tdf_cache",
    "read_scan_stream",
    "write_scan_stream",
    "read_odometry",
    "write_odometry",
    "ResultLogWriter",
    "read_result_log",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_poses_csv",
    "read_poses_csv",
    "DEFAULT_KITTI_REMAP",
]


class ConfigError(ValueError):
    pass


class FormatError(IOError):
    pass


@dataclass
class ScanFrame:
    """One semantic scan: robot-frame points with raw labels."""

    timestamp: float
    points: np.ndarray  # (n, 3) float32, meters
    labels: np.ndarray  # (n,) uint16 raw label

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.uint16).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("point/label count mismatch")


@dataclass
class OdomFrame:
    """Frame-to-frame SE(3) motion, timestamp matching the destination scan."""

    timestamp: float
    transform: np.ndarray  # (4, 4)

    def __post_init__(self):
        self.transform = np.asarray(self.transform, dtype=np.float64).reshape(4, 4)


# ---------------------------------------------------------------------------
# run configuration


_CONFIG_DEFAULTS = {
    # paths (relative entries resolve against the config file's directory)
    "map": None,
    "scans": None,
    "scan_format": "portable",
    "odometry": None,
    "ground_truth": None,
    "output_dir": "out",
    "tdf_cache": None,
    # map scoring
    "trunc_radius": 50.0,
    "n_theta": 100,
    "n_r": 25,
    "r_max": 25.0,
    # filter
    "n_min": 300,
    "n_max": 2400,
    "sigma_p": [0.05, 0.05, 0.01],
    "sigma_s": 0.01,
    "gamma": None,
    "alpha": {name: 1.0 for name in CANONICAL_CLASSES},
    "s_min": 1.0,
    "s_max": 10.0,
    "k_s": 8,
    "k_theta": 20,
    "scale_freeze_var": 1e-4,
    "conv_cov_threshold": 25.0,
    "gmm_components": 3,
    "adapt_every": 5,
    "rng_seed": 0,
    "fixed_scale": None,
    "trunc_metric": None,
    # pipeline
    "frame_dt": 0.5,
    "keyframe_spacing_m": 1.0,
    "prior_heading_weight": 1.0,
    "class_remap": None,
}

_REQUIRED_KEYS = ("map", "scans", "odometry")


def default_config_values():
    """A fresh copy of every config key with its documented default."""
    values = dict(_CONFIG_DEFAULTS)
    values["alpha"] = dict(values["alpha"])
    return values


@dataclass
class RunConfig:
    values: dict
    base_dir: Path = field(default_factory=Path)

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def path(self, key):
        raw = self.values[key]
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def polar_spec(self):
        return PolarGridSpec(n_theta=self.n_theta, n_r=self.n_r, r_max=self.r_max)

    def class_set(self):
        return ClassSet()

    def filter_config(self, seed=None, fixed_scale=None):
        alpha = np.array([self.alpha.get(name, 1.0) for name in CANONICAL_CLASSES])
        return FilterConfig(
            n_min=self.n_min,
            n_max=self.n_max,
            sigma_p=np.asarray(self.sigma_p),
            sigma_s=self.sigma_s,
            gamma=self.gamma,
            alpha=alpha,
            s_min=self.s_min,
            s_max=self.s_max,
            k_s=self.k_s,
            k_theta=self.k_theta,
            scale_freeze_var=self.scale_freeze_var,
            conv_cov_threshold=self.conv_cov_threshold,
            gmm_components=self.gmm_components,
            adapt_every=self.adapt_every,
            rng_seed=self.rng_seed if seed is None else seed,
            fixed_scale=self.fixed_scale if fixed_scale is None else fixed_scale,
            trunc_metric=self.trunc_metric,
        )


def _validate_config(values):
    if values["s_min"] > values["s_max"]:
        raise ConfigError(f"s_min ({values['s_min']}) must not exceed s_max ({values['s_max']})")
    if values["n_min"] > values["n_max"]:
        raise ConfigError(f"n_min ({values['n_min']}) must not exceed n_max ({values['n_max']})")
    for key in ("trunc_radius", "r_max", "sigma_s", "scale_freeze_var", "conv_cov_threshold"):
        if values[key] is not None and values[key] < 0:
            raise ConfigError(f"{key} must be non-negative, got {values[key]}")
    if values["scan_format"] not in ("portable", "semantickitti"):
        raise ConfigError(f"scan_format must be 'portable' or 'semantickitti', got {values['scan_format']!r}")
    if not isinstance(values["alpha"], dict):
        raise ConfigError("alpha must be a mapping of class name to weight")


def load_config(path, check_paths=True):
    """Parse and validate a run config; unknown keys are rejected."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    unknown = set(raw) - set(_CONFIG_DEFAULTS)
    if unknown:
        raise ConfigError(f"config {path}: unknown key(s): {', '.join(sorted(unknown))}")
    values = dict(_CONFIG_DEFAULTS)
    values["alpha"] = dict(values["alpha"])
    values.update(raw)
    for key in _REQUIRED_KEYS:
        if values[key] is None:
            raise ConfigError(f"config {path}: missing required key '{key}'")
    _validate_config(values)
    cfg = RunConfig(values=values, base_dir=path.parent)
    if check_paths:
        for key in ("map", "scans", "odometry", "ground_truth"):
            p = cfg.path(key)
            if key == "ground_truth" and p is None:
                continue
            if not p.exists():
                raise ConfigError(f"config {path}: {key} path does not exist: {p}")
    return cfg


def save_config(path, config):
    values = config.values if isinstance(config, RunConfig) else dict(config)
    Path(path).write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# map bundle: 8-bit class raster (PGM P5 or PNG) + JSON sidecar


def _sidecar_path(raster_path):
    return Path(raster_path).with_suffix(".json")


def save_map_bundle(raster_path, semantic_map, class_names=CANONICAL_CLASSES):
    raster_path = Path(raster_path)
    if raster_path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(semantic_map.cells, mode="L").save(raster_path, format="PNG")
    else:
        h, w = semantic_map.cells.shape
        with open(raster_path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode())
            f.write(semantic_map.cells.tobytes())
    sidecar = {
        "scale_px_per_m": semantic_map.scale_prior,
        "class_palette": {str(i): name for i, name in enumerate(class_names)},
        "origin_px": [float(semantic_map.origin_px[0]), float(semantic_map.origin_px[1])],
    }
    _sidecar_path(raster_path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def _read_pgm(path):
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    # header tokens: P5, width, height, maxval; '#' comments allowed
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise FormatError(f"{path}: expected 8-bit PGM (maxval 255), got {maxval}")
    i += 1  # single whitespace after maxval
    pixels = np.frombuffer(data[i : i + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return pixels.reshape(h, w)


def load_map_bundle(raster_path):
    """Load raster + sidecar into a SemanticMap; returns (map, palette)."""
    raster_path = Path(raster_path)
    if not raster_path.exists():
        raise FormatError(f"map raster not found: {raster_path}")
    sidecar_file = _sidecar_path(raster_path)
    if not sidecar_file.exists():
        raise FormatError(f"map sidecar not found: {sidecar_file}")
    if raster_path.suffix.lower() == ".png":
        from PIL import Image

        cells = np.asarray(Image.open(raster_path).convert("L"), dtype=np.uint8)
    else:
        cells = _read_pgm(raster_path)
    sidecar = json.loads(sidecar_file.read_text())
    palette = {int(k): v for k, v in sidecar.get("class_palette", {}).items()}
    origin = sidecar.get("origin_px", [0.0, 0.0])
    semantic_map = SemanticMap(
        cells=cells,
        scale_prior=sidecar.get("scale_px_per_m"),
        origin_px=np.asarray(origin, dtype=np.float64),
    )
    return semantic_map, palette


# ---------------------------------------------------------------------------
# TDF cache: "CTDF", u32 version, u32 w, u32 h, u32 n_classes, f32 trunc,
# then n_classes row-major f32 planes


_TDF_MAGIC = b"CTDF"
_TDF_VERSION = 1


def write_tdf_cache(path, tdf):
    with open(path, "wb") as f:
        f.write(_TDF_MAGIC)
        f.write(struct.pack("<IIIIf", _TDF_VERSION, tdf.width, tdf.height, tdf.n_classes, tdf.trunc_radius))
        f.write(np.ascontiguousarray(tdf.values, dtype="<f4").tobytes())


def read_tdf_cache(path):
    data = Path(path).read_bytes()
    if data[:4] != _TDF_MAGIC:
        raise FormatError(f"{path}: bad magic, not a TDF cache")
    version, w, h, n_classes, trunc = struct.unpack_from("<IIIIf", data, 4)
    if version != _TDF_VERSION:
        raise FormatError(f"{path}: unsupported TDF cache version {version}")
    expected = n_classes * h * w * 4
    payload = data[24 : 24 + expected]
    if len(payload) != expected:
        raise FormatError(f"{path}: truncated TDF cache")
    values = np.frombuffer(payload, dtype="<f4").reshape(n_classes, h, w).copy()
    return ClassTDF(values=values, trunc_radius=float(np.float32(trunc)))


# ---------------------------------------------------------------------------
# portable scan stream: per frame "SSCN", u32 version, f64 timestamp,
# u32 n_points, then (f32 x, f32 y, f32 z, u16 label) records


_SCAN_MAGIC = b"SSCN"
_SCAN_VERSION = 1
_SCAN_HEADER = struct.Struct("<4sIdI")
_POINT_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("label", "<u2")])


def write_scan_stream(path, frames):
    with open(path, "wb") as f:
        for frame in frames:
            rec = np.empty(len(frame.points), dtype=_POINT_DTYPE)
            rec["x"], rec["y"], rec["z"] = frame.points[:, 0], frame.points[:, 1], frame.points[:, 2]
            rec["label"] = frame.labels
            f.write(_SCAN_HEADER.pack(_SCAN_MAGIC, _SCAN_VERSION, frame.timestamp, len(rec)))
            f.write(rec.tobytes())


def read_scan_stream(path):
    """Stream ScanFrames from a portable scan file (one frame in memory at a time)."""
    with open(path, "rb") as f:
        index = 0
        while True:
            header = f.read(_SCAN_HEADER.size)
            if not header:
                return
            if len(header) < _SCAN_HEADER.size:
                raise FormatError(f"{path}: truncated header at frame {index}")
            magic, version, timestamp, n_points = _SCAN_HEADER.unpack(header)
            if magic != _SCAN_MAGIC:
                raise FormatError(f"{path}: bad magic at frame {index}")
            if version != _SCAN_VERSION:
                raise FormatError(f"{path}: unsupported scan version {version}")
            payload = f.read(n_points * _POINT_DTYPE.itemsize)
            if len(payload) != n_points * _POINT_DTYPE.itemsize:
                raise FormatError(f"{path}: truncated frame {index}")
            rec = np.frombuffer(payload, dtype=_POINT_DTYPE)
            points = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float32)
            yield ScanFrame(timestamp=timestamp, points=points, labels=rec["label"].copy())
            index += 1


# ---------------------------------------------------------------------------
# SemanticKITTI-layout reader: velodyne/*.bin + labels/*.label


DEFAULT_KITTI_REMAP = {
    40: 0, 44: 0, 48: 0,          # road, parking, sidewalk
    49: 1, 72: 1,                 # other-ground, terrain
    70: 2, 71: 2,                 # vegetation, trunk
    50: 3,                        # building
    10: 4, 11: 4, 13: 4, 15: 4, 16: 4, 18: 4, 20: 4,  # vehicles
    252: 4, 253: 4, 254: 4, 255: 4, 256: 4, 257: 4, 258: 4, 259: 4,  # moving
}


def read_semantickitti(root, frame_dt=0.1, label_remap=None):
    """Stream ScanFrames from a SemanticKITTI sequence directory.

    Expects velodyne/NNNNNN.bin (f32 x,y,z,intensity) and
    labels/NNNNNN.label (u32; low 16 bits are the raw label).  Intensity is
    discarded; the frame index times frame_dt provides the timestamp.
    Raw kitti ids are normalized into the canonical raw label space.
    """
    root = Path(root)
    remap = DEFAULT_KITTI_REMAP if label_remap is None else label_remap
    bin_dir = root / "velodyne" if (root / "velodyne").is_dir() else root
    label_dir = root / "labels" if (root / "labels").is_dir() else root
    bin_files = sorted(bin_dir.glob("*.bin"))
    if not bin_files:
        raise FormatError(f"{root}: no .bin scan files found")
    for index, bin_file in enumerate(bin_files):
        raw = np.fromfile(bin_file, dtype="<f4")
        if raw.size % 4 != 0:
            raise FormatError(f"{bin_file}: frame {index}: point payload not divisible by 4 floats")
        pts = raw.reshape(-1, 4)[:, :3]
        label_file = label_dir / (bin_file.stem + ".label")
        if not label_file.exists():
            raise FormatError(f"{label_file}: frame {index}: missing label file")
        labels32 = np.fromfile(label_file, dtype="<u4")
        if len(labels32) != len(pts):
            raise FormatError(
                f"{label_file}: frame {index}: {len(labels32)} labels for {len(pts)} points"
            )
        kitti_ids = (labels32 & 0xFFFF).astype(np.int64)
        labels = np.full(len(kitti_ids), 5, dtype=np.uint16)  # default: other
        for kitti_id, ours in remap.items():
            labels[kitti_ids == kitti_id] = ours
        yield ScanFrame(timestamp=index * frame_dt, points=pts, labels=labels)


# ---------------------------------------------------------------------------
# odometry stream: text, one frame per line: timestamp + 12 floats (3x4)


def write_odometry(path, frames):
    with open(path, "w") as f:
        for frame in frames:
            flat = frame.transform[:3, :].reshape(-1)
            f.write(" ".join([repr(float(frame.timestamp))] + [repr(float(v)) for v in flat]) + "\n")


def read_odometry(path):
    """Stream OdomFrames; transforms re-orthonormalized or rejected."""
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 13:
                raise FormatError(f"{path}:{line_no}: expected timestamp + 12 floats, got {len(parts)} fields")
            try:
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise FormatError(f"{path}:{line_no}: {e}") from e
            m = np.array(vals[1:]).reshape(3, 4)
            rot = m[:, :3]
            err = np.linalg.norm(rot.T @ rot - np.eye(3))
            if err > 1e-3:
                raise FormatError(f"{path}:{line_no}: rotation deviates from orthonormal by {err:.2e}")
            if np.linalg.det(rot) < 0:
                raise FormatError(f"{path}:{line_no}: rotation has negative determinant")
            if err > 0:
                u, _, vt = np.linalg.svd(rot)
                rot = u @ vt
                if np.linalg.det(rot) < 0:
                    raise FormatError(f"{path}:{line_no}: rotation has negative determinant")
            transform = np.eye(4)
            transform[:3, :3] = rot
            transform[:3, 3] = m[:, 3]
            yield OdomFrame(timestamp=vals[0], transform=transform)


# ---------------------------------------------------------------------------
# result log and trajectory / pose CSVs


_RESULT_HEADER = "t,x,y,theta,scale,cov_xx,cov_xy,cov_yy,converged,err_m"


class ResultLogWriter:
    """Streaming CSV writer for per-step posterior estimates; flushes per row."""

    def __init__(self, path):
        self._f = open(path, "w")
        self._f.write(_RESULT_HEADER + "\n")
        self._f.flush()

    def write(self, t, est, err_m=None):
        cov = est.position_cov
        row = [
            repr(float(t)),
            repr(float(est.mean_pose[0])),
            repr(float(est.mean_pose[1])),
            repr(float(est.mean_pose[2])),
            repr(float(est.scale_mean)),
            repr(float(cov[0, 0])),
            repr(float(cov[0, 1])),
            repr(float(cov[1, 1])),
            str(int(est.converged)),
            "" if err_m is None else repr(float(err_m)),
        ]
        self._f.write(",".join(row) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_result_log(path):
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != _RESULT_HEADER:
            raise FormatError(f"{path}: unexpected result log header")
        for line in f:
            parts = line.rstrip("\n").split(",")
            rows.append(
                {
                    "t": float(parts[0]),
                    "x": float(parts[1]),
                    "y": float(parts[2]),
                    "theta": float(parts[3]),
                    "scale": float(parts[4]),
                    "cov_xx": float(parts[5]),
                    "cov_xy": float(parts[6]),
                    "cov_yy": float(parts[7]),
                    "converged": bool(int(parts[8])),
                    "err_m": float(parts[9]) if parts[9] != "" else None,
                }
            )
    return rows


def write_trajectory_csv(path, nodes):
    with open(path, "w") as f:
        f.write("node_id,timestamp,x_m,y_m,theta_rad\n")
        for n in nodes:
            f.write(
                f"{n.node_id},{repr(float(n.timestamp))},{repr(float(n.pose[0]))},"
                f"{repr(float(n.pose[1]))},{repr(float(n.pose[2]))}\n"
            )


def read_trajectory_csv(path):
    from .posegraph import GraphNode

    nodes = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "node_id,timestamp,x_m,y_m,theta_rad":
            raise FormatError(f"{path}: unexpected trajectory header")
        for line in f:
            parts = line.split(",")
            nodes.append(
                GraphNode(
                    node_id=int(parts[0]),
                    pose=np.array([float(parts[2]), float(parts[3]), float(parts[4])]),
                    timestamp=float(parts[1]),
                )
            )
    return nodes


def write_poses_csv(path, timestamps, poses):
    with open(path, "w") as f:
        f.write("t,x,y,theta\n")
        for t, pose in zip(timestamps, poses):
            f.write(f"{repr(float(t))},{repr(float(pose[0]))},{repr(float(pose[1]))},{repr(float(pose[2]))}\n")


def read_poses_csv(path):
    ts, poses = [], []
    with open(path) as f:
        header = f.readline().strip()
        if header != "t,x,y,theta":
            raise FormatError(f"{path}: unexpected pose CSV header")
        for line in f:
            parts = line.split(",")
            ts.append(float(parts[0]))
            poses.append([float(parts[1]), float(parts[2]), float(parts[3])])
    return np.array(ts), np.array(poses)
