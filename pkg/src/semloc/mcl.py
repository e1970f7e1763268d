"""Particle filter over joint (SE(2) pose, map scale) state.

The filter propagates particles with planar odometry plus Gaussian noise
(scale noise lives in log-space and anneals with distance travelled),
weighs them through the polar registration cost, resamples systematically
when the effective sample size halves, and adapts the particle count from
the covariance-ellipse area of a GMM fit to the cloud.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gmm
from .geometry import project_se3, se2_compose, wrap_angle
from .polar import cost_of_poses, rasterize_scan, rotate_histogram
from .semantic_map import sample_road_cells

__all__ = [
    "FilterConfig",
    "OdometryDelta",
    "Particle",
    "ParticleSet",
    "PosteriorEstimate",
    "MclFilter",
    "propagate",
    "weigh",
    "weights_from_costs",
    "effective_sample_size",
    "resample",
    "initialize",
    "adapt_particle_count",
    "estimate",
]

COST_EPS = 1e-6  # guards the inverse-cost weight at a perfect match


def _default_sigma_p():
    return np.diag([0.05**2, 0.05**2, 0.01**2])


def _default_alpha():
    return np.ones(4)


@dataclass
class FilterConfig:
    """Tuning constants of the localization filter.

    sigma_p is the per-step process covariance over (x, y, theta); sigma_s
    is the log-space scale variance at one meter travelled, decayed by the
    inverse of distance from start.  gamma=None selects 0.1/N at weighing
    time.  fixed_scale pins every particle's scale and freezes it from
    initialization.
    """

    n_min: int = 300
    n_max: int = 2400
    sigma_p: np.ndarray = field(default_factory=_default_sigma_p)
    sigma_s: float = 0.01
    gamma: float | None = None
    alpha: np.ndarray = field(default_factory=_default_alpha)
    s_min: float = 1.0
    s_max: float = 10.0
    k_s: int = 8
    k_theta: int = 20
    scale_freeze_var: float = 1e-4
    conv_cov_threshold: float = 25.0  # px^2, on trace(cov) * scale_mean^2
    gmm_components: int = 3
    adapt_every: int = 5
    rng_seed: int = 0
    fixed_scale: float | None = None
    trunc_metric: float | None = None  # meters; metric cap on per-bin cost in weigh

    def __post_init__(self):
        self.sigma_p = np.asarray(self.sigma_p, dtype=np.float64)
        if self.sigma_p.shape == (3,):
            self.sigma_p = np.diag(self.sigma_p**2)
        if self.sigma_p.shape != (3, 3):
            raise ValueError("sigma_p must be a 3x3 covariance or 3 stds")
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.fixed_scale is not None:
            self.s_min = self.s_max = float(self.fixed_scale)
            self.k_s = 1
        if self.s_min > self.s_max:
            raise ValueError(f"s_min ({self.s_min}) must not exceed s_max ({self.s_max})")
        if self.n_min > self.n_max:
            raise ValueError(f"n_min ({self.n_min}) must not exceed n_max ({self.n_max})")
        if self.sigma_s < 0 or self.scale_freeze_var <= 0 or self.conv_cov_threshold <= 0:
            raise ValueError("variances and thresholds must be positive")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    def effective_gamma(self, n_particles):
        if self.gamma is not None:
            return self.gamma
        return 0.1 / max(1, n_particles)


@dataclass(frozen=True)
class OdometryDelta:
    """Rigid frame-to-frame motion in 3D, projected onto the plane on use."""

    transform: np.ndarray  # 4x4 homogeneous

    def __post_init__(self):
        t = np.asarray(self.transform, dtype=np.float64)
        if t.shape != (4, 4):
            raise ValueError("odometry delta must be a 4x4 transform")
        object.__setattr__(self, "transform", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(4))


@dataclass(frozen=True)
class Particle:
    pose: np.ndarray  # (x, y, theta) meters/radians in map frame
    scale: float  # px per meter
    log_weight: float


class ParticleSet:
    """Column-major particle storage: poses (N,3), scales (N,), weights (N,)."""

    def __init__(self, poses, scales, weights):
        self.poses = np.asarray(poses, dtype=np.float64).reshape(-1, 3)
        self.scales = np.asarray(scales, dtype=np.float64).reshape(-1)
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if not (len(self.poses) == len(self.scales) == len(self.weights)):
            raise ValueError("particle arrays must share one length")

    def __len__(self):
        return len(self.scales)

    def __getitem__(self, i):
        return Particle(
            pose=self.poses[i].copy(),
            scale=float(self.scales[i]),
            log_weight=float(np.log(self.weights[i])) if self.weights[i] > 0 else -np.inf,
        )

    @classmethod
    def uniform(cls, poses, scales):
        n = len(poses)
        return cls(poses, scales, np.full(n, 1.0 / n))


@dataclass
class PosteriorEstimate:
    mean_pose: np.ndarray  # (3,)
    position_cov: np.ndarray  # (2, 2) m^2
    heading_var: float
    scale_mean: float
    scale_var: float  # variance of log(scale)
    converged: bool
    n_particles: int


def propagate(particles, u, dist_from_start, cfg, rng, frozen=False):
    """Motion update: compose each pose with the noisy planar projection of u.

    Scale receives multiplicative log-normal noise whose variance decays
    with the inverse of the distance travelled since the start; a frozen
    scale is passed through untouched.
    """
    delta = project_se3(getattr(u, "transform", u))
    n = len(particles)
    chol = np.linalg.cholesky(cfg.sigma_p) if np.any(cfg.sigma_p) else np.zeros((3, 3))
    noise = rng.standard_normal((n, 3)) @ chol.T
    poses = se2_compose(particles.poses, delta[None, :] + noise)

    if frozen:
        scales = particles.scales.copy()
    else:
        var_eff = cfg.sigma_s / max(1.0, dist_from_start)
        scales = particles.scales * np.exp(rng.standard_normal(n) * np.sqrt(var_eff))
        np.clip(scales, cfg.s_min, cfg.s_max, out=scales)
    return ParticleSet(poses, scales, particles.weights.copy())


def weights_from_costs(costs, n_points, gamma):
    """Inverse-cost particle weights, normalized to sum to one.

    w_i = n / max(C_i, eps) + gamma.  With an empty scan (n = 0) every
    particle gets gamma, i.e. the measurement is uninformative.
    """
    costs = np.asarray(costs, dtype=np.float64)
    raw = n_points / np.maximum(costs, COST_EPS) + gamma
    total = raw.sum()
    if total <= 0:  # n = 0 with gamma = 0: no information at all
        return np.full(len(costs), 1.0 / len(costs))
    return raw / total


def weigh(particles, hist, tdf, cfg, origin_px=(0.0, 0.0), pool=None):
    """Measurement update via the polar registration cost.

    The per-measurement likelihood (n/C + gamma, normalized) multiplies the
    incoming weights, which stay uniform between resamples only right after
    one; evidence therefore accumulates across steps until the effective
    sample size halves and resampling folds it into the population.

    The polar score is native pixels; here it is divided by the particle's
    own scale so C is metric.  Pixel-unit costs grow linearly with the
    scale hypothesis and an inverse-cost weight would drive the joint
    posterior toward s_min regardless of structure.
    """
    costs = cost_of_poses(
        tdf, particles.poses, particles.scales, hist, cfg.alpha,
        origin_px=origin_px, pool=pool, cap_m=cfg.trunc_metric,
    )
    gamma = cfg.effective_gamma(len(particles))
    likelihood = weights_from_costs(costs / particles.scales, hist.total_points, gamma)
    posterior = particles.weights * likelihood
    total = posterior.sum()
    if total <= 0:
        posterior = np.full(len(particles), 1.0 / len(particles))
    else:
        posterior = posterior / total
    return ParticleSet(particles.poses.copy(), particles.scales.copy(), posterior)


def effective_sample_size(weights):
    return 1.0 / float(np.sum(np.square(weights)))


def resample(particles, cfg, rng, n_out=None, force=False):
    """Systematic (low-variance) resampling, triggered at N_eff < N/2.

    Returns (particles, resampled).  When the trigger does not fire the
    input set is returned unchanged.  Output weights are uniform.
    """
    n = len(particles)
    if not force and effective_sample_size(particles.weights) >= n / 2.0:
        return particles, False
    n_out = n if n_out is None else int(n_out)
    positions = (rng.random() + np.arange(n_out)) / n_out
    cumulative = np.cumsum(particles.weights)
    cumulative[-1] = 1.0  # seal rounding
    idx = np.searchsorted(cumulative, positions, side="right")
    idx = np.minimum(idx, n - 1)
    return (
        ParticleSet(
            particles.poses[idx],
            particles.scales[idx],
            np.full(n_out, 1.0 / n_out),
        ),
        True,
    )


def _orientation_shifts(n_theta, k_theta):
    """k_theta headings evenly spaced over the circle, snapped to whole bins."""
    shifts = np.round(np.arange(k_theta) * n_theta / k_theta).astype(int) % n_theta
    return np.unique(shifts)


def initialize(semantic_map, tdf, hist, cfg, rng, origin_px=(0.0, 0.0), pool=None):
    """Road-prior initialization with scale sweep and rotation search.

    Samples n_max // k_s road cells; each cell spawns k_s particles of
    evenly spaced scale.  For every (cell, scale) the k_theta bin-aligned
    headings are scored by shifting the scan histogram (scoring the shifted
    histogram at heading zero is exactly scoring the original scan at
    heading shift*d_theta) and only the cheapest heading survives.  Weights
    start uniform.
    """
    n_init = max(1, cfg.n_max // cfg.k_s)
    cells = sample_road_cells(semantic_map, n_init, rng)
    scales = np.linspace(cfg.s_min, cfg.s_max, cfg.k_s) if cfg.k_s > 1 else np.array([cfg.s_min])
    spec = hist.spec
    shifts = _orientation_shifts(spec.n_theta, cfg.k_theta)

    candidates = np.zeros((cfg.k_s * n_init, 3))
    cand_scales = np.repeat(scales, n_init)
    for j, s in enumerate(scales):
        candidates[j * n_init : (j + 1) * n_init, :2] = (cells - np.asarray(origin_px)) / s

    costs = np.empty((len(shifts), len(candidates)))
    for idx, k in enumerate(shifts):
        rotated = rotate_histogram(hist, int(k))
        costs[idx] = cost_of_poses(
            tdf, candidates, cand_scales, rotated, cfg.alpha, origin_px=origin_px, pool=pool
        )
    best = np.argmin(costs, axis=0)
    candidates[:, 2] = wrap_angle(shifts[best] * spec.d_theta)
    return ParticleSet.uniform(candidates, cand_scales)


def adapt_particle_count(components, cfg, area_init):
    """Particle budget proportional to the GMM covariance-ellipse area."""
    if not components:
        raise ValueError("need at least one mixture component")
    area = gmm.ellipse_area(components)
    if area_init <= 0:
        return cfg.n_min
    n = int(round(cfg.n_max * area / area_init))
    return int(np.clip(n, cfg.n_min, cfg.n_max))


def estimate(particles, cfg):
    """Weighted posterior summary; heading uses the circular mean.

    Convergence is detected on the position covariance expressed in map
    pixels (trace(cov) * scale_mean^2 < threshold): a meter-unit threshold
    cannot serve the whole scale prior range, since the precision needed
    for anchoring is constant in map cells while metric precision varies
    with the (unknown) scale.
    """
    w = particles.weights
    x = float(w @ particles.poses[:, 0])
    y = float(w @ particles.poses[:, 1])
    sin_m = float(w @ np.sin(particles.poses[:, 2]))
    cos_m = float(w @ np.cos(particles.poses[:, 2]))
    heading = float(np.arctan2(sin_m, cos_m))
    dxy = particles.poses[:, :2] - (x, y)
    cov = (w[:, None] * dxy).T @ dxy
    dth = wrap_angle(particles.poses[:, 2] - heading)
    heading_var = float(w @ dth**2)
    scale_mean = float(w @ particles.scales)
    log_s = np.log(particles.scales)
    scale_var = float(w @ (log_s - w @ log_s) ** 2)
    return PosteriorEstimate(
        mean_pose=np.array([x, y, heading]),
        position_cov=cov,
        heading_var=heading_var,
        scale_mean=scale_mean,
        scale_var=scale_var,
        converged=bool(np.trace(cov) * scale_mean**2 < cfg.conv_cov_threshold),
        n_particles=len(particles),
    )


class MclFilter:
    """Sequential estimator tying the pieces together.

    Owns the particle set and the RNG; steps are strictly sequential.  The
    per-particle cost evaluation inside weigh/initialize may fan out over a
    thread pool; results are identical for any worker count.
    """

    def __init__(self, semantic_map, tdf, classes, spec, cfg, threads=1):
        self.map = semantic_map
        self.tdf = tdf
        self.classes = classes
        self.spec = spec
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        self.particles = None
        self.dist_from_start = 0.0
        self.frozen = cfg.fixed_scale is not None
        self.area_init = None
        self.target_n = cfg.n_max
        self.step_idx = 0

    @property
    def initialized(self):
        return self.particles is not None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown(wait=False)
            self.pool = None

    def initialize(self, scan):
        hist = rasterize_scan(scan, self.spec, self.classes)
        self.particles = initialize(
            self.map, self.tdf, hist, self.cfg, self.rng, origin_px=self.map.origin_px, pool=self.pool
        )
        if self.cfg.fixed_scale is not None:
            self.particles.scales[:] = self.cfg.fixed_scale
        comps = gmm.fit_gmm(self.particles.poses[:, :2], self.cfg.gmm_components, self.rng)
        self.area_init = gmm.ellipse_area(comps)
        self.target_n = self.cfg.n_max
        return estimate(self.particles, self.cfg)

    def seed_at(self, pose, scale, n):
        """Plant n identical particles (testing/benchmark hook)."""
        poses = np.tile(np.asarray(pose, dtype=np.float64), (n, 1))
        self.particles = ParticleSet.uniform(poses, np.full(n, float(scale)))
        self.area_init = 1.0

    def step(self, u, scan=None):
        """One filter cycle: propagate, weigh, estimate, freeze, resample, adapt."""
        if not self.initialized:
            raise RuntimeError("filter must be initialized with a first scan")
        delta = project_se3(getattr(u, "transform", u))
        self.dist_from_start += float(np.hypot(delta[0], delta[1]))
        self.particles = propagate(
            self.particles, u, self.dist_from_start, self.cfg, self.rng, frozen=self.frozen
        )
        if scan is not None:
            hist = rasterize_scan(scan, self.spec, self.classes)
            self.particles = weigh(
                self.particles, hist, self.tdf, self.cfg, origin_px=self.map.origin_px, pool=self.pool
            )
        est = estimate(self.particles, self.cfg)
        if not self.frozen and est.scale_var < self.cfg.scale_freeze_var:
            self.frozen = True
            self.particles.scales[:] = est.scale_mean
        if scan is not None:
            self.step_idx += 1
            if self.step_idx % self.cfg.adapt_every == 0 and len(self.particles) >= self.cfg.gmm_components:
                comps = gmm.fit_gmm(self.particles.poses[:, :2], self.cfg.gmm_components, self.rng)
                self.target_n = adapt_particle_count(comps, self.cfg, self.area_init)
            self.particles, _ = resample(self.particles, self.cfg, self.rng, n_out=self.target_n)
        return est
