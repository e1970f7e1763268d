"""semloc: semantic Monte-Carlo localization against top-down class maps.

Registers egocentric semantic point clouds to a 2D semantic map of known
or unknown-but-bounded scale via a particle filter over (pose, scale),
and georeferences an odometry chain through prior factors in an SE(2)
pose graph.  A deterministic synthetic-world simulator provides ground
truth for every algorithmic claim.
"""

from .geometry import project_se3, se2_between, se2_compose, se2_inverse, wrap_angle
from .gmm import GmmComponent, ellipse_area, fit_gmm
from .mcl import (
    FilterConfig,
    MclFilter,
    OdometryDelta,
    Particle,
    ParticleSet,
    PosteriorEstimate,
    adapt_particle_count,
    estimate,
    initialize,
    propagate,
    resample,
    weigh,
)
from .polar import PolarClassHistogram, PolarGridSpec, PolarTDFStack, rasterize_scan, render_local_tdf, rotate_histogram, score
from .posegraph import PoseGraph
from .semantic_map import ClassSet, ClassTDF, SemanticMap, build_tdf, query_tdf, sample_road_cells
from .sim import NoiseSpec, WorldSpec, generate_world, perturb_odometry, simulate_trajectory, synthesize_scan

__version__ = "0.1.0"
