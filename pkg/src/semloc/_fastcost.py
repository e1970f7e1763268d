"""Compiled inner loop for batched particle cost evaluation.

The arithmetic mirrors polar._cost_chunk exactly (same bilinear formula,
float64 throughout); only the reduction order differs from BLAS.  The
kernel releases the GIL so a thread pool over particle chunks gets real
parallelism, and per-particle sums are sequential in entry order, so the
result is independent of chunking and worker count.
"""

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def cost_kernel(poses, scales, cls, off_x, off_y, weights, flat, nc, h, w, trunc, ox, oy, cap_m, out):
        n_particles = poses.shape[0]
        n_entries = cls.shape[0]
        plane = h * w
        for p in range(n_particles):
            x = poses[p, 0]
            y = poses[p, 1]
            ct = np.cos(poses[p, 2])
            st = np.sin(poses[p, 2])
            s = scales[p]
            cap = cap_m * s if cap_m > 0.0 else trunc
            acc = 0.0
            for e in range(n_entries):
                px = (x + ct * off_x[e] - st * off_y[e]) * s + ox
                py = (y + st * off_x[e] + ct * off_y[e]) * s + oy
                if px < 0.0 or px > w - 1 or py < 0.0 or py > h - 1:
                    val = trunc
                else:
                    x0 = int(px)
                    if x0 > w - 2:
                        x0 = w - 2
                    if x0 < 0:
                        x0 = 0
                    y0 = int(py)
                    if y0 > h - 2:
                        y0 = h - 2
                    if y0 < 0:
                        y0 = 0
                    x1 = x0 + 1
                    if x1 > w - 1:
                        x1 = w - 1
                    y1 = y0 + 1
                    if y1 > h - 1:
                        y1 = h - 1
                    fx = px - x0
                    fy = py - y0
                    base = cls[e] * plane
                    v00 = np.float64(flat[base + y0 * w + x0])
                    v01 = np.float64(flat[base + y0 * w + x1])
                    v10 = np.float64(flat[base + y1 * w + x0])
                    v11 = np.float64(flat[base + y1 * w + x1])
                    top = v00 + fx * (v01 - v00)
                    bot = v10 + fx * (v11 - v10)
                    val = top + fy * (bot - top)
                if val > cap:
                    val = cap
                acc += weights[e] * val
            out[p] = acc
