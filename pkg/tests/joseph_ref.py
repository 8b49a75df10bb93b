"""Scalar-loop Joseph projector used as an independent reference."""

import math

import numpy as np


def joseph_reference(geom, x):
    """Ray-by-ray Joseph projector written with scalar loops."""
    side, ps = geom.side, geom.grid.pixel_size
    img = np.asarray(x, dtype=float).reshape(side, side)
    half = (side - 1) / 2
    out = np.zeros(geom.m)
    for j, th in enumerate(geom.angles):
        c, s = math.cos(th), math.sin(th)
        for k, t in enumerate(geom.detector_positions):
            total = 0.0
            for line in range(side):
                pos = (line - half) * ps
                if abs(c) >= abs(s):
                    y = -pos
                    u = ((t - y * s) / c) / ps + half
                    vals = img[line, :]
                    step = ps / abs(c)
                else:
                    xx = pos
                    u = half - ((t - xx * c) / s) / ps
                    vals = img[:, line]
                    step = ps / abs(s)
                lo = math.floor(u)
                w = u - lo
                for idx, wt in ((lo, 1 - w), (lo + 1, w)):
                    if 0 <= idx < side:
                        total += step * wt * vals[idx]
            out[j * geom.num_detectors + k] = total
    return out


def joseph_matrix_reference(geom):
    """Explicit matrix assembled column by column from the scalar-loop projector."""
    return np.stack([joseph_reference(geom, e) for e in np.eye(geom.n)], axis=1)
