"""Parallel-beam Radon transform, adjoint, FBP and the Gaussian measurement model.

The forward projector uses Joseph's method: each ray is marched along its
dominant image axis and the image is linearly interpolated along the other
axis. The projector is assembled once per geometry as a sparse matrix, so the
adjoint is its exact transpose.

Images are flat row-major vectors of length ``side**2``. Row 0 is the top of
the image. Sinograms are flat projection-major vectors of length ``p * d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateCalibrationError, InvalidArgumentError

__all__ = [
    "ImageGrid",
    "RadonGeometry",
    "Sinogram",
    "NoiseModel",
    "DenseOperator",
    "default_detector_count",
    "make_geometry",
    "radon_forward",
    "radon_adjoint",
    "fbp",
    "simulate_measurement",
    "simulate_measurements",
    "calibrate_sigma_y",
]


@dataclass(frozen=True)
class ImageGrid:
    side: int
    pixel_size: float = 1.0

    def __post_init__(self):
        if int(self.side) != self.side or self.side < 2:
            raise InvalidArgumentError(f"grid side must be an integer >= 2, got {self.side}")
        if not self.pixel_size > 0:
            raise InvalidArgumentError(f"pixel_size must be > 0, got {self.pixel_size}")

    @property
    def n(self) -> int:
        return self.side * self.side

    @property
    def shape(self) -> tuple[int, int]:
        return (self.side, self.side)


def default_detector_count(side: int) -> int:
    """Smallest detector count whose unit-ish spacing covers the grid diagonal."""
    return math.ceil(side * math.sqrt(2)) + 1


class _OperatorMixin:
    """Batch-friendly helpers shared by the Radon and dense operators.

    Subclasses provide ``matrix`` (sparse or dense, shape ``(m, n)``).
    """

    def _check_image(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            if x.ndim >= 2 and x.shape[-2:] == (getattr(self, "side", -1),) * 2:
                x = x.reshape(*x.shape[:-2], self.n)
            else:
                raise InvalidArgumentError(
                    f"image has trailing dimension {x.shape[-1]}, operator expects n={self.n}"
                )
        return x

    def _check_sino(self, s):
        s = np.asarray(s, dtype=float)
        if s.shape[-1] != self.m:
            raise InvalidArgumentError(
                f"sinogram has trailing dimension {s.shape[-1]}, operator expects m={self.m}"
            )
        return s

    def forward(self, x):
        """Apply H to one image ``(n,)`` or a batch ``(B, n)``."""
        x = self._check_image(x)
        flat = x.reshape(-1, self.n)
        return np.asarray(self.matrix @ flat.T).T.reshape(*x.shape[:-1], self.m)

    def adjoint(self, s):
        """Apply H^T to one sinogram ``(m,)`` or a batch ``(B, m)``."""
        s = self._check_sino(s)
        flat = s.reshape(-1, self.m)
        return np.asarray(self.matrix_t @ flat.T).T.reshape(*s.shape[:-1], self.n)

    @cached_property
    def dense(self) -> np.ndarray:
        m = self.matrix
        return m.toarray() if sp.issparse(m) else np.array(m, dtype=float)

    @cached_property
    def _pinv(self) -> np.ndarray:
        return np.linalg.pinv(self.dense)

    def pinv(self, s):
        """Moore-Penrose pseudo-inverse applied to sinograms (dense, small problems only)."""
        s = self._check_sino(s)
        return s @ self._pinv.T

    @cached_property
    def gram_spectrum(self) -> tuple[np.ndarray, np.ndarray]:
        """Thin eigendecomposition ``H H^T = U diag(lam) U^T`` restricted to lam > 0.

        Computed through whichever of ``H H^T`` and ``H^T H`` is smaller.
        """
        h = self.dense
        m, n = h.shape
        if m <= n:
            lam, u = np.linalg.eigh(h @ h.T)
        else:
            lam, v = np.linalg.eigh(h.T @ h)
        tol = max(lam.max(initial=0.0), 0.0) * 1e-12
        keep = lam > tol
        lam = lam[keep]
        if m <= n:
            u = u[:, keep]
        else:
            u = (h @ v[:, keep]) / np.sqrt(lam)
        return lam, np.ascontiguousarray(u)

    def solve_shifted_gram(self, r, scale, shift):
        """Solve ``(scale * H H^T + shift * I) z = r`` for a batch of right-hand sides.

        ``scale`` may be a scalar or an array broadcasting against the spectrum.
        Exact for every SPD shift, using the cached spectrum of ``H H^T``.
        """
        lam, u = self.gram_spectrum
        denom = scale * lam + shift
        if not np.all(np.isfinite(denom)) or np.any(denom <= 0) or not shift > 0:
            raise ArithmeticError("shifted Gram system is not positive definite")
        coef = r @ u
        return r / shift + (coef * (1.0 / denom - 1.0 / shift)) @ u.T

    def shifted_gram_logdet(self, scale, shift) -> float:
        lam, _ = self.gram_spectrum
        return float(np.sum(np.log(scale * lam + shift)) + (self.m - lam.size) * np.log(shift))


@dataclass(frozen=True, eq=False)
class RadonGeometry(_OperatorMixin):
    """Parallel-beam geometry for ``H_p``; also acts as the linear operator itself.

    Detector centres are symmetric about the rotation axis and span the
    circumscribed circle of the grid.
    """

    grid: ImageGrid
    angles: tuple[float, ...]
    num_detectors: int

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        object.__setattr__(self, "angles", angles)
        if not angles:
            raise InvalidArgumentError("geometry needs at least one projection angle")
        a = np.asarray(angles)
        if np.any(a < 0) or np.any(a >= np.pi) or np.any(np.diff(a) <= 0):
            raise InvalidArgumentError("angles must be strictly increasing in [0, pi)")
        if self.num_detectors < 1:
            raise InvalidArgumentError("num_detectors must be >= 1")

    @property
    def p(self) -> int:
        return len(self.angles)

    @property
    def d(self) -> int:
        return self.num_detectors

    @property
    def m(self) -> int:
        return self.p * self.num_detectors

    m_p = m

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def side(self) -> int:
        return self.grid.side

    @property
    def detector_spacing(self) -> float:
        radius = self.grid.side * self.grid.pixel_size / math.sqrt(2)
        return 2 * radius / self.num_detectors

    @property
    def detector_positions(self) -> np.ndarray:
        d = self.num_detectors
        return (np.arange(d) - (d - 1) / 2) * self.detector_spacing

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        return _joseph_matrix(self)

    @cached_property
    def matrix_t(self) -> sp.csr_matrix:
        return self.matrix.T.tocsr()

    def fbp(self, s):
        """Ramp-filtered back-projection, batched over leading axes."""
        s = self._check_sino(s)
        lead = s.shape[:-1]
        proj = s.reshape(*lead, self.p, self.num_detectors)
        filtered = _ramp_filter(proj, self.detector_spacing).reshape(*lead, self.m)
        ps = self.grid.pixel_size
        # H^T spreads a detector value over ps^2/ds of image area per angle
        scale = (np.pi / (2 * self.p)) * self.detector_spacing / ps**2
        return scale * self.adjoint(filtered)

    def to_dict(self) -> dict:
        return {
            "side": self.grid.side,
            "pixel_size": self.grid.pixel_size,
            "num_detectors": self.num_detectors,
            "angles": list(self.angles),
        }


def _joseph_matrix(geom: RadonGeometry) -> sp.csr_matrix:
    side = geom.grid.side
    ps = geom.grid.pixel_size
    d = geom.num_detectors
    half = (side - 1) / 2
    centres = (np.arange(side) - half) * ps
    det = geom.detector_positions
    rows, cols, vals = [], [], []
    for j, theta in enumerate(geom.angles):
        c, s = math.cos(theta), math.sin(theta)
        ray_ids = j * d + np.arange(d)
        if abs(c) >= abs(s):
            # march over image rows; interpolate across columns
            y = -centres  # y coordinate of row i (row 0 at the top)
            x = (det[:, None] - y[None, :] * s) / c
            frac = x / ps + half
            line = np.broadcast_to(np.arange(side)[None, :], frac.shape)
            step = ps / abs(c)
            lo = np.floor(frac).astype(int)
            w = frac - lo
            for idx, wt in ((lo, 1.0 - w), (lo + 1, w)):
                ok = (idx >= 0) & (idx < side) & (wt > 0)
                r = np.broadcast_to(ray_ids[:, None], frac.shape)[ok]
                rows.append(r)
                cols.append(line[ok] * side + idx[ok])
                vals.append(step * wt[ok])
        else:
            # march over image columns; interpolate across rows
            x = centres
            yy = (det[:, None] - x[None, :] * c) / s
            frac = half - yy / ps
            line = np.broadcast_to(np.arange(side)[None, :], frac.shape)
            step = ps / abs(s)
            lo = np.floor(frac).astype(int)
            w = frac - lo
            for idx, wt in ((lo, 1.0 - w), (lo + 1, w)):
                ok = (idx >= 0) & (idx < side) & (wt > 0)
                r = np.broadcast_to(ray_ids[:, None], frac.shape)[ok]
                rows.append(r)
                cols.append(idx[ok] * side + line[ok])
                vals.append(step * wt[ok])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(geom.m, geom.n)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def _ramp_filter(proj: np.ndarray, spacing: float) -> np.ndarray:
    """Ram-Lak filtering along the last axis with the spatially sampled kernel."""
    d = proj.shape[-1]
    size = max(64, int(2 ** math.ceil(math.log2(2 * d))))
    k = np.concatenate([np.arange(1, size // 2 + 1, 2), np.arange(size // 2 - 1, 0, -2)])
    taps = np.zeros(size)
    taps[0] = 0.25
    taps[1::2] = -1.0 / (np.pi * k) ** 2
    response = 2.0 * np.real(np.fft.fft(taps))
    spec = np.fft.fft(proj, n=size, axis=-1) * response
    return np.real(np.fft.ifft(spec, axis=-1))[..., :d] / spacing


@dataclass(frozen=True, eq=False)
class DenseOperator(_OperatorMixin):
    """An explicit ``(m, n)`` matrix behaving like a geometry (tests, tiny problems).

    ``fbp`` falls back to the Moore-Penrose pseudo-inverse.
    """

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", mat)

    @property
    def matrix_t(self):
        return self.matrix.T

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    def fbp(self, s):
        return self.pinv(s)

    def to_dict(self) -> dict:
        return {"dense_shape": list(self.matrix.shape)}


@dataclass(frozen=True)
class Sinogram:
    geometry: RadonGeometry
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", v)
        if v.size != self.geometry.m:
            raise InvalidArgumentError(f"sinogram length {v.size} != m_p={self.geometry.m}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("sinogram contains non-finite values")

    def as_array(self) -> np.ndarray:
        """View as ``(p, d)``."""
        return self.values.reshape(self.geometry.p, self.geometry.num_detectors)


@dataclass(frozen=True)
class NoiseModel:
    sigma_y: float

    def __post_init__(self):
        if not (self.sigma_y > 0 and math.isfinite(self.sigma_y)):
            raise InvalidArgumentError(f"sigma_y must be finite and > 0, got {self.sigma_y}")


def make_geometry(grid: ImageGrid, p: int, d: int | None = None) -> RadonGeometry:
    """Equispaced angles ``j*pi/p`` for ``j = 0..p-1``."""
    if d is None:
        d = default_detector_count(grid.side)
    if int(p) != p or p < 1:
        raise InvalidArgumentError(f"number of projections must be >= 1, got {p}")
    if int(d) != d or d < 1:
        raise InvalidArgumentError(f"number of detectors must be >= 1, got {d}")
    angles = tuple(j * np.pi / p for j in range(int(p)))
    return RadonGeometry(grid, angles, int(d))


def _values(s):
    return s.values if isinstance(s, Sinogram) else np.asarray(s, dtype=float)


def radon_forward(x, geom: RadonGeometry) -> Sinogram:
    return Sinogram(geom, geom.forward(np.asarray(x, dtype=float).reshape(-1)))


def radon_adjoint(s: Sinogram, geom: RadonGeometry | None = None) -> np.ndarray:
    geom = geom or s.geometry
    return geom.adjoint(_values(s))


def fbp(s: Sinogram, geom: RadonGeometry | None = None) -> np.ndarray:
    geom = geom or s.geometry
    return geom.fbp(_values(s))


def _sigma(noise) -> float:
    sigma = noise.sigma_y if isinstance(noise, NoiseModel) else float(noise)
    if sigma < 0:
        raise InvalidArgumentError("noise standard deviation must be >= 0")
    return sigma


def simulate_measurement(x, geom: RadonGeometry, noise, rng_seed=None) -> Sinogram:
    """``y = H x + eps``. A bare float ``noise`` of 0 is accepted for noiseless tests."""
    sigma = _sigma(noise)
    clean = geom.forward(np.asarray(x, dtype=float).reshape(-1))
    rng = np.random.default_rng(rng_seed)
    return Sinogram(geom, clean + sigma * rng.standard_normal(clean.shape))


def simulate_measurements(xs, op, noise, rng) -> np.ndarray:
    """Batched ``Y = X H^T + eps`` for ``xs`` of shape ``(N, n)``; returns ``(N, m)``."""
    sigma = _sigma(noise)
    rng = np.random.default_rng(rng)
    clean = op.forward(np.asarray(xs, dtype=float))
    return clean + sigma * rng.standard_normal(clean.shape)


def calibrate_sigma_y(dataset, grid: ImageGrid, d: int | None = None) -> NoiseModel:
    """One percent of the mean dynamic range of the 180-projection sinograms."""
    xs = np.asarray(dataset, dtype=float)
    if xs.size == 0 or len(xs) == 0:
        raise InvalidArgumentError("calibration dataset is empty")
    xs = xs.reshape(len(xs), -1)
    geom = make_geometry(grid, 180, d)
    sinos = geom.forward(xs)
    dynamic = sinos.max(axis=1) - sinos.min(axis=1)
    sigma = float(dynamic.sum() / (100.0 * len(xs)))
    if not sigma > 0:
        raise DegenerateCalibrationError("all calibration sinograms are constant")
    return NoiseModel(sigma)
