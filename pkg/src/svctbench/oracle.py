"""Exact posterior for a Gaussian-mixture prior under ``y = H x + N(0, sigma_y^2 I)``.

Each prior component stays Gaussian after conditioning:

    S'_k = (S_k^{-1} + H^T H / sigma_y^2)^{-1}
    mu'_k = S'_k (S_k^{-1} mu_k + H^T y / sigma_y^2)
    w'_k  ~ w_k N(y; H mu_k, H S_k H^T + sigma_y^2 I)

The covariance factors depend only on the prior, the operator and sigma_y, so
:class:`PosteriorFactors` computes them once and reuses them for many ``y``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp
from scipy.stats import norm

from .errors import InvalidArgumentError, UnsupportedDimensionError
from .gmm import GmmPrior
from .tensorio import decode_array, encode_array

__all__ = [
    "PosteriorFactors",
    "PosteriorGmm",
    "Gmm1D",
    "GridDensity",
    "exact_posterior",
    "sample_posterior",
    "sample_posteriors",
    "pixel_marginal",
    "grid_posterior_oracle",
    "default_grid_spec",
]

_LOG_2PI = math.log(2 * math.pi)
COND_LIMIT = 1e12


class ConditioningWarning(UserWarning):
    pass


@dataclass
class _Factor:
    prec_chol: tuple  # cho_factor of the posterior precision
    cov: np.ndarray  # posterior covariance S'_k
    prior_prec_mean: np.ndarray  # S_k^{-1} mu_k
    condition: float


class PosteriorFactors:
    """Posterior covariances and evidence terms shared by every measurement ``y``."""

    def __init__(self, prior: GmmPrior, op, noise):
        self.prior = prior
        self.op = op
        self.sigma_y = float(getattr(noise, "sigma_y", noise))
        if not self.sigma_y > 0:
            raise InvalidArgumentError("sigma_y must be > 0")
        if op.n != prior.n:
            raise InvalidArgumentError(f"operator acts on n={op.n}, prior has n={prior.n}")
        self.warnings: list[str] = []
        h = op.dense
        hth = h.T @ h / self.sigma_y**2
        shared: dict = {}
        self.factors = []
        for k, comp in enumerate(prior._comps):
            key = (prior.cov_form, np.asarray(prior.cov_params[k]).tobytes())
            if key not in shared:
                shared[key] = self._factor(comp, hth)
            base = shared[key]
            prec_mean = comp.apply_spectral(comp.mean[None, :], 1.0 / comp.eig)[0]
            self.factors.append(_Factor(base.prec_chol, base.cov, prec_mean, base.condition))
        self._evidence = [self._evidence_factor(k) for k in range(prior.n_components)]

    def _factor(self, comp, hth):
        n = hth.shape[0]
        prior_prec = comp.apply_spectral(np.eye(n), 1.0 / comp.eig)
        prec = 0.5 * (prior_prec + prior_prec.T) + hth
        eig = np.linalg.eigvalsh(prec)
        condition = float(eig[-1] / eig[0]) if eig[0] > 0 else math.inf
        if condition > COND_LIMIT:
            msg = f"posterior precision is ill-conditioned (estimate {condition:.3g})"
            self.warnings.append(msg)
            warnings.warn(msg, ConditioningWarning, stacklevel=3)
        chol = cho_factor(prec, lower=True)
        cov = cho_solve(chol, np.eye(n))
        cov = 0.5 * (cov + cov.T)
        return _Factor(chol, cov, None, condition)

    def _evidence_factor(self, k):
        prior, op = self.prior, self.op
        sy2 = self.sigma_y**2
        if prior.cov_form == "isotropic":
            return ("spectral", float(prior.cov_params[k]))
        h = op.dense
        s = h @ prior.covariance(k) @ h.T + sy2 * np.eye(op.m)
        chol = cho_factor(0.5 * (s + s.T), lower=True)
        return ("dense", chol)

    def log_evidence(self, ys) -> np.ndarray:
        """``log w_k + log N(y; H mu_k, H S_k H^T + sigma_y^2 I)`` as ``(B, K)``."""
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        prior, op = self.prior, self.op
        sy2 = self.sigma_y**2
        out = np.empty((ys.shape[0], prior.n_components))
        for k, (kind, data) in enumerate(self._evidence):
            res = ys - op.forward(prior.means[k])
            if kind == "spectral":
                sol = op.solve_shifted_gram(res, data, sy2)
                logdet = op.shifted_gram_logdet(data, sy2)
            else:
                sol = cho_solve(data, res.T).T
                logdet = 2.0 * float(np.sum(np.log(np.diag(data[0]))))
            quad = np.sum(res * sol, axis=1)
            out[:, k] = math.log(prior.weights[k]) - 0.5 * (quad + logdet + op.m * _LOG_2PI)
        return out

    def posterior_means(self, ys) -> np.ndarray:
        """Component posterior means as ``(B, K, n)``."""
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        data = self.op.adjoint(ys) / self.sigma_y**2
        return np.stack(
            [cho_solve(f.prec_chol, (data + f.prior_prec_mean).T).T for f in self.factors], axis=1
        )

    def posterior_weights(self, ys) -> tuple[np.ndarray, list[str]]:
        logw = self.log_evidence(ys)
        total = logsumexp(logw, axis=1, keepdims=True)
        notes = []
        bad = ~np.isfinite(total[:, 0])
        w = np.exp(logw - np.where(bad[:, None], 0.0, total))
        if np.any(bad):
            w[bad] = 1.0 / logw.shape[1]
            notes.append("measurement has zero evidence under every component; using uniform weights")
            warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
        return w, notes

    def sample(self, ys, rng=None) -> np.ndarray:
        """One exact posterior draw per row of ``ys``."""
        rng = np.random.default_rng(rng)
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        w, _ = self.posterior_weights(ys)
        means = self.posterior_means(ys)
        b = ys.shape[0]
        u = rng.random(b)
        labels = np.minimum((np.cumsum(w, axis=1) < u[:, None]).sum(axis=1), w.shape[1] - 1)
        z = rng.standard_normal((b, self.prior.n))
        out = means[np.arange(b), labels].copy()
        for k, f in enumerate(self.factors):
            sel = labels == k
            if np.any(sel):
                # precision = L L^T, so L^{-T} z has covariance S'_k
                out[sel] += solve_triangular(f.prec_chol[0], z[sel].T, lower=True, trans="T").T
        return out


@dataclass(eq=False)
class PosteriorGmm:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    y: np.ndarray
    geometry: object
    sigma_y: float
    warnings: list = field(default_factory=list)
    _factors: PosteriorFactors | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    @cached_property
    def as_prior(self) -> GmmPrior:
        w = self.weights / self.weights.sum()
        return GmmPrior.full(w, self.means, self.covariances)

    def log_density(self, x):
        return self.as_prior.log_pt(x, 0.0)

    def sample(self, count: int, rng=None) -> np.ndarray:
        if int(count) != count or count < 1:
            raise InvalidArgumentError("sample count must be >= 1")
        rng = np.random.default_rng(rng)
        labels = rng.choice(self.n_components, size=int(count), p=self.weights / self.weights.sum())
        z = rng.standard_normal((int(count), self.n))
        out = np.empty_like(z)
        for k in range(self.n_components):
            sel = labels == k
            if not np.any(sel):
                continue
            if self._factors is not None:
                chol = self._factors.factors[k].prec_chol[0]
                out[sel] = self.means[k] + solve_triangular(chol, z[sel].T, lower=True, trans="T").T
            else:
                low = np.linalg.cholesky(self.covariances[k])
                out[sel] = self.means[k] + z[sel] @ low.T
        return out

    def to_dict(self) -> dict:
        doc = {
            "kind": "gmm",
            "n": self.n,
            "weights": [float(w) for w in self.weights],
            "means": encode_array(self.means),
            "covariance": {"form": "full", "params": encode_array(self.covariances)},
            "provenance": {
                "y": encode_array(self.y),
                "geometry": self.geometry.to_dict() if hasattr(self.geometry, "to_dict") else None,
                "sigma_y": self.sigma_y,
                "warnings": list(self.warnings),
            },
        }
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict, geometry=None) -> "PosteriorGmm":
        prov = doc["provenance"]
        return cls(
            np.asarray(doc["weights"], dtype=float),
            decode_array(doc["means"]),
            decode_array(doc["covariance"]["params"]),
            decode_array(prov["y"]),
            geometry,
            float(prov["sigma_y"]),
            list(prov.get("warnings", [])),
        )


def exact_posterior(prior: GmmPrior, geom, noise, y, factors: PosteriorFactors | None = None) -> PosteriorGmm:
    factors = factors or PosteriorFactors(prior, geom, noise)
    y = np.asarray(getattr(y, "values", y), dtype=float).reshape(-1)
    if y.size != geom.m:
        raise InvalidArgumentError(f"measurement has length {y.size}, operator expects m={geom.m}")
    w, notes = factors.posterior_weights(y)
    means = factors.posterior_means(y)[0]
    covs = np.stack([f.cov for f in factors.factors])
    return PosteriorGmm(
        w[0], means, covs, y, geom, factors.sigma_y, factors.warnings + notes, factors
    )


def sample_posterior(post: PosteriorGmm, N: int, rng_seed=None) -> np.ndarray:
    return post.sample(N, rng_seed)


def sample_posteriors(prior: GmmPrior, geom, noise, ys, rng_seed=None) -> np.ndarray:
    """Exact draw ``x_i ~ p(x | y_i)`` for every row ``y_i``."""
    return PosteriorFactors(prior, geom, noise).sample(ys, rng_seed)


@dataclass(frozen=True)
class Gmm1D:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.weights @ self.means)

    @property
    def std(self) -> float:
        second = self.weights @ (self.variances + self.means**2)
        return float(math.sqrt(max(second - self.mean**2, 0.0)))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        return np.sum(self.weights * norm.pdf(x, self.means, np.sqrt(self.variances)), axis=-1)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        return np.sum(self.weights * norm.cdf(x, self.means, np.sqrt(self.variances)), axis=-1)

    def support(self, n_std: float = 10.0) -> tuple[float, float]:
        sd = np.sqrt(self.variances)
        return float(np.min(self.means - n_std * sd)), float(np.max(self.means + n_std * sd))


def pixel_marginal(post: PosteriorGmm, pixel_index: int) -> Gmm1D:
    if not 0 <= pixel_index < post.n:
        raise InvalidArgumentError(f"pixel index {pixel_index} out of range for n={post.n}")
    w = post.weights / post.weights.sum()
    return Gmm1D(w, post.means[:, pixel_index].copy(), post.covariances[:, pixel_index, pixel_index].copy())


@dataclass(frozen=True)
class GridDensity:
    axes: tuple
    density: np.ndarray

    def integrate(self, values=None) -> float:
        out = self.density if values is None else values
        for ax in reversed(self.axes):
            out = trapezoid(out, ax, axis=-1)
        return float(out)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def tv(self, other) -> float:
        """Total-variation distance to another density on the same grid."""
        q = other.density if isinstance(other, GridDensity) else np.asarray(other)
        return 0.5 * self.integrate(np.abs(self.density - q))


def default_grid_spec(prior: GmmPrior, num: int = 200, n_std: float = 8.0) -> list[np.ndarray]:
    sd = math.sqrt(max(prior.max_eigenvalue(k) for k in range(prior.n_components)))
    lo = prior.means.min(axis=0) - n_std * sd
    hi = prior.means.max(axis=0) + n_std * sd
    return [np.linspace(a, b, num) for a, b in zip(lo, hi)]


def _axes(grid_spec, n):
    axes = []
    for spec in grid_spec:
        if isinstance(spec, tuple) and len(spec) == 3:
            axes.append(np.linspace(*spec[:2], int(spec[2])))
        else:
            axes.append(np.asarray(spec, dtype=float))
    if len(axes) != n:
        raise InvalidArgumentError(f"grid spec has {len(axes)} axes for dimension {n}")
    return tuple(axes)


def grid_posterior_oracle(prior: GmmPrior, geom, noise, y, grid_spec=None) -> GridDensity:
    """Prior times likelihood evaluated pointwise and normalised by trapezoidal quadrature."""
    if prior.n > 3:
        raise UnsupportedDimensionError(f"grid oracle supports n <= 3, got n={prior.n}")
    axes = _axes(grid_spec if grid_spec is not None else default_grid_spec(prior), prior.n)
    y = np.asarray(getattr(y, "values", y), dtype=float).reshape(-1)
    sigma_y = float(getattr(noise, "sigma_y", noise))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    logp = prior.log_pt(pts, 0.0)
    res = y - geom.forward(pts)
    logp = logp - 0.5 * np.sum(res * res, axis=1) / sigma_y**2
    dens = np.exp(logp - logp.max()).reshape(mesh[0].shape)
    grid = GridDensity(axes, dens)
    return GridDensity(axes, dens / grid.integrate())


def posterior_on_grid(post: PosteriorGmm, axes) -> GridDensity:
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return GridDensity(axes, np.exp(post.log_density(pts)).reshape(mesh[0].shape))
