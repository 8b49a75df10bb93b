"""Gaussian-mixture prior with exact quantities under the VE perturbation kernel.

For ``p_0 = sum_k w_k N(mu_k, S_k)`` the perturbed density is
``p_t = sum_k w_k N(mu_k, S_k + sigma_t^2 I)``, so its log-density, score,
Hessian-vector products and Tweedie denoiser are available in closed form.
Every covariance is stored through its eigendecomposition, computed once at
construction, because each evaluation needs ``(S_k + sigma^2 I)^{-1}`` at a
different ``sigma``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgumentError
from .tensorio import decode_array, encode_array
from .tomo import ImageGrid

__all__ = [
    "GmmPrior",
    "LocalScore",
    "PhantomTemplateSet",
    "make_prior_from_templates",
    "make_phantoms",
    "sample_prior",
    "log_pt",
    "score_t",
    "hessian_vec_t",
    "tweedie_denoise",
]

COV_FORMS = ("isotropic", "diagonal", "full")
_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class _Component:
    mean: np.ndarray
    eig: np.ndarray | float  # scalar for isotropic
    rot: np.ndarray | None  # eigenvectors as columns, None when axis-aligned

    def to_eigbasis(self, v):
        return v if self.rot is None else v @ self.rot

    def from_eigbasis(self, u):
        return u if self.rot is None else u @ self.rot.T

    def apply_spectral(self, v, fn_of_eig):
        """``Q diag(f(e)) Q^T v`` for a batch of row vectors ``v``."""
        return self.from_eigbasis(self.to_eigbasis(v) * fn_of_eig)


@dataclass(frozen=True, eq=False)
class GmmPrior:
    weights: np.ndarray
    means: np.ndarray
    cov_form: str
    cov_params: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        params = np.asarray(self.cov_params, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "cov_params", params)
        if w.size == 0 or mu.shape[0] != w.size:
            raise InvalidArgumentError("need one mean per mixture weight and at least one component")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError("weights must be positive and sum to 1")
        if not np.all(np.isfinite(mu)):
            raise InvalidArgumentError("means must be finite")
        k, n = mu.shape
        expected = {"isotropic": (k,), "diagonal": (k, n), "full": (k, n, n)}
        if self.cov_form not in expected:
            raise InvalidArgumentError(f"unknown covariance form {self.cov_form!r}")
        if params.shape != expected[self.cov_form]:
            raise InvalidArgumentError(
                f"{self.cov_form} covariance parameters need shape {expected[self.cov_form]}, got {params.shape}"
            )
        comps = []
        for i in range(k):
            if self.cov_form == "isotropic":
                eig, rot = float(params[i]), None
                smallest = eig
            elif self.cov_form == "diagonal":
                eig, rot = params[i].copy(), None
                smallest = eig.min()
            else:
                cov = params[i]
                if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
                    raise InvalidArgumentError(f"covariance {i} is not symmetric")
                eig, rot = np.linalg.eigh(0.5 * (cov + cov.T))
                smallest = eig.min()
            if not (np.isfinite(smallest) and smallest > 0):
                raise InvalidArgumentError(f"covariance {i} is not positive definite")
            comps.append(_Component(mu[i], eig, rot))
        object.__setattr__(self, "_comps", tuple(comps))

    # construction helpers

    @classmethod
    def isotropic(cls, weights, means, variances):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        v = np.broadcast_to(np.asarray(variances, dtype=float), (means.shape[0],))
        return cls(weights, means, "isotropic", v.copy())

    @classmethod
    def diagonal(cls, weights, means, variances):
        return cls(weights, means, "diagonal", variances)

    @classmethod
    def full(cls, weights, means, covariances):
        return cls(weights, means, "full", covariances)

    @property
    def n(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def covariance(self, k: int) -> np.ndarray:
        if self.cov_form == "isotropic":
            return self.cov_params[k] * np.eye(self.n)
        if self.cov_form == "diagonal":
            return np.diag(self.cov_params[k])
        return self.cov_params[k].copy()

    def max_eigenvalue(self, k: int) -> float:
        return float(np.max(self._comps[k].eig))

    @cached_property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    @cached_property
    def std_envelope(self) -> float:
        """Square root of an upper bound on the largest eigenvalue of the mixture covariance."""
        centred = np.sqrt(self.weights)[:, None] * (self.means - self.mean)
        between = np.linalg.eigvalsh(centred @ centred.T).max(initial=0.0)
        within = max(self.max_eigenvalue(k) for k in range(self.n_components))
        return math.sqrt(max(between, 0.0) + within)

    @cached_property
    def origin_envelope(self) -> float:
        """Like :attr:`std_envelope` but measured about the origin, where samplers start."""
        scaled = np.sqrt(self.weights)[:, None] * self.means
        between = np.linalg.eigvalsh(scaled @ scaled.T).max(initial=0.0)
        within = max(self.max_eigenvalue(k) for k in range(self.n_components))
        return math.sqrt(max(between, 0.0) + within)

    def permuted(self, order) -> "GmmPrior":
        order = np.asarray(order)
        return GmmPrior(self.weights[order], self.means[order], self.cov_form, self.cov_params[order])

    # evaluation

    def local(self, x, sigma_t: float) -> "LocalScore":
        return LocalScore(self, x, sigma_t)

    def log_pt(self, x, sigma_t: float):
        return self.local(x, sigma_t).log_density

    def score_t(self, x, sigma_t: float):
        return self.local(x, sigma_t).score

    def hessian_vec_t(self, x, sigma_t: float, v):
        return self.local(x, sigma_t).hvp(v)

    def tweedie_denoise(self, x, sigma_t: float):
        return self.local(x, sigma_t).denoised

    def sample(self, count: int, rng=None) -> np.ndarray:
        """``count`` i.i.d. draws as rows of a ``(count, n)`` array."""
        if int(count) != count or count < 1:
            raise InvalidArgumentError(f"sample count must be >= 1, got {count}")
        rng = np.random.default_rng(rng)
        labels = rng.choice(self.n_components, size=int(count), p=self.weights)
        z = rng.standard_normal((int(count), self.n))
        out = np.empty_like(z)
        for k, comp in enumerate(self._comps):
            sel = labels == k
            if np.any(sel):
                out[sel] = comp.mean + comp.from_eigbasis(z[sel] * np.sqrt(comp.eig))
        return out

    # serialisation

    def to_dict(self) -> dict:
        return {
            "kind": "gmm",
            "n": self.n,
            "weights": [float(w) for w in self.weights],
            "means": encode_array(self.means),
            "covariance": {"form": self.cov_form, "params": encode_array(self.cov_params)},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GmmPrior":
        cov = doc["covariance"]
        return cls(
            np.asarray(doc["weights"], dtype=float),
            decode_array(doc["means"]),
            cov["form"],
            decode_array(cov["params"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GmmPrior":
        return cls.from_dict(json.loads(text))


class LocalScore:
    """Everything about ``log p_t`` at a batch of points ``x`` for one noise level.

    Holds responsibilities and per-component score terms so that the score,
    the denoiser and any number of Hessian-vector products share one pass.
    Accepts ``x`` of shape ``(n,)`` or ``(B, n)``; outputs follow the input.
    """

    def __init__(self, prior: GmmPrior, x, sigma_t: float):
        if sigma_t < 0:
            raise InvalidArgumentError("sigma_t must be >= 0")
        x = np.asarray(x, dtype=float)
        self._single = x.ndim == 1
        xb = np.atleast_2d(x)
        if xb.shape[-1] != prior.n:
            raise InvalidArgumentError(f"point has dimension {xb.shape[-1]}, prior has n={prior.n}")
        self.prior = prior
        self.sigma2 = float(sigma_t) ** 2
        self.x = xb
        n = prior.n
        logs, terms = [], []
        for w, comp in zip(prior.weights, prior._comps):
            u = comp.to_eigbasis(xb - comp.mean)
            d = comp.eig + self.sigma2
            quad = np.sum(u * u / d, axis=1)
            logdet = n * math.log(d) if np.isscalar(d) else float(np.sum(np.log(d)))
            logs.append(math.log(w) - 0.5 * (quad + logdet + n * _LOG_2PI))
            terms.append(-comp.from_eigbasis(u / d))
        logs = np.stack(logs, axis=1)
        self.log_density_b = logsumexp(logs, axis=1)
        self.log_resp = logs - self.log_density_b[:, None]
        self.resp = np.exp(self.log_resp)
        self.terms = terms  # a_k = -(S_k + sigma^2 I)^{-1} (x - mu_k)
        score = np.zeros_like(xb)
        for k, a in enumerate(terms):
            score += self.resp[:, k : k + 1] * a
        self.score_b = score

    def _out(self, arr):
        return arr[0] if self._single else arr

    @property
    def log_density(self):
        return float(self.log_density_b[0]) if self._single else self.log_density_b

    @property
    def score(self):
        return self._out(self.score_b)

    @property
    def denoised(self):
        return self._out(self.x + self.sigma2 * self.score_b)

    def hvp(self, v):
        """Hessian of ``log p_t`` at ``x`` times ``v``.

        ``sum_k pi_k (-P_k v) + sum_k pi_k a_k (a_k . v) - s (s . v)``.
        """
        vb = np.atleast_2d(np.asarray(v, dtype=float))
        out = -np.sum(self.score_b * vb, axis=1, keepdims=True) * self.score_b
        for k, (a, comp) in enumerate(zip(self.terms, self.prior._comps)):
            r = self.resp[:, k : k + 1]
            prec_v = comp.apply_spectral(vb, 1.0 / (comp.eig + self.sigma2))
            out += r * (np.sum(a * vb, axis=1, keepdims=True) * a - prec_v)
        return self._out(out)

    def jvp(self, v):
        """Jacobian of the Tweedie denoiser, ``(I + sigma^2 Hess) v``; symmetric."""
        vb = np.atleast_2d(np.asarray(v, dtype=float))
        if self.sigma2 == 0.0:
            return self._out(vb.copy())
        return self._out(vb + self.sigma2 * np.atleast_2d(self.hvp(vb)))


# spec-level function names
log_pt = GmmPrior.log_pt
score_t = GmmPrior.score_t
hessian_vec_t = GmmPrior.hessian_vec_t
tweedie_denoise = GmmPrior.tweedie_denoise


def sample_prior(prior: GmmPrior, count: int, rng_seed=None) -> np.ndarray:
    return prior.sample(count, rng_seed)


@dataclass(frozen=True)
class PhantomTemplateSet:
    grid: ImageGrid
    templates: np.ndarray
    jitter_variance: float | None = None

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.templates, dtype=float))
        object.__setattr__(self, "templates", t)
        if t.shape[0] == 0:
            raise InvalidArgumentError("template set is empty")
        if t.shape[1] != self.grid.n:
            raise InvalidArgumentError("templates do not match the grid size")
        if np.any(t < 0) or np.any(t > 1):
            raise InvalidArgumentError("template values must lie in [0, 1]")

    def __len__(self):
        return self.templates.shape[0]


def make_prior_from_templates(tpl: PhantomTemplateSet, c: float | None = None) -> GmmPrior:
    """Uniform mixture of ``N(template, c I)``."""
    c = tpl.jitter_variance if c is None else c
    if c is None or not c > 0:
        raise InvalidArgumentError(f"jitter variance must be > 0, got {c}")
    k = len(tpl)
    return GmmPrior.isotropic(np.full(k, 1.0 / k), tpl.templates, np.full(k, float(c)))


def make_phantoms(grid: ImageGrid, count: int, rng_seed=None) -> PhantomTemplateSet:
    """Random ellipses plus anisotropic Gaussian blobs, clipped to [0, 1]."""
    if int(count) != count or count < 1:
        raise InvalidArgumentError("phantom count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    side = grid.side
    coords = (np.arange(side) - (side - 1) / 2) / (side / 2)
    xx, yy = np.meshgrid(coords, -coords)
    out = np.empty((int(count), grid.n))
    for i in range(int(count)):
        img = np.zeros((side, side))
        for _ in range(rng.integers(2, 5)):
            cx, cy = rng.uniform(-0.5, 0.5, 2)
            a, b = rng.uniform(0.15, 0.6, 2)
            phi = rng.uniform(0, np.pi)
            xr = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
            yr = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
            img += rng.uniform(0.15, 0.5) * ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0)
        for _ in range(rng.integers(1, 4)):
            cx, cy = rng.uniform(-0.6, 0.6, 2)
            sx, sy = rng.uniform(0.08, 0.35, 2)
            phi = rng.uniform(0, np.pi)
            xr = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
            yr = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
            img += rng.uniform(0.2, 0.6) * np.exp(-0.5 * ((xr / sx) ** 2 + (yr / sy) ** 2))
        out[i] = np.clip(img, 0.0, 1.0).ravel()
    return PhantomTemplateSet(grid, out)
