"""VE-SDE ancestral sampling with plug-and-play likelihood guidance.

Guidance terms approximate the gradient of ``log p_t(y | x_t)``:

* ``mcg``:   alpha * J H^+ (y - H x0),  alpha = 0.1 / ||H^+ (y - H x0)||
* ``dps``:   alpha * J H^T (y - H x0),  alpha = 1 / ||y - H x0||
* ``pig``:   J H^T (r_t^2 H H^T + sigma_y^2 I)^{-1} (y - H x0)
* ``exact``: the true gradient, available because the prior is a Gaussian mixture

where ``x0`` is the Tweedie denoiser output and ``J`` its (symmetric)
Jacobian ``I + sigma_t^2 Hess log p_t``. Every function takes one point
``(n,)`` or a batch ``(B, n)``; ``y`` is ``(m,)`` or ``(B, m)``.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .errors import BatchFailureError, InvalidArgumentError, NumericalFailureError
from .gmm import GmmPrior, LocalScore

__all__ = [
    "METHODS",
    "NoiseSchedule",
    "GuidanceConfig",
    "make_schedule",
    "pig_rt2",
    "likelihood_score",
    "likelihood_score_mcg",
    "likelihood_score_dps",
    "likelihood_score_pig",
    "exact_likelihood_score",
    "log_likelihood_t",
    "ancestral_sample",
    "batch_sample",
    "BatchResult",
]

METHODS = ("none", "mcg", "dps", "pig", "exact")
_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float
    sigma_max: float
    K: int

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max) or not math.isfinite(self.sigma_max):
            raise InvalidArgumentError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if int(self.K) != self.K or self.K < 2:
            raise InvalidArgumentError(f"need at least 2 noise scales, got {self.K}")

    @cached_property
    def sigmas(self) -> np.ndarray:
        """Noise levels in sampling order, from sigma_max down to sigma_min."""
        t = np.linspace(1.0, 0.0, int(self.K))
        s = self.sigma_min * (self.sigma_max / self.sigma_min) ** t
        s[0], s[-1] = self.sigma_max, self.sigma_min
        return s

    def to_dict(self) -> dict:
        return {"sigma_min": self.sigma_min, "sigma_max": self.sigma_max, "K": int(self.K)}


def make_schedule(sigma_min: float, sigma_max: float, K: int) -> NoiseSchedule:
    return NoiseSchedule(float(sigma_min), float(sigma_max), K)


@dataclass(frozen=True)
class GuidanceConfig:
    method: str = "none"
    alpha_scale: float = 1.0
    epsilon_denom: float = 1e-12
    mcg_pseudo_inverse: str = "fbp"
    mcg_projection: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"unknown guidance method {self.method!r}; choose from {METHODS}")
        # alpha_scale = 0 is allowed: it switches guidance off (used by alpha sweeps)
        if not (self.alpha_scale >= 0 and math.isfinite(self.alpha_scale)):
            raise InvalidArgumentError("alpha_scale must be finite and >= 0")
        if not self.epsilon_denom > 0:
            raise InvalidArgumentError("epsilon_denom must be > 0")
        if self.mcg_pseudo_inverse not in ("fbp", "dense"):
            raise InvalidArgumentError("mcg_pseudo_inverse must be 'fbp' or 'dense'")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha_scale": self.alpha_scale,
            "epsilon_denom": self.epsilon_denom,
            "mcg_pseudo_inverse": self.mcg_pseudo_inverse,
            "mcg_projection": self.mcg_projection,
        }


def pig_rt2(sigma_t: float) -> float:
    """``r_t^2 = sigma_t^2 / (sigma_t^2 + 1)``."""
    s2 = sigma_t * sigma_t
    return s2 / (s2 + 1.0)


def _sigma_y(noise) -> float:
    return float(getattr(noise, "sigma_y", noise))


def _prepare(x_t, sigma_t, y, op, prior, local):
    if local is None:
        local = prior.local(x_t, sigma_t)
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != op.m:
        raise InvalidArgumentError(f"measurement has length {y.shape[-1]}, operator expects m={op.m}")
    x0 = local.x + local.sigma2 * local.score_b
    residual = y - op.forward(x0)
    return local, np.atleast_2d(residual)


def _finish(local: LocalScore, out, label):
    if not np.all(np.isfinite(out)):
        raise NumericalFailureError(f"{label} guidance produced non-finite values", method=label)
    return out[0] if local._single else out


def _row_norm(a):
    return np.sqrt(np.sum(a * a, axis=1, keepdims=True))


def likelihood_score_dps(x_t, sigma_t, y, geom, noise, prior: GmmPrior, cfg=None, local=None):
    cfg = cfg or GuidanceConfig("dps")
    local, r = _prepare(x_t, sigma_t, y, geom, prior, local)
    alpha = cfg.alpha_scale / np.maximum(_row_norm(r), cfg.epsilon_denom)
    out = alpha * np.atleast_2d(local.jvp(geom.adjoint(r)))
    return _finish(local, out, "dps")


def likelihood_score_mcg(x_t, sigma_t, y, geom, noise, prior: GmmPrior, cfg=None, local=None):
    cfg = cfg or GuidanceConfig("mcg")
    local, r = _prepare(x_t, sigma_t, y, geom, prior, local)
    back = geom.pinv(r) if cfg.mcg_pseudo_inverse == "dense" else geom.fbp(r)
    alpha = cfg.alpha_scale * 0.1 / np.maximum(_row_norm(back), cfg.epsilon_denom)
    out = alpha * np.atleast_2d(local.jvp(back))
    return _finish(local, out, "mcg")


def likelihood_score_pig(
    x_t, sigma_t, y, geom, noise, prior: GmmPrior, cfg=None, local=None, rt2=None
):
    """``rt2`` overrides ``r_t^2`` (default ``sigma_t^2 / (sigma_t^2 + 1)``)."""
    local, r = _prepare(x_t, sigma_t, y, geom, prior, local)
    rt2 = pig_rt2(sigma_t) if rt2 is None else float(rt2)
    sy2 = _sigma_y(noise) ** 2
    try:
        z = geom.solve_shifted_gram(r, rt2, sy2)
    except ArithmeticError as exc:
        raise NumericalFailureError(f"pig solve failed at sigma_t={sigma_t}: {exc}", method="pig") from exc
    out = np.atleast_2d(local.jvp(geom.adjoint(z)))
    return _finish(local, out, "pig")


def _component_likelihoods(local: LocalScore, y, op, sigma_y):
    """Per-component ``log pi_k(x) + log N(y; H m_k, S_k)`` and their gradients in x."""
    prior = local.prior
    s2 = local.sigma2
    sy2 = sigma_y**2
    y = np.atleast_2d(np.asarray(y, dtype=float))
    logs, grads = [], []
    for k, (a, comp) in enumerate(zip(local.terms, prior._comps)):
        m_k = local.x + s2 * a
        res = y - op.forward(m_k)
        cvar = comp.eig * s2 / (comp.eig + s2)  # spectrum of Cov(x0 | x_t, k)
        if np.isscalar(cvar):
            sol = op.solve_shifted_gram(res, cvar, sy2)
            logdet = op.shifted_gram_logdet(cvar, sy2)
        else:
            h = op.dense
            g = h if comp.rot is None else h @ comp.rot
            cov = (g * cvar) @ g.T + sy2 * np.eye(op.m)
            try:
                fac = cho_factor(cov, lower=True)
            except np.linalg.LinAlgError as exc:
                raise NumericalFailureError("exact likelihood covariance is not SPD", method="exact") from exc
            sol = cho_solve(fac, res.T).T
            logdet = 2.0 * float(np.sum(np.log(np.diag(fac[0]))))
        quad = np.sum(res * sol, axis=1)
        logs.append(local.log_resp[:, k] - 0.5 * (quad + logdet + op.m * _LOG_2PI))
        # d m_k / d x = Q diag(e / (e + s2)) Q^T
        back = comp.apply_spectral(op.adjoint(sol), comp.eig / (comp.eig + s2))
        grads.append(a - local.score_b + back)
    return np.stack(logs, axis=1), grads


def exact_likelihood_score(x_t, sigma_t, y, geom, noise, prior: GmmPrior, local=None):
    """Exact gradient in ``x_t`` of ``log sum_k pi_k(x_t) N(y; H m_k(x_t), H C_k H^T + sigma_y^2 I)``."""
    if local is None:
        local = prior.local(x_t, sigma_t)
    logs, grads = _component_likelihoods(local, y, geom, _sigma_y(noise))
    w = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))
    out = np.zeros_like(local.x)
    for k, g in enumerate(grads):
        out += w[:, k : k + 1] * g
    return _finish(local, out, "exact")


def log_likelihood_t(x_t, sigma_t, y, geom, noise, prior: GmmPrior):
    """``log p_t(y | x_t)`` in closed form."""
    local = prior.local(x_t, sigma_t)
    logs, _ = _component_likelihoods(local, y, geom, _sigma_y(noise))
    out = logsumexp(logs, axis=1)
    return float(out[0]) if local._single else out


def likelihood_score(cfg: GuidanceConfig, x_t, sigma_t, y, geom, noise, prior, local=None):
    """Dispatch on ``cfg.method``; ``none`` returns zeros."""
    if cfg.method == "none":
        return np.zeros_like(np.asarray(x_t, dtype=float))
    if cfg.method == "dps":
        return likelihood_score_dps(x_t, sigma_t, y, geom, noise, prior, cfg, local)
    if cfg.method == "mcg":
        return likelihood_score_mcg(x_t, sigma_t, y, geom, noise, prior, cfg, local)
    if cfg.method == "pig":
        return likelihood_score_pig(x_t, sigma_t, y, geom, noise, prior, cfg, local)
    return exact_likelihood_score(x_t, sigma_t, y, geom, noise, prior, local)


def _run_chains(prior, schedule, cfg, ys, op, noise, rngs, x_init=None, stochastic=True, trace=None):
    """Advance a block of chains in lockstep.

    Returns final samples ``(B, n)`` (NaN rows for failed chains) and the step
    index at which each chain failed (-1 if it did not).
    """
    sig = schedule.sigmas
    b = len(rngs)
    n = prior.n
    if x_init is None:
        x = sig[0] * np.stack([rng.standard_normal(n) for rng in rngs])
    else:
        x = np.array(np.broadcast_to(np.asarray(x_init, dtype=float), (b, n)))
    failed_at = np.full(b, -1)
    active = np.arange(b)
    guided = cfg.method != "none"
    for i in range(len(sig) - 1):
        if active.size == 0:
            break
        hi, lo = sig[i], sig[i + 1]
        xa = x[active]
        try:
            local = prior.local(xa, hi)
            drift = local.score_b
            if guided:
                ya = ys[active] if ys.ndim == 2 else ys
                drift = drift + np.atleast_2d(likelihood_score(cfg, xa, hi, ya, op, noise, prior, local))
            delta = hi * hi - lo * lo
            xa = xa + delta * drift
            if stochastic:
                z = np.stack([rngs[j].standard_normal(n) for j in active])
                xa = xa + math.sqrt(lo * lo * delta / (hi * hi)) * z
            if cfg.mcg_projection and cfg.method == "mcg":
                ya = ys[active] if ys.ndim == 2 else ys
                res = ya - op.forward(xa)
                xa = xa + (op.pinv(res) if cfg.mcg_pseudo_inverse == "dense" else op.fbp(res))
        except NumericalFailureError:
            xa = np.full_like(xa, np.nan)
        ok = np.all(np.isfinite(xa), axis=1)
        failed_at[active[~ok]] = i
        x[active] = xa
        active = active[ok]
        if trace is not None:
            trace.append(x.copy())
    out = np.full((b, n), np.nan)
    if active.size:
        out[active] = prior.tweedie_denoise(x[active], sig[-1])
        bad = ~np.all(np.isfinite(out[active]), axis=1)
        failed_at[active[bad]] = len(sig) - 1
        out[active[bad]] = np.nan
    return out, failed_at


def _check_inputs(cfg, y, geom, noise):
    if cfg.method != "none" and (y is None or geom is None or noise is None):
        raise InvalidArgumentError(f"guidance {cfg.method!r} needs y, geometry and noise model")


def _as_measurements(y):
    if y is None:
        return None
    return np.asarray(getattr(y, "values", y), dtype=float)


def ancestral_sample(
    prior: GmmPrior,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig | None = None,
    y=None,
    geom=None,
    noise=None,
    rng_seed=None,
    *,
    stochastic: bool = True,
    x_init=None,
    trajectory: list | None = None,
) -> np.ndarray:
    """One chain of the VE ancestral recursion, finished by a Tweedie step at sigma_min.

    ``stochastic=False`` drops the injected noise. If ``trajectory`` is a
    list, the state after every step is appended to it.
    """
    guidance = guidance or GuidanceConfig()
    _check_inputs(guidance, y, geom, noise)
    rng = np.random.default_rng(rng_seed)
    ys = _as_measurements(y)
    out, failed = _run_chains(
        prior, schedule, guidance, ys, geom, noise, [rng], x_init, stochastic, trajectory
    )
    if failed[0] >= 0:
        raise NumericalFailureError(
            f"chain diverged at step {failed[0]} with method {guidance.method!r}",
            step=int(failed[0]),
            method=guidance.method,
        )
    return out[0]


@dataclass
class BatchResult:
    samples: np.ndarray
    failure_steps: np.ndarray
    runtime_seconds: float
    master_seed: int | None
    block_size: int
    method: str
    extra: dict = field(default_factory=dict)

    @property
    def failed(self) -> np.ndarray:
        return np.flatnonzero(self.failure_steps >= 0)

    @property
    def ok(self) -> np.ndarray:
        return self.failure_steps < 0

    @property
    def failure_count(self) -> int:
        return int(self.failed.size)

    def report(self) -> dict:
        return {
            "method": self.method,
            "N": int(self.samples.shape[0]),
            "failures": self.failure_count,
            "failed_chains": {int(i): int(self.failure_steps[i]) for i in self.failed},
            "runtime_seconds": self.runtime_seconds,
            "master_seed": self.master_seed,
            "block_size": self.block_size,
        }


def chain_rngs(master_seed, count: int) -> list[np.random.Generator]:
    """Independent per-chain generators spawned from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(master_seed).spawn(count)]


def batch_sample(
    prior: GmmPrior,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig | None,
    ys,
    geom,
    noise,
    N: int,
    master_seed=None,
    workers: int = 1,
    block_size: int = 64,
    max_failure_fraction: float = 0.01,
) -> BatchResult:
    """``N`` independent chains; ``ys`` is one sinogram ``(m,)`` or one per chain ``(N, m)``.

    Chains run in fixed-size blocks so the output does not depend on ``workers``.
    """
    guidance = guidance or GuidanceConfig()
    if int(N) != N or N < 1:
        raise InvalidArgumentError(f"number of chains must be >= 1, got {N}")
    if workers < 1 or block_size < 1:
        raise InvalidArgumentError("workers and block_size must be >= 1")
    _check_inputs(guidance, ys, geom, noise)
    N = int(N)
    ys = _as_measurements(ys)
    if ys is not None and ys.ndim == 2 and ys.shape[0] != N:
        raise InvalidArgumentError(f"got {ys.shape[0]} measurements for {N} chains")
    if guidance.method in ("pig", "exact"):
        geom.gram_spectrum  # build the shared factorisation before threads start
    if guidance.method == "mcg" and guidance.mcg_pseudo_inverse == "dense":
        geom._pinv
    rngs = chain_rngs(master_seed, N)
    blocks = [np.arange(s, min(s + block_size, N)) for s in range(0, N, block_size)]

    def run(idx):
        yb = ys[idx] if ys is not None and ys.ndim == 2 else ys
        return _run_chains(prior, schedule, guidance, yb, geom, noise, [rngs[i] for i in idx])

    start = time.perf_counter()
    if workers == 1:
        results = [run(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, blocks))
    elapsed = time.perf_counter() - start
    samples = np.concatenate([r[0] for r in results])
    steps = np.concatenate([r[1] for r in results])
    result = BatchResult(samples, steps, elapsed, master_seed, block_size, guidance.method)
    if result.failure_count > max_failure_fraction * N:
        raise BatchFailureError(
            f"{result.failure_count}/{N} chains failed with method {guidance.method!r}",
            result.report(),
        )
    return result
