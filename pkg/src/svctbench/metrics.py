"""Posterior evaluation criteria: NMC, kernel MMD, Gaussian-Frechet distance and 1-D marginal tools."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import wasserstein_distance

from .errors import InvalidArgumentError

__all__ = [
    "KernelSpec",
    "MmdResult",
    "Histogram",
    "EvalReport",
    "CSV_COLUMNS",
    "nmc",
    "nmc_band",
    "mmd2",
    "frechet_gaussian",
    "pixel_histogram",
    "wasserstein1_1d",
]

CSV_COLUMNS = ("method", "p", "N", "nmc", "pps_mmd", "pps_mmd_null95", "pps_fd", "runtime_s", "failures")


def nmc(samples, sinograms, geom, noise) -> float:
    """Normalised average measurement consistency; 1 under the true posterior."""
    xs = np.atleast_2d(np.asarray(samples, dtype=float))
    ys = np.atleast_2d(np.asarray(getattr(sinograms, "values", sinograms), dtype=float))
    if xs.shape[0] == 0 or ys.shape[0] == 0:
        raise InvalidArgumentError("NMC needs at least one sample/sinogram pair")
    if xs.shape[0] != ys.shape[0]:
        raise InvalidArgumentError(f"{xs.shape[0]} samples but {ys.shape[0]} sinograms")
    if ys.shape[1] != geom.m:
        raise InvalidArgumentError("sinogram length does not match the geometry")
    sigma_y = float(getattr(noise, "sigma_y", noise))
    if not sigma_y > 0:
        raise InvalidArgumentError("sigma_y must be > 0")
    res = ys - geom.forward(xs)
    return float(np.sum(res * res) / (xs.shape[0] * geom.m * sigma_y**2))


def nmc_band(N: int, m: int, k: float = 3.0) -> float:
    """Half-width ``k * sqrt(2 / (N m))`` of the chi-square concentration band around 1."""
    return k * math.sqrt(2.0 / (N * m))


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    bandwidth: float | str = "median-heuristic"

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise InvalidArgumentError(f"unknown kernel {self.kind!r}")
        if self.bandwidth != "median-heuristic" and not (
            isinstance(self.bandwidth, (int, float)) and self.bandwidth > 0
        ):
            raise InvalidArgumentError("bandwidth must be > 0 or 'median-heuristic'")


def median_bandwidth(z: np.ndarray, subsample: int = 1000, seed: int = 0) -> float:
    """Median pairwise distance over a fixed random subsample of the pooled set."""
    if z.shape[0] > subsample:
        idx = np.random.default_rng(seed).choice(z.shape[0], subsample, replace=False)
        z = z[np.sort(idx)]
    med = float(np.median(pdist(z)))
    return med if med > 0 else 1.0


def _gram(z, kernel: KernelSpec, bandwidth):
    g = z @ z.T
    if kernel.kind == "linear":
        return g
    sq = np.diag(g)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * g, 0.0)
    return np.exp(-d2 / (2.0 * bandwidth**2))


@dataclass
class MmdResult:
    estimate: float
    null: np.ndarray = field(repr=False)
    bandwidth: float | None
    biased: bool

    @property
    def null95(self) -> float:
        return self.null_quantile(0.95)

    def null_quantile(self, q: float) -> float:
        return float(np.quantile(self.null, q))

    @property
    def p_value(self) -> float:
        return float((1 + np.sum(self.null >= self.estimate)) / (1 + self.null.size))

    def __iter__(self):
        yield self.estimate
        yield self.null95


def _mmd_from_labels(kmat, labels, n_a, biased):
    """Squared MMD for every label column (1 = set A) of ``labels``."""
    s = labels.astype(float)
    ks = kmat @ s
    ss = np.sum(s * ks, axis=0)
    total = kmat.sum()
    one_ks = ks.sum(axis=0)
    tt = total - 2 * one_ks + ss
    st = one_ks - ss
    n_b = kmat.shape[0] - n_a
    if biased:
        return ss / n_a**2 + tt / n_b**2 - 2 * st / (n_a * n_b)
    diag = np.diag(kmat)
    da = diag @ s
    db = diag.sum() - da
    return (ss - da) / (n_a * (n_a - 1)) + (tt - db) / (n_b * (n_b - 1)) - 2 * st / (n_a * n_b)


def mmd2(
    set_a,
    set_b,
    kernel: KernelSpec | None = None,
    num_permutations: int = 200,
    seed: int = 0,
    biased: bool = False,
) -> MmdResult:
    """Squared MMD (unbiased U-statistic by default) plus a label-permutation null."""
    kernel = kernel or KernelSpec()
    a = np.asarray(set_a, dtype=float)
    b = np.asarray(set_b, dtype=float)
    a = a.reshape(a.shape[0], -1) if a.ndim != 1 else a[:, None]
    b = b.reshape(b.shape[0], -1) if b.ndim != 1 else b[:, None]
    need = 1 if biased else 2
    if a.shape[0] < need or b.shape[0] < need:
        raise InvalidArgumentError(f"each set needs at least {need} points")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgumentError("sets live in different dimensions")
    z = np.concatenate([a, b])
    bw = None
    if kernel.kind == "rbf":
        bw = median_bandwidth(z) if kernel.bandwidth == "median-heuristic" else float(kernel.bandwidth)
    kmat = _gram(z, kernel, bw)
    n_a = a.shape[0]
    labels = np.zeros((z.shape[0], 1), dtype=bool)
    labels[:n_a, 0] = True
    est = float(_mmd_from_labels(kmat, labels, n_a, biased)[0])
    rng = np.random.default_rng(seed)
    perms = np.zeros((z.shape[0], num_permutations), dtype=bool)
    for j in range(num_permutations):
        perms[rng.permutation(z.shape[0])[:n_a], j] = True
    null = _mmd_from_labels(kmat, perms, n_a, biased) if num_permutations else np.array([])
    return MmdResult(est, np.asarray(null), bw, biased)


def _psd_sqrt(c):
    lam, v = np.linalg.eigh(0.5 * (c + c.T))
    return (v * np.sqrt(np.clip(lam, 0.0, None))) @ v.T


def frechet_gaussian(set_a, set_b, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two sample sets.

    ``||mu_a - mu_b||^2 + tr(C_a + C_b - 2 (C_a^{1/2} C_b C_a^{1/2})^{1/2})``;
    ``eps * I`` is added to both covariances when a set has no more points than dimensions.
    """
    a = np.asarray(set_a, dtype=float)
    b = np.asarray(set_b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a.reshape(a.shape[0], -1)
    b = b[:, None] if b.ndim == 1 else b.reshape(b.shape[0], -1)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InvalidArgumentError("each set needs at least 2 points")
    dim = a.shape[1]
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))
    if min(a.shape[0], b.shape[0]) <= dim:
        ca = ca + eps * np.eye(dim)
        cb = cb + eps * np.eye(dim)
    diff = a.mean(axis=0) - b.mean(axis=0)
    root_a = _psd_sqrt(ca)
    cross = np.linalg.eigvalsh(root_a @ cb @ root_a)
    trace_cross = float(np.sum(np.sqrt(np.clip(cross, 0.0, None))))
    fd = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * trace_cross)
    return max(fd, 0.0)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    mass: np.ndarray

    @property
    def density(self) -> np.ndarray:
        return self.mass / np.diff(self.edges)

    @property
    def centres(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def cdf(self, x):
        cum = np.concatenate([[0.0], np.cumsum(self.mass)])
        return np.interp(x, self.edges, cum, left=0.0, right=1.0)


def pixel_histogram(samples, pixel_index: int, bins: int = 50) -> Histogram:
    xs = np.asarray(samples, dtype=float)
    if xs.size == 0:
        raise InvalidArgumentError("no samples to histogram")
    xs = xs.reshape(xs.shape[0], -1)
    if bins < 2:
        raise InvalidArgumentError("need at least 2 bins")
    if not 0 <= pixel_index < xs.shape[1]:
        raise InvalidArgumentError(f"pixel index {pixel_index} out of range")
    counts, edges = np.histogram(xs[:, pixel_index], bins=int(bins))
    return Histogram(edges, counts / counts.sum())


def _knots_and_cdf(obj):
    if isinstance(obj, Histogram):
        return obj.edges, obj.cdf, False
    if hasattr(obj, "cdf") and hasattr(obj, "support"):
        lo, hi = obj.support()
        return np.linspace(lo, hi, 20001), obj.cdf, False
    xs = np.sort(np.asarray(obj, dtype=float).ravel())
    if xs.size == 0:
        raise InvalidArgumentError("empty sample set")
    return xs, (lambda t: np.searchsorted(xs, t, side="right") / xs.size), True


def wasserstein1_1d(a, b) -> float:
    """1-Wasserstein distance as the L1 distance between CDFs.

    Each argument is a :class:`Histogram` (uniform mass within bins), a 1-D
    mixture with ``cdf``/``support`` methods, or raw samples. Exact for
    histograms and samples; analytic mixtures are integrated on a fine grid.
    """
    if not any(isinstance(o, Histogram) or hasattr(o, "cdf") for o in (a, b)):
        return float(wasserstein_distance(np.ravel(a), np.ravel(b)))
    ka, fa, step_a = _knots_and_cdf(a)
    kb, fb, step_b = _knots_and_cdf(b)
    t = np.unique(np.concatenate([ka, kb]))
    if t.size < 2:
        return 0.0
    lo_t, hi_t = t[:-1], t[1:]
    # values just inside each interval; step CDFs are constant on it
    da = fa(lo_t) if step_a else None
    db = fb(lo_t) if step_b else None
    d0 = (da if step_a else fa(lo_t)) - (db if step_b else fb(lo_t))
    d1 = (da if step_a else fa(hi_t)) - (db if step_b else fb(hi_t))
    h = hi_t - lo_t
    same = d0 * d1 >= 0
    denom = np.where(same, 1.0, np.abs(d0) + np.abs(d1))
    seg = np.where(same, 0.5 * h * (np.abs(d0) + np.abs(d1)), 0.5 * h * (d0 * d0 + d1 * d1) / denom)
    return float(np.sum(seg))


@dataclass
class EvalReport:
    method: str
    p: int
    N: int
    nmc: float | None = None
    pps_mmd: float | None = None
    pps_mmd_null_quantile: float | None = None
    pps_fd: float | None = None
    runtime_seconds: float = 0.0
    failure_count: int = 0
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.status == "ok":
            if self.nmc is not None and self.nmc < 0:
                raise InvalidArgumentError("nmc must be >= 0")
            if self.pps_fd is not None and self.pps_fd < 0:
                raise InvalidArgumentError("pps_fd must be >= 0")
            if self.pps_mmd is not None and not math.isfinite(self.pps_mmd):
                raise InvalidArgumentError("pps_mmd must be finite")

    def csv_row(self) -> list[str]:
        def num(v):
            return repr(float(v)) if v is not None else ""

        if self.status == "ok":
            metrics = [num(self.nmc), num(self.pps_mmd), num(self.pps_mmd_null_quantile), num(self.pps_fd)]
        else:
            metrics = [self.status] * 4
        return [
            self.method,
            str(self.p),
            str(self.N),
            *metrics,
            f"{self.runtime_seconds:.3f}",
            str(self.failure_count),
        ]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()
