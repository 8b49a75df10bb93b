"""Benchmark orchestration: prior -> data -> sinograms -> samplers -> metrics -> files.

Every random stream is derived from ``(master_seed, stream tag, ...)`` through
``numpy.random.SeedSequence``, so a cell's samples depend only on the config
and never on which other cells ran or how many worker threads were used.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BatchFailureError, ConfigError, InvalidArgumentError, SvctBenchError
from .gmm import GmmPrior, PhantomTemplateSet, make_phantoms, make_prior_from_templates
from .guidance import GuidanceConfig, batch_sample, make_schedule
from .metrics import EvalReport, frechet_gaussian, mmd2, nmc, pixel_histogram, reports_to_csv, wasserstein1_1d
from .oracle import PosteriorFactors, exact_posterior, pixel_marginal
from .tensorio import save_tensor
from .tomo import ImageGrid, calibrate_sigma_y, default_detector_count, make_geometry, simulate_measurements

log = logging.getLogger(__name__)

BENCH_METHODS = ("none", "mcg", "dps", "pig", "exact", "oracle")
SWEEPABLE = ("mcg", "dps")
LONG_RUNNING_SIDE = 64
LONG_RUNNING_N = 10000

# stream tags for seed derivation
_PHANTOMS, _PRIOR, _MEASURE, _CHAINS, _MMD, _HIST = range(6)


def derive_seed(master: int, *tags: int) -> int:
    """A 64-bit seed that depends only on the master seed and the tag path."""
    state = np.random.SeedSequence([int(master), *map(int, tags)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def _method_tag(method: str) -> int:
    return BENCH_METHODS.index(method)


@dataclass
class ExperimentConfig:
    name: str = "default"
    grid_side: int = 32
    detectors: int | None = None
    projections: list = field(default_factory=lambda: [1, 3, 6, 12, 18, 30, 90, 180])
    methods: list = field(default_factory=lambda: ["mcg", "dps", "pig", "exact"])
    N: int = 2000
    K: int = 100
    sigma_min: float = 0.01
    sigma_max: float | None = None
    prior: dict = field(default_factory=lambda: {"templates": 3, "c": 0.01})
    master_seed: int = 0
    alpha_scale: dict = field(default_factory=dict)
    output_dir: str | None = None
    workers: int = 1
    block_size: int = 64
    pig_max_mp: int = 900
    mmd_permutations: int = 200
    mcg_pseudo_inverse: str = "fbp"
    mcg_projection: bool = False
    save_samples: bool = True

    def __post_init__(self):
        self.projections = [int(p) for p in self.projections]
        self.methods = [str(m) for m in self.methods]
        self.alpha_scale = {str(k): float(v) for k, v in dict(self.alpha_scale).items()}
        self.prior = dict(self.prior)

    def validate(self) -> "ExperimentConfig":
        problems = []
        for name in ("grid_side", "N", "K", "workers", "block_size", "pig_max_mp"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                problems.append(f"{name} must be a positive integer, got {value!r}")
        if self.detectors is not None and self.detectors < 1:
            problems.append(f"detectors must be positive, got {self.detectors}")
        if self.mmd_permutations < 0:
            problems.append("mmd_permutations must be >= 0")
        if not self.projections or min(self.projections) < 1:
            problems.append("projections must be a non-empty list of positive counts")
        elif self.projections != sorted(set(self.projections)):
            problems.append(f"projections must be strictly ascending, got {self.projections}")
        if not self.methods:
            problems.append("methods must not be empty")
        for m in self.methods:
            if m not in BENCH_METHODS:
                problems.append(f"unknown method {m!r}; choose from {BENCH_METHODS}")
        if len(set(self.methods)) != len(self.methods):
            problems.append("methods must not repeat")
        for m, a in self.alpha_scale.items():
            if m not in SWEEPABLE or not (a >= 0 and math.isfinite(a)):
                problems.append(f"alpha_scale entries need a method in {SWEEPABLE} and a finite value >= 0")
        if not (self.sigma_min > 0):
            problems.append(f"sigma_min must be positive, got {self.sigma_min}")
        if self.sigma_max is not None and not (self.sigma_min < self.sigma_max):
            problems.append(f"sigma_min ({self.sigma_min}) must be below sigma_max ({self.sigma_max})")
        if self.mcg_pseudo_inverse not in ("fbp", "dense"):
            problems.append("mcg_pseudo_inverse must be 'fbp' or 'dense'")
        problems.extend(_prior_spec_problems(self.prior))
        if problems:
            raise ConfigError("invalid experiment config: " + "; ".join(problems))
        return self

    @property
    def run_id(self) -> str:
        return f"{self.name}-s{self.master_seed}"

    @property
    def long_running(self) -> bool:
        return self.grid_side >= LONG_RUNNING_SIDE or self.N >= LONG_RUNNING_N

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = cls.from_dict(doc)
        if "file" in cfg.prior and not Path(cfg.prior["file"]).is_absolute():
            cfg.prior["file"] = str(Path(path).parent / cfg.prior["file"])
        return cfg.validate()


def _prior_spec_problems(spec: dict) -> list[str]:
    if "file" in spec:
        extra = set(spec) - {"file"}
        return [f"prior file spec takes no other keys, got {sorted(extra)}"] if extra else []
    out = []
    extra = set(spec) - {"templates", "c", "seed"}
    if extra:
        out.append(f"unknown prior keys {sorted(extra)}")
    t = spec.get("templates")
    if not isinstance(t, int) or t < 1:
        out.append(f"prior.templates must be a positive integer, got {t!r}")
    c = spec.get("c")
    if not isinstance(c, (int, float)) or not c > 0:
        out.append(f"prior.c must be positive, got {c!r}")
    return out


# building blocks


@dataclass
class Setting:
    """Everything shared by the cells of one run."""

    cfg: ExperimentConfig
    grid: ImageGrid
    prior: GmmPrior
    templates: PhantomTemplateSet | None
    schedule: object
    X: np.ndarray
    noise: object

    @property
    def detectors(self) -> int:
        return self.cfg.detectors or default_detector_count(self.cfg.grid_side)


def build_prior(cfg: ExperimentConfig) -> tuple[GmmPrior, PhantomTemplateSet | None]:
    grid = ImageGrid(cfg.grid_side)
    spec = cfg.prior
    if "file" in spec:
        try:
            prior = GmmPrior.from_json(Path(spec["file"]).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read prior file: {exc}") from exc
        if prior.n != grid.n:
            raise ConfigError(f"prior has dimension {prior.n}, grid needs {grid.n}")
        return prior, None
    seed = spec.get("seed", derive_seed(cfg.master_seed, _PHANTOMS))
    tpl = make_phantoms(grid, spec["templates"], seed)
    return make_prior_from_templates(tpl, spec["c"]), tpl


def default_sigma_max(prior: GmmPrior) -> float:
    """Ten times the prior's spread about the origin, where chains are initialised."""
    return 10.0 * prior.origin_envelope


def prepare(cfg: ExperimentConfig) -> Setting:
    cfg.validate()
    prior, tpl = build_prior(cfg)
    sigma_max = cfg.sigma_max if cfg.sigma_max is not None else default_sigma_max(prior)
    if not cfg.sigma_min < sigma_max:
        raise ConfigError(f"sigma_min ({cfg.sigma_min}) must be below sigma_max ({sigma_max})")
    schedule = make_schedule(cfg.sigma_min, sigma_max, cfg.K)
    grid = ImageGrid(cfg.grid_side)
    X = prior.sample(cfg.N, derive_seed(cfg.master_seed, _PRIOR))
    noise = calibrate_sigma_y(X, grid, cfg.detectors)
    return Setting(cfg, grid, prior, tpl, schedule, X, noise)


def guidance_for(cfg: ExperimentConfig, method: str) -> GuidanceConfig:
    return GuidanceConfig(
        method=method,
        alpha_scale=cfg.alpha_scale.get(method, 1.0),
        mcg_pseudo_inverse=cfg.mcg_pseudo_inverse,
        mcg_projection=cfg.mcg_projection,
    )


def draw_samples(st: Setting, method: str, ys, geom, N: int, seed: int, workers: int):
    """Posterior draws for one cell; returns ``(samples, failure_steps, runtime)``."""
    if method == "oracle":
        start = time.perf_counter()
        factors = PosteriorFactors(st.prior, geom, st.noise)
        ys2 = np.broadcast_to(ys, (N, geom.m)) if np.ndim(ys) == 1 else ys
        samples = factors.sample(ys2, seed)
        return samples, np.full(N, -1), time.perf_counter() - start
    res = batch_sample(
        st.prior,
        st.schedule,
        guidance_for(st.cfg, method),
        ys,
        geom,
        st.noise,
        N,
        master_seed=seed,
        workers=workers,
        block_size=st.cfg.block_size,
    )
    return res.samples, res.failure_steps, res.runtime_seconds


def run_cell(st: Setting, method: str, p: int, Y: np.ndarray, geom, workers: int, sample_dir=None) -> EvalReport:
    """One (method, p) entry. Failures are recorded in the report, never raised."""
    cfg = st.cfg
    N = st.X.shape[0]
    if method == "pig" and geom.m > cfg.pig_max_mp:
        return EvalReport(method, p, N, status="skipped", extra={"reason": f"m_p={geom.m} > cap {cfg.pig_max_mp}"})
    seed = derive_seed(cfg.master_seed, _CHAINS, _method_tag(method), p)
    try:
        samples, steps, runtime = draw_samples(st, method, Y, geom, N, seed, workers)
    except BatchFailureError as exc:
        return EvalReport(method, p, N, failure_count=len(exc.report.get("failed_chains", {})), status="failed",
                          extra={"error": str(exc), "compute_failure": True, "chain_seed": seed})
    except (SvctBenchError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        log.warning("cell (%s, p=%d) failed: %s", method, p, exc)
        return EvalReport(method, p, N, status="failed", extra={"error": f"{type(exc).__name__}: {exc}",
                                                                "chain_seed": seed})
    ok = np.all(np.isfinite(samples), axis=1)
    kept = samples[ok]
    extra = {"chain_seed": seed, "failed_chains": {int(i): int(steps[i]) for i in np.flatnonzero(~ok)}}
    try:
        score = nmc(kept, Y[ok], geom, st.noise)
        mmd = mmd2(st.X, kept, num_permutations=cfg.mmd_permutations, seed=derive_seed(cfg.master_seed, _MMD, p) % 2**32)
        fd = frechet_gaussian(st.X, kept)
    except (SvctBenchError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        return EvalReport(method, p, N, runtime_seconds=runtime, failure_count=int((~ok).sum()), status="failed",
                          extra={**extra, "error": f"metrics: {type(exc).__name__}: {exc}"})
    extra["mmd_bandwidth"] = mmd.bandwidth
    extra["mmd_p_value"] = mmd.p_value
    if sample_dir is not None:
        save_tensor(
            Path(sample_dir) / f"{method}_{p}.bin",
            samples,
            meta={"method": method, "p": p, "grid_side": cfg.grid_side, "chain_seed": seed},
        )
    return EvalReport(
        method, p, N,
        nmc=score,
        pps_mmd=mmd.estimate,
        pps_mmd_null_quantile=mmd.null95,
        pps_fd=fd,
        runtime_seconds=runtime,
        failure_count=int((~ok).sum()),
        extra=extra,
    )


def output_root(cfg: ExperimentConfig, out: str | os.PathLike | None = None) -> Path:
    if out is not None:
        return Path(out)
    env = os.environ.get("BENCH_OUT")
    if env:
        return Path(env)
    return Path(cfg.output_dir or "out")


def run_benchmark(cfg: ExperimentConfig, out=None, workers: int | None = None, write: bool = True) -> list[EvalReport]:
    """The full protocol. Writes ``report.csv``, ``report.json``, ``manifest.json`` and
    ``summary.md`` (plus per-cell samples) under ``<root>/<run_id>/`` when ``write``."""
    started = time.perf_counter()
    st = prepare(cfg)
    if cfg.long_running:
        log.warning("config %s is full-scale and will run for a long time", cfg.name)
    workers = workers or cfg.workers
    run_dir = output_root(cfg, out) / cfg.run_id
    sample_dir = run_dir / "samples" if (write and cfg.save_samples) else None
    reports = []
    measurement_seeds = {}
    for p in cfg.projections:
        geom = make_geometry(st.grid, p, cfg.detectors)
        measurement_seeds[p] = derive_seed(cfg.master_seed, _MEASURE, p)
        Y = simulate_measurements(st.X, geom, st.noise, measurement_seeds[p])
        for method in cfg.methods:
            rep = run_cell(st, method, p, Y, geom, workers, sample_dir)
            log.info("%s p=%d status=%s nmc=%s", method, p, rep.status, rep.nmc)
            reports.append(rep)
    if write:
        manifest = {
            "package_version": __version__,
            "run_id": cfg.run_id,
            "config": cfg.to_dict(),
            "sigma_y": st.noise.sigma_y,
            "schedule": st.schedule.to_dict(),
            "detectors": st.detectors,
            "seeds": {
                "master": cfg.master_seed,
                "prior_samples": derive_seed(cfg.master_seed, _PRIOR),
                "measurements": {str(p): s for p, s in measurement_seeds.items()},
                "chains": {r.method + f"_{r.p}": r.extra.get("chain_seed") for r in reports},
                "derivation": "SeedSequence([master, stream, method_index, p]); streams: "
                              "0 phantoms, 1 prior samples, 2 measurements, 3 chains, 4 mmd, 5 histograms",
            },
            "cells": [{"method": r.method, "p": r.p, "status": r.status, "failures": r.failure_count,
                       **{k: v for k, v in r.extra.items() if k != "failed_chains"}} for r in reports],
            "workers": workers,
            "total_runtime_seconds": time.perf_counter() - started,
        }
        write_outputs(run_dir, reports, manifest, summarize(reports, st))
    return reports


def write_outputs(run_dir: Path, reports, manifest: dict, summary: str):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.csv").write_text(reports_to_csv(reports))
    (run_dir / "report.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (run_dir / "summary.md").write_text(summary)


def any_compute_failure(reports) -> bool:
    return any(r.status == "failed" for r in reports)


# qualitative observations


def _rows(reports, method):
    return sorted((r for r in reports if r.method == method and r.status == "ok"), key=lambda r: r.p)


def summarize(reports, st: Setting | None = None) -> str:
    """Markdown run summary listing observations about each method, without pass/fail verdicts."""
    lines = ["# Run summary", ""]
    if st is not None:
        lines += [
            f"- grid {st.cfg.grid_side}x{st.cfg.grid_side}, detectors {st.detectors}, N = {st.X.shape[0]}, K = {st.cfg.K}",
            f"- sigma_y = {st.noise.sigma_y:.6g}, sigma in [{st.schedule.sigma_min:g}, {st.schedule.sigma_max:.6g}]",
            f"- alpha_scale {st.cfg.alpha_scale or {}} (absent methods use 1, the handcrafted weights; "
            "`bench sweep-alpha` tunes them)",
            "",
        ]
    lines += ["| method | p | NMC | PPS_MMD | MMD null 95% | PPS_FD | status |", "|---|---|---|---|---|---|---|"]
    for r in reports:
        if r.status == "ok":
            lines.append(f"| {r.method} | {r.p} | {r.nmc:.4g} | {r.pps_mmd:.3g} | {r.pps_mmd_null_quantile:.3g} "
                         f"| {r.pps_fd:.3g} | ok |")
        else:
            lines.append(f"| {r.method} | {r.p} | - | - | - | - | {r.status} |")
    lines += ["", "## Observations", ""]
    lines += _observations(reports)
    return "\n".join(lines) + "\n"


def _observations(reports) -> list[str]:
    obs = []
    mcg = _rows(reports, "mcg")
    if len(mcg) >= 2:
        trend = "decreases" if mcg[0].nmc < mcg[-1].nmc else "does not decrease"
        obs.append(f"- MCG: NMC {trend} as p drops ({mcg[-1].nmc:.3g} at p={mcg[-1].p}, "
                   f"{mcg[0].nmc:.3g} at p={mcg[0].p}).")
    pig = _rows(reports, "pig")
    if pig:
        big = [r.p for r in pig if r.nmc > 2]
        small_pps = [r.p for r in pig if r.pps_mmd <= r.pps_mmd_null_quantile]
        obs.append(f"- PiG: NMC > 2 at p in {big or 'none'}; PPS_MMD within its null 95% at p in "
                   f"{small_pps or 'none'}; NMC range {min(r.nmc for r in pig):.3g} to {max(r.nmc for r in pig):.3g}.")
    approx = [m for m in ("mcg", "dps", "pig") if _rows(reports, m)]
    if approx:
        ps = sorted({r.p for m in approx for r in _rows(reports, m)})
        wins = {}
        for p in ps:
            cands = [r for m in approx for r in _rows(reports, m) if r.p == p]
            best = min(cands, key=lambda r: abs(math.log(max(r.nmc, 1e-300))))
            wins[p] = best.method
        counts = {m: sum(1 for v in wins.values() if v == m) for m in approx}
        obs.append("- NMC nearest 1 among approximate methods: "
                   + ", ".join(f"p={p}: {m}" for p, m in wins.items())
                   + f" (DPS closest in {counts.get('dps', 0)} of {len(ps)}).")
    exact = _rows(reports, "exact")
    if exact:
        obs.append("- exact guidance: NMC " + ", ".join(f"{r.nmc:.4f} (p={r.p})" for r in exact)
                   + "; MMD below null 95% at p in "
                   + str([r.p for r in exact if r.pps_mmd <= r.pps_mmd_null_quantile]) + ".")
    skipped = [r.p for r in reports if r.status == "skipped"]
    if skipped:
        obs.append(f"- skipped (solver cap): PiG at p in {skipped}.")
    failed = [(r.method, r.p) for r in reports if r.status == "failed"]
    if failed:
        obs.append(f"- failed cells: {failed}.")
    return obs or ["- no completed cells."]


# alpha sweep


def sweep_alpha(cfg: ExperimentConfig, method: str, p: int, alpha_grid, N: int = 500, out=None,
                workers: int | None = None, write: bool = True) -> list[dict]:
    """Rerun one (method, p) cell per alpha value, sorted by ``|nmc - 1|``.

    Every grid value reuses the same prior samples, sinograms and chain seed, so
    the row for alpha 1 equals the benchmark cell run at the same ``N``.
    """
    if method not in SWEEPABLE:
        raise InvalidArgumentError(f"alpha can only be swept for {SWEEPABLE}, not {method!r}")
    alpha_grid = [float(a) for a in alpha_grid]
    if not alpha_grid or any(not (a >= 0 and math.isfinite(a)) for a in alpha_grid):
        raise InvalidArgumentError("alpha grid must be a non-empty list of finite values >= 0")
    base = dataclasses.replace(cfg, N=int(N), projections=[int(p)], methods=[method], save_samples=False)
    st = prepare(base)
    geom = make_geometry(st.grid, int(p), cfg.detectors)
    Y = simulate_measurements(st.X, geom, st.noise, derive_seed(cfg.master_seed, _MEASURE, p))
    rows = []
    for a in alpha_grid:
        cell_cfg = dataclasses.replace(base, alpha_scale={**base.alpha_scale, method: a})
        rep = run_cell(dataclasses.replace(st, cfg=cell_cfg), method, int(p), Y, geom, workers or cfg.workers)
        rows.append({"alpha_scale": a, "nmc": rep.nmc, "pps_mmd": rep.pps_mmd, "pps_fd": rep.pps_fd,
                     "status": rep.status, "chain_seed": rep.extra.get("chain_seed")})
    rows.sort(key=lambda r: abs(r["nmc"] - 1) if r["nmc"] is not None else math.inf)
    if write:
        run_dir = output_root(cfg, out) / cfg.run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["alpha_scale", "nmc", "pps_mmd", "pps_fd", "status"])
        for r in rows:
            writer.writerow([repr(r["alpha_scale"]), *(repr(r[k]) if r[k] is not None else "" for k in
                                                       ("nmc", "pps_mmd", "pps_fd")), r["status"]])
        stem = f"sweep_{method}_p{p}"
        (run_dir / f"{stem}.csv").write_text(buf.getvalue())
        (run_dir / f"{stem}.manifest.json").write_text(json.dumps({
            "config": base.to_dict(),
            "sigma_y": st.noise.sigma_y,
            "alpha_grid": alpha_grid,
            "seeds": "every alpha value reuses the cell's chain seed "
                     "SeedSequence([master, 3, method_index, p]), so rows differ only through alpha",
            "rows": rows,
        }, indent=2, sort_keys=True))
    return rows


# histogram export


def export_histograms(cfg: ExperimentConfig, method: str, projections, pixel_indices, num_samples: int = 10000,
                      bins: int = 60, out=None, workers: int | None = None) -> dict:
    """Per-pixel sample histograms for one fixed conditioning image, plus the exact marginals.

    Returns the sidecar document (also written as ``histograms.json``) holding
    W1 distances between each histogram and the analytic posterior marginal.
    """
    pixel_indices = [int(i) for i in pixel_indices]
    if not pixel_indices:
        raise InvalidArgumentError("need at least one pixel index")
    if method not in BENCH_METHODS or method == "none":
        raise InvalidArgumentError(f"unknown posterior method {method!r}")
    base = dataclasses.replace(cfg, N=1)
    st = prepare(base)
    bad = [i for i in pixel_indices if not 0 <= i < st.grid.n]
    if bad:
        raise InvalidArgumentError(f"pixel indices out of range [0, {st.grid.n}): {bad}")
    x_true = st.prior.sample(1, derive_seed(cfg.master_seed, _HIST, 0))[0]
    run_dir = output_root(cfg, out) / cfg.run_id / "histograms"
    run_dir.mkdir(parents=True, exist_ok=True)
    sidecar = {"method": method, "num_samples": int(num_samples), "sigma_y": st.noise.sigma_y,
               "truth_seed": derive_seed(cfg.master_seed, _HIST, 0), "entries": []}
    for p in projections:
        p = int(p)
        geom = make_geometry(st.grid, p, cfg.detectors)
        y = simulate_measurements(x_true[None], geom, st.noise, derive_seed(cfg.master_seed, _HIST, 1, p))[0]
        seed = derive_seed(cfg.master_seed, _HIST, 2, _method_tag(method), p)
        samples, _, _ = draw_samples(st, method, y, geom, int(num_samples), seed, workers or cfg.workers)
        samples = samples[np.all(np.isfinite(samples), axis=1)]
        post = exact_posterior(st.prior, geom, st.noise, y)
        for idx in pixel_indices:
            hist = pixel_histogram(samples, idx, bins)
            marg = pixel_marginal(post, idx)
            _write_csv(run_dir / f"{method}_p{p}_px{idx}.csv", ["left", "right", "mass", "density"],
                       zip(hist.edges[:-1], hist.edges[1:], hist.mass, hist.density))
            lo, hi = marg.support()
            xs = np.linspace(lo, hi, 400)
            _write_csv(run_dir / f"oracle_p{p}_px{idx}.csv", ["x", "pdf"], zip(xs, marg.pdf(xs)))
            w1_hist = wasserstein1_1d(hist, marg)
            w1_samples = wasserstein1_1d(samples[:, idx], marg)
            sidecar["entries"].append({
                "p": p, "pixel": idx, "w1_histogram": w1_hist, "w1_samples": w1_samples,
                "oracle_std": marg.std, "sample_mean": float(samples[:, idx].mean()),
                "sample_std": float(samples[:, idx].std(ddof=1)), "oracle_mean": marg.mean,
                "truth": float(x_true[idx]), "chain_seed": seed,
            })
    (run_dir / "histograms.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def export_phantoms(cfg: ExperimentConfig, out=None) -> Path:
    """Write the template images and the prior built from them."""
    cfg.validate()
    prior, tpl = build_prior(cfg)
    run_dir = output_root(cfg, out) / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    if tpl is not None:
        save_tensor(run_dir / "templates.bin", tpl.templates, meta={"grid_side": cfg.grid_side})
    (run_dir / "prior.json").write_text(prior.to_json())
    return run_dir
