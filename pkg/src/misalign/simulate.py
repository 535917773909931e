"""Simulation study on overlapping regular lattices.

Truth lives on a fine lattice whose dimensions are multiples of both the fit
and the target lattice, so every coarse cell is an exact block average of
fine cells. Two standard-normal predictors and a smooth spatial field make up
the fine-scale mean surface; fit-cell responses add i.i.d. noise, target-cell
truths do not.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.signal import fftconvolve

from ._parallel import pmap
from .bundles import save_npz, write_csv, write_json
from .basis import JitterPolicy, hybrid_basis, knot_count, place_knots
from .errors import InvalidArgumentError
from .evaluate import ModelMetrics, StudyReport, config_hash, dic
from .geometry import ArealLayer, build_grid_layer, layer_to_geojson
from .model import ModelSpec, PriorSpec
from .predict import baseline_prediction_basis, build_prediction_basis, predictive_draws
from .sampler import STREAM_PREDICT, STREAM_SIMULATE, SamplerConfig, hughes_haran_spec, run_chain, stream

PROPOSED = "proposed"
BASELINE = "moran-baseline"


@dataclass(frozen=True)
class SimConfig:
    fit_dims: tuple[int, int] = (30, 30)
    target_dims: tuple[int, int] = (20, 20)
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 30.0, 30.0)
    fine_factor: int = 1
    beta_true: tuple[float, ...] = (1.0, 2.0, -1.0)
    sigma_noise: float = 0.3
    field_range: float = 0.2
    field_sd: float = 0.5
    knots: int | None = 85
    knot_fraction: float = 0.10
    contiguity: str = "rook"
    seed: int = 20240101
    replications: int = 10
    iterations: int = 5000
    burnin: int = 1000
    thin: int = 1
    chains: int = 1

    def __post_init__(self):
        for name in ("fit_dims", "target_dims", "bbox", "beta_true"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if min(self.fit_dims + self.target_dims) < 1 or self.fine_factor < 1:
            raise InvalidArgumentError("lattice dimensions must be positive")
        if len(self.beta_true) != 3:
            raise InvalidArgumentError("beta_true needs an intercept and two slopes")
        if self.sigma_noise < 0 or self.field_sd < 0 or self.field_range <= 0:
            raise InvalidArgumentError("noise sd, field sd must be >= 0 and range > 0")
        if self.replications < 1:
            raise InvalidArgumentError("replications must be at least 1")

    @property
    def fine_dims(self) -> tuple[int, int]:
        fx = math.lcm(self.fit_dims[0], self.target_dims[0]) * self.fine_factor
        fy = math.lcm(self.fit_dims[1], self.target_dims[1]) * self.fine_factor
        return fx, fy

    def sampler(self, seed: int) -> SamplerConfig:
        return SamplerConfig(self.iterations, self.burnin, self.thin, seed, self.chains)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InvalidArgumentError(f"unknown simulation settings: {', '.join(sorted(extra))}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class FineField:
    x1: np.ndarray
    x2: np.ndarray
    omega: np.ndarray
    mu: np.ndarray


@dataclass
class SimDataset:
    fit_layer: ArealLayer
    X: np.ndarray
    y: np.ndarray
    fit_truth: np.ndarray
    target_layer: ArealLayer
    X_star: np.ndarray
    truth_star: np.ndarray = field(repr=False)
    fine: FineField = field(repr=False)

    def write(self, out) -> list[Path]:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        fit = pd.DataFrame({"id": self.fit_layer.ids, "y": self.y, "x1": self.X[:, 1], "x2": self.X[:, 2], "mu_true": self.fit_truth})
        tgt = pd.DataFrame({"id": self.target_layer.ids, "x1": self.X_star[:, 1], "x2": self.X_star[:, 2], "truth": self.truth_star})
        for name, frame in (("fit_data.csv", fit), ("target_data.csv", tgt)):
            paths.append(write_csv(out / name, frame))
        for name, layer in (("fit", self.fit_layer), ("target", self.target_layer)):
            paths.append(write_json(out / f"{name}_layer.json", layer.to_manifest()))
            paths.append(write_json(out / f"{name}_layer.geojson", layer_to_geojson(layer)))
        paths.append(save_npz(out / "fine_field.npz", **asdict(self.fine)))
        return paths


def _field_kernel(radius: float) -> np.ndarray:
    h = max(radius, 1.0)
    H = int(math.ceil(h))
    ax = np.arange(-H, H + 1)
    d = np.hypot(ax[:, None], ax[None, :])
    k = np.where(d < h, (1.0 - (d / h) ** 2) ** 2, 0.0)
    return k / np.sqrt(np.sum(k * k))


def simulate_fine_field(cfg: SimConfig, rng) -> FineField:
    """Predictors, smooth field and mean surface on the fine lattice.

    The field is white noise convolved with a unit-norm bi-square kernel whose
    radius is ``field_range`` times the longer lattice side, so its marginal
    standard deviation is ``field_sd``.
    """
    fx, fy = cfg.fine_dims
    x1 = rng.standard_normal((fy, fx))
    x2 = rng.standard_normal((fy, fx))
    k = _field_kernel(cfg.field_range * max(fx, fy))
    H = k.shape[0] // 2
    noise = rng.standard_normal((fy + 2 * H, fx + 2 * H))
    omega = cfg.field_sd * fftconvolve(noise, k, mode="valid")
    b0, b1, b2 = cfg.beta_true
    mu = b0 + b1 * x1 + b2 * x2 + omega
    return FineField(x1, x2, omega, mu)


def aggregate_to_layer(fine: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    """Block means of a ``(fy, fx)`` array onto an ``nx x ny`` lattice, row-major."""
    fine = np.asarray(fine, dtype=float)
    fy, fx = fine.shape
    nx, ny = dims
    if fx % nx or fy % ny:
        raise InvalidArgumentError(f"fine lattice {fx}x{fy} is not divisible by {nx}x{ny}")
    return fine.reshape(ny, fy // ny, nx, fx // nx).mean(axis=(1, 3)).ravel()


def _design(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones_like(x1), x1, x2])


def make_dataset(cfg: SimConfig, rng) -> SimDataset:
    fine = simulate_fine_field(cfg, rng)
    fit = build_grid_layer(*cfg.fit_dims, cfg.bbox, rule=cfg.contiguity)
    tgt = build_grid_layer(*cfg.target_dims, cfg.bbox, rule=cfg.contiguity)
    X = _design(aggregate_to_layer(fine.x1, cfg.fit_dims), aggregate_to_layer(fine.x2, cfg.fit_dims))
    X_star = _design(aggregate_to_layer(fine.x1, cfg.target_dims), aggregate_to_layer(fine.x2, cfg.target_dims))
    fit_truth = aggregate_to_layer(fine.mu, cfg.fit_dims)
    y = fit_truth + cfg.sigma_noise * rng.standard_normal(fit.n)
    truth_star = aggregate_to_layer(fine.mu, cfg.target_dims)
    return SimDataset(fit, X, y, fit_truth, tgt, X_star, truth_star, fine)


def simulate_from_model(X, Lam, beta, delta, sigma2: float, sigma2_eta: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(y, mu)`` from the hierarchical model with the given parameters.

    ``mu = X beta + Lam delta + eta`` with ``eta ~ N(0, sigma2_eta I)`` and
    ``y = mu + eps`` with ``eps ~ N(0, sigma2 I)``.
    """
    X = np.asarray(X, dtype=float)
    Lam = np.asarray(Lam, dtype=float)
    n = X.shape[0]
    mu = X @ np.asarray(beta, dtype=float) + Lam @ np.asarray(delta, dtype=float)
    mu = mu + np.sqrt(sigma2_eta) * rng.standard_normal(n)
    y = mu + np.sqrt(sigma2) * rng.standard_normal(n)
    return y, mu


def replicate_seeds(cfg: SimConfig, rep: int) -> tuple[np.random.Generator, int]:
    """Data generator and sampler seed for one replication."""
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(STREAM_SIMULATE, rep))
    data_ss, chain_ss = ss.spawn(2)
    return np.random.default_rng(data_ss), int(chain_ss.generate_state(1, np.uint64)[0])


def fit_and_score(ds: SimDataset, cfg: SimConfig, seed: int, priors: PriorSpec | None = None, models=(PROPOSED, BASELINE)) -> dict[str, ModelMetrics]:
    """Fit each requested model on the fit lattice and score it on the target lattice."""
    priors = priors or PriorSpec()
    knots = place_knots(ds.fit_layer, cfg.knot_fraction, r=cfg.knots)
    basis = hybrid_basis(ds.fit_layer, ds.X, knots, JitterPolicy())
    scfg = cfg.sampler(seed)
    out = {}
    for name in models:
        if name == PROPOSED:
            spec = ModelSpec.from_hybrid(ds.X, ds.y, basis, priors)
            lam_star = build_prediction_basis(ds.target_layer, ds.X_star, knots, reference=knots).Lam
        elif name == BASELINE:
            spec = hughes_haran_spec(ds.fit_layer, ds.X, ds.y, knots.r, priors, M=basis.M)
            lam_star = baseline_prediction_basis(ds.target_layer, ds.X_star, knots.r)
        else:
            raise InvalidArgumentError(f"unknown model {name!r}")
        samples = run_chain(spec, scfg, workers=1)
        pred = predictive_draws(samples, ds.X_star, lam_star, stream(seed, STREAM_PREDICT), ids=ds.target_layer.ids)
        out[name] = ModelMetrics.from_results(pred, ds.truth_star, dic(samples, ds.y))
    return out


def _replication(args) -> dict[str, ModelMetrics]:
    cfg, rep = args
    rng, seed = replicate_seeds(cfg, rep)
    ds = make_dataset(cfg, rng)
    return fit_and_score(ds, cfg, seed)


def run_study(cfg: SimConfig, workers: int | None = None) -> StudyReport:
    """Fit both models on every replication and collect RMSE/DIC."""
    reps = pmap(_replication, [(cfg, k) for k in range(cfg.replications)], workers)
    meta = {"config": cfg.to_dict(), "seeds": [replicate_seeds(cfg, k)[1] for k in range(cfg.replications)]}
    meta["config_hash"] = config_hash(meta["config"])
    return StudyReport.from_replicates(reps, meta)


def knot_sensitivity(cfg: SimConfig, fractions, workers: int | None = None) -> tuple[pd.DataFrame, list[float]]:
    """RMSE per knot fraction; returns the table and wall-clock seconds per row."""
    n = cfg.fit_dims[0] * cfg.fit_dims[1]
    rows, runtimes = [], []
    for f in fractions:
        sub = replace(cfg, knots=None, knot_fraction=float(f))
        t0 = time.perf_counter()
        report = run_study(sub, workers)
        runtimes.append(time.perf_counter() - t0)
        p, b = report.models[PROPOSED], report.models[BASELINE]
        rows.append(
            {
                "fraction": float(f),
                "r": knot_count(n, f),
                "rmse_mean": p.rmse_mean,
                "rmse_lo": p.rmse_lo,
                "rmse_hi": p.rmse_hi,
                "dic": p.dic,
                "baseline_rmse_mean": b.rmse_mean,
                "baseline_dic": b.dic,
            }
        )
    return pd.DataFrame(rows), runtimes
