"""Gibbs sampler for the hierarchical model and the Moran-basis baseline.

Every block is drawn from its exact conjugate full conditional, in the fixed
order mu, beta, delta, sigma2, sigma2_eta, phi. Chains get independent
streams derived from one 64-bit seed through ``numpy.random.SeedSequence``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import partial

import numpy as np
import pandas as pd
import scipy.linalg as sla

from ._parallel import pmap
from .basis import JitterPolicy, eigendecompose_moran, laplacian_scale, moran_operator, spectral_with_jitter
from .errors import ChainError, InvalidArgumentError, NumericalError
from .model import ChainState, ModelSpec, PriorSpec, ig_mean

STREAM_CHAIN = 0
STREAM_PREDICT = 1
STREAM_SIMULATE = 2

QUANTILES = (0.025, 0.5, 0.975)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key...)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 5000
    burnin: int = 1000
    thin: int = 1
    seed: int = 0
    chains: int = 1
    init: str = "least-squares"

    def __post_init__(self):
        if self.iterations <= 0:
            raise InvalidArgumentError("iterations must be positive")
        if not (0 <= self.burnin < self.iterations):
            raise InvalidArgumentError("burnin must satisfy 0 <= burnin < iterations")
        if self.thin < 1:
            raise InvalidArgumentError("thin must be at least 1")
        if self.chains < 1:
            raise InvalidArgumentError("chains must be at least 1")
        if not (0 <= self.seed < 2**64):
            raise InvalidArgumentError("seed must be an unsigned 64-bit integer")
        if self.init not in ("least-squares", "prior-draw"):
            raise InvalidArgumentError(f"unknown init {self.init!r}")
        if self.retained < 10:
            raise InvalidArgumentError(f"only {self.retained} draws would be retained; need at least 10")

    @property
    def retained(self) -> int:
        return (self.iterations - self.burnin) // self.thin


# -- full conditionals -------------------------------------------------------

def _chol(P: np.ndarray, what: str) -> np.ndarray:
    try:
        return sla.cholesky(P, lower=True)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(P)
        raise NumericalError(f"{what} precision is not positive definite (condition ~{cond:.3e})") from exc


def _draw_precision(rng, L: np.ndarray, mean: np.ndarray) -> np.ndarray:
    z = rng.standard_normal(mean.size)
    return mean + sla.solve_triangular(L, z, lower=True, trans="T")


def _solve_chol(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    return sla.cho_solve((L, True), b)


def _draw_ig(rng, shape: float, rate: float) -> float:
    return 1.0 / rng.gamma(shape, 1.0 / rate)


def mu_conditional(state: ChainState, spec: ModelSpec) -> tuple[np.ndarray, float]:
    """Mean vector and common variance of ``mu | rest``."""
    m = spec.X @ state.beta + spec.Lam @ state.delta
    if spec.y is None:
        return m, state.sigma2_eta
    s2, s2e = state.sigma2, state.sigma2_eta
    w = s2e / (s2 + s2e)
    return m + w * (spec.y - m), s2 * s2e / (s2 + s2e)


def sample_mu(state: ChainState, spec: ModelSpec, rng) -> np.ndarray:
    mean, var = mu_conditional(state, spec)
    return mean + np.sqrt(var) * rng.standard_normal(mean.size)


def beta_conditional(state: ChainState, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Mean and lower Cholesky factor of the precision of ``beta | rest``."""
    pr = spec.priors
    P = spec.XtX / state.sigma2_eta + np.eye(spec.p) / pr.beta_var
    b = spec.X.T @ (state.mu - spec.Lam @ state.delta) / state.sigma2_eta + spec.beta_mean / pr.beta_var
    L = _chol(P, "beta")
    return _solve_chol(L, b), L


def sample_beta(state: ChainState, spec: ModelSpec, rng) -> np.ndarray:
    mean, L = beta_conditional(state, spec)
    return _draw_precision(rng, L, mean)


def delta_conditional(state: ChainState, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Mean and lower Cholesky factor of the precision of ``delta | rest``."""
    P = spec.LtL / state.sigma2_eta + spec.prior_precision / state.phi
    b = spec.Lam.T @ (state.mu - spec.X @ state.beta) / state.sigma2_eta
    L = _chol(P, "delta")
    return _solve_chol(L, b), L


def sample_delta(state: ChainState, spec: ModelSpec, rng) -> np.ndarray:
    if spec.r == 0:
        return np.zeros(0)
    mean, L = delta_conditional(state, spec)
    return _draw_precision(rng, L, mean)


def sigma2_conditional(state: ChainState, spec: ModelSpec) -> tuple[float, float]:
    pr = spec.priors
    if spec.y is None:
        return pr.a_eps, pr.b_eps
    e = spec.y - state.mu
    return pr.a_eps + spec.n / 2.0, pr.b_eps + float(e @ e) / 2.0


def sample_sigma2(state: ChainState, spec: ModelSpec, rng) -> float:
    return _draw_ig(rng, *sigma2_conditional(state, spec))


def sigma2_eta_conditional(state: ChainState, spec: ModelSpec) -> tuple[float, float]:
    pr = spec.priors
    e = state.mu - spec.X @ state.beta - spec.Lam @ state.delta
    return pr.a_eta + spec.n / 2.0, pr.b_eta + float(e @ e) / 2.0


def sample_sigma2_eta(state: ChainState, spec: ModelSpec, rng) -> float:
    return _draw_ig(rng, *sigma2_eta_conditional(state, spec))


def phi_conditional(state: ChainState, spec: ModelSpec) -> tuple[float, float]:
    pr = spec.priors
    z = spec.cov_vecs.T @ state.delta
    return pr.a_phi + spec.r / 2.0, pr.b_phi + float(z @ (z / spec.cov_vals)) / 2.0


def sample_phi(state: ChainState, spec: ModelSpec, rng) -> float:
    return _draw_ig(rng, *phi_conditional(state, spec))


def gibbs_sweep(state: ChainState, spec: ModelSpec, rng) -> ChainState:
    """One systematic scan; returns a new state and leaves ``state`` untouched."""
    s = ChainState(state.beta, state.delta, state.mu, state.sigma2, state.sigma2_eta, state.phi)
    s.mu = sample_mu(s, spec, rng)
    s.beta = sample_beta(s, spec, rng)
    s.delta = sample_delta(s, spec, rng)
    s.sigma2 = sample_sigma2(s, spec, rng)
    s.sigma2_eta = sample_sigma2_eta(s, spec, rng)
    s.phi = sample_phi(s, spec, rng)
    return s


# -- initialisation ----------------------------------------------------------

def initial_state(spec: ModelSpec, how: str, rng) -> ChainState:
    pr = spec.priors
    if how == "prior-draw":
        beta = spec.beta_mean + np.sqrt(pr.beta_var) * rng.standard_normal(spec.p)
        phi = _draw_ig(rng, pr.a_phi, pr.b_phi)
        z = np.sqrt(phi * spec.cov_vals) * rng.standard_normal(spec.r)
        delta = spec.cov_vecs @ z
        s2 = _draw_ig(rng, pr.a_eps, pr.b_eps)
        s2e = _draw_ig(rng, pr.a_eta, pr.b_eta)
        mu = spec.X @ beta + spec.Lam @ delta + np.sqrt(s2e) * rng.standard_normal(spec.n)
        return ChainState(beta, delta, mu, s2, s2e, phi)
    if spec.y is None:
        beta = spec.beta_mean.copy()
        mu = spec.X @ beta
    else:
        beta = np.linalg.lstsq(spec.X, spec.y, rcond=None)[0]
        mu = spec.y.copy()
    return ChainState(
        beta,
        np.zeros(spec.r),
        mu,
        ig_mean(pr.a_eps, pr.b_eps),
        ig_mean(pr.a_eta, pr.b_eta),
        1.0,
    )


# -- posterior container -----------------------------------------------------

@dataclass
class PosteriorSamples:
    """Retained draws with shape ``(chains, draws, ...)`` per block.

    All blocks are Gibbs-updated, so ``acceptance`` is 1 by construction.
    """

    model: str
    beta: np.ndarray
    delta: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    sigma2_eta: np.ndarray
    phi: np.ndarray
    config: SamplerConfig | None = None
    acceptance: float = 1.0

    BLOCKS = ("beta", "delta", "mu", "sigma2", "sigma2_eta", "phi")

    @property
    def n_chains(self) -> int:
        return self.sigma2.shape[0]

    @property
    def n_draws(self) -> int:
        return self.sigma2.shape[1]

    def pooled(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])

    def state(self, chain: int, i: int) -> ChainState:
        return ChainState(
            self.beta[chain, i].copy(),
            self.delta[chain, i].copy(),
            self.mu[chain, i].copy(),
            float(self.sigma2[chain, i]),
            float(self.sigma2_eta[chain, i]),
            float(self.phi[chain, i]),
        )

    def scalar_columns(self) -> dict[str, np.ndarray]:
        """Named ``(chains, draws)`` arrays for every non-latent parameter."""
        cols = {}
        for j in range(self.beta.shape[2]):
            cols[f"beta[{j}]"] = self.beta[:, :, j]
        for k in range(self.delta.shape[2]):
            cols[f"delta[{k}]"] = self.delta[:, :, k]
        cols["sigma2"] = self.sigma2
        cols["sigma2_eta"] = self.sigma2_eta
        cols["phi"] = self.phi
        return cols

    def draws_frame(self) -> pd.DataFrame:
        cols = self.scalar_columns()
        c, d = self.n_chains, self.n_draws
        frame = {"chain": np.repeat(np.arange(c), d), "draw": np.tile(np.arange(d), c)}
        frame.update({k: v.reshape(-1) for k, v in cols.items()})
        return pd.DataFrame(frame)

    def summary(self, include_mu: bool = False) -> pd.DataFrame:
        cols = self.scalar_columns()
        if include_mu:
            for i in range(self.mu.shape[2]):
                cols[f"mu[{i}]"] = self.mu[:, :, i]
        rows = []
        for name, a in cols.items():
            flat = a.reshape(-1)
            q = np.quantile(flat, QUANTILES)
            row = {"parameter": name, "mean": flat.mean(), "sd": flat.std(ddof=1), "q2.5": q[0], "q50": q[1], "q97.5": q[2]}
            if self.n_chains > 1:
                row["rhat"] = gelman_rubin(a)
            rows.append(row)
        return pd.DataFrame(rows).set_index("parameter")


def merge_samples(parts: list[PosteriorSamples]) -> PosteriorSamples:
    """Stack chains from several runs of the same model."""
    first = parts[0]
    blocks = {b: np.concatenate([getattr(p, b) for p in parts], axis=0) for b in PosteriorSamples.BLOCKS}
    return PosteriorSamples(first.model, config=first.config, **blocks)


def gelman_rubin(a: np.ndarray) -> float:
    """Potential scale reduction for a ``(chains, draws)`` array."""
    m, n = a.shape
    means = a.mean(axis=1)
    B = n * means.var(ddof=1)
    Wv = a.var(axis=1, ddof=1).mean()
    if Wv == 0:
        return float("nan")
    var = (n - 1) / n * Wv + B / n
    return float(np.sqrt(var / Wv))


# -- chain runner ------------------------------------------------------------

def _run_one(spec: ModelSpec, cfg: SamplerConfig, chain: int) -> dict[str, np.ndarray]:
    rng = stream(cfg.seed, STREAM_CHAIN, chain)
    state = initial_state(spec, cfg.init, rng)
    state.validate()
    D = cfg.retained
    out = {
        "beta": np.empty((D, spec.p)),
        "delta": np.empty((D, spec.r)),
        "mu": np.empty((D, spec.n)),
        "sigma2": np.empty(D),
        "sigma2_eta": np.empty(D),
        "phi": np.empty(D),
    }
    k = 0
    for t in range(cfg.iterations):
        try:
            new = gibbs_sweep(state, spec, rng)
            if not (np.all(np.isfinite(new.mu)) and np.all(np.isfinite(new.delta)) and np.all(np.isfinite(new.beta))):
                raise NumericalError("non-finite draw")
            if not (new.sigma2 > 0 and new.sigma2_eta > 0 and new.phi > 0):
                raise NumericalError("variance draw underflowed to zero")
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            raise ChainError(f"chain {chain} failed: {exc}", t, state) from exc
        state = new
        if t >= cfg.burnin and (t - cfg.burnin + 1) % cfg.thin == 0 and k < D:
            out["beta"][k] = state.beta
            out["delta"][k] = state.delta
            out["mu"][k] = state.mu
            out["sigma2"][k] = state.sigma2
            out["sigma2_eta"][k] = state.sigma2_eta
            out["phi"][k] = state.phi
            k += 1
    return out


def run_chain(spec: ModelSpec, cfg: SamplerConfig, workers: int | None = None) -> PosteriorSamples:
    """Run ``cfg.chains`` independent Gibbs chains and keep thinned post-burn-in draws."""
    runs = pmap(partial(_run_one, spec, cfg), range(cfg.chains), workers)
    blocks = {b: np.stack([r[b] for r in runs]) for b in runs[0]}
    return PosteriorSamples(spec.name, config=cfg, **blocks)


# -- Moran-basis baseline ----------------------------------------------------

def moran_eigenvectors(layer, X) -> np.ndarray:
    M, _ = eigendecompose_moran(moran_operator(layer.W, X))
    return M


def hughes_haran_spec(
    layer,
    X,
    y,
    q: int,
    priors: PriorSpec | None = None,
    jitter: JitterPolicy = JitterPolicy(),
    M: np.ndarray | None = None,
) -> ModelSpec:
    """Baseline spec: ``omega = M_q delta_q`` with prior covariance ``phi (M_q' Q M_q)^-1``.

    ``M_q`` holds the ``q`` leading eigenvectors (largest eigenvalues) of the
    Moran operator. ``M`` may be passed to reuse an existing decomposition.
    """
    if not (0 <= q <= layer.n):
        raise InvalidArgumentError(f"q must be in [0, {layer.n}], got {q}")
    if M is None:
        M = moran_eigenvectors(layer, X)
    Mq = M[:, :q]
    A = Mq.T @ (layer.Q @ Mq)
    Psi, Phi, _ = spectral_with_jitter(A, jitter, reference=laplacian_scale(layer.Q, Mq))
    return ModelSpec(X, y, Mq, Psi, 1.0 / Phi, priors or PriorSpec(), name="moran-baseline")


def run_baseline_hughes_haran(
    layer,
    X,
    y,
    cfg: SamplerConfig,
    q: int,
    priors: PriorSpec | None = None,
    M: np.ndarray | None = None,
) -> PosteriorSamples:
    """Fit the reduced-rank Moran eigenvector model with ``q`` basis vectors."""
    return run_chain(hughes_haran_spec(layer, X, y, q, priors, M=M), cfg)


def config_dict(cfg: SamplerConfig) -> dict:
    return asdict(cfg)
