"""Hierarchical Gaussian model: data, process and parameter levels.

    y     | mu, sigma2          ~ N(mu, sigma2 I)
    mu    | beta, delta, s2eta  ~ N(X beta + Lam delta, s2eta I)
    delta | phi                 ~ N(0, phi * C),   C = Psi diag(g) Psi'
    beta  ~ N(mu_beta, s2beta I);  sigma2, s2eta, phi ~ Inverse-Gamma (shape, rate)

For the hybrid model ``C = Lam' Q Lam`` (jittered); other spatial priors
only change ``(Psi, g)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gammaln

from .basis import HybridBasis
from .errors import InvalidArgumentError

LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters. Inverse-gamma pairs are (shape, rate)."""

    beta_mean: float | np.ndarray = 0.0
    beta_var: float = 1e10
    a_eps: float = 2.0
    b_eps: float = 1.0
    a_eta: float = 2.0
    b_eta: float = 1.0
    a_phi: float = 2.0
    b_phi: float = 1.0

    def __post_init__(self):
        for name in ("a_eps", "b_eps", "a_eta", "b_eta", "a_phi", "b_phi", "beta_var"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InvalidArgumentError(f"prior {name} must be positive, got {v}")

    def beta_mean_vector(self, p: int) -> np.ndarray:
        m = np.asarray(self.beta_mean, dtype=float)
        if m.ndim and m.shape != (p,):
            raise InvalidArgumentError(f"prior mean for beta has {m.size} entries, the design has {p} columns")
        return np.array(np.broadcast_to(m, (p,)))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["beta_mean"] = np.asarray(self.beta_mean, dtype=float).tolist()
        return d


def ig_mean(a: float, b: float) -> float:
    """Mean of Inverse-Gamma(a, b), or the mode when the mean does not exist."""
    return b / (a - 1.0) if a > 1 else b / (a + 1.0)


def ig_logpdf(x: float, a: float, b: float) -> float:
    return a * np.log(b) - gammaln(a) - (a + 1.0) * np.log(x) - b / x


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Design, response, spatial basis and priors for one fit.

    ``cov_vecs``/``cov_vals`` give the spectral form of the coefficient prior
    covariance at ``phi = 1``. ``y=None`` switches the data level off, so the
    sampler draws from the prior.
    """

    X: np.ndarray
    y: np.ndarray | None
    Lam: np.ndarray
    cov_vecs: np.ndarray
    cov_vals: np.ndarray
    priors: PriorSpec = field(default_factory=PriorSpec)
    name: str = "proposed"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = X.shape[0]
        Lam = np.asarray(self.Lam, dtype=float).reshape(n, -1)
        r = Lam.shape[1]
        vecs = np.asarray(self.cov_vecs, dtype=float).reshape(r, r)
        vals = np.asarray(self.cov_vals, dtype=float).reshape(r)
        if np.any(vals <= 0):
            raise InvalidArgumentError("prior covariance eigenvalues must be positive")
        if self.y is not None:
            y = np.asarray(self.y, dtype=float).ravel()
            if y.shape != (n,):
                raise InvalidArgumentError(f"y has length {y.size}, X has {n} rows")
            if not np.all(np.isfinite(y)):
                raise InvalidArgumentError("y must be finite")
            object.__setattr__(self, "y", y)
        if not np.all(np.isfinite(X)):
            raise InvalidArgumentError("X must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Lam", Lam)
        object.__setattr__(self, "cov_vecs", vecs)
        object.__setattr__(self, "cov_vals", vals)

    @classmethod
    def from_hybrid(cls, X, y, basis: HybridBasis, priors: PriorSpec | None = None) -> "ModelSpec":
        return cls(X, y, basis.Lam, basis.Psi, basis.Phi, priors or PriorSpec(), name="proposed")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return self.Lam.shape[1]

    @cached_property
    def XtX(self) -> np.ndarray:
        return self.X.T @ self.X

    @cached_property
    def LtL(self) -> np.ndarray:
        return self.Lam.T @ self.Lam

    @cached_property
    def prior_precision(self) -> np.ndarray:
        """Inverse of the coefficient prior covariance at ``phi = 1``."""
        V = self.cov_vecs
        return (V / self.cov_vals) @ V.T

    @cached_property
    def beta_mean(self) -> np.ndarray:
        return self.priors.beta_mean_vector(self.p)


@dataclass
class ChainState:
    beta: np.ndarray
    delta: np.ndarray
    mu: np.ndarray
    sigma2: float
    sigma2_eta: float
    phi: float

    def validate(self) -> None:
        for name in ("sigma2", "sigma2_eta", "phi"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InvalidArgumentError(f"{name} must be positive and finite, got {v}")
        for name in ("beta", "delta", "mu"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidArgumentError(f"{name} has non-finite entries")

    def copy(self) -> "ChainState":
        return ChainState(self.beta.copy(), self.delta.copy(), self.mu.copy(), self.sigma2, self.sigma2_eta, self.phi)


def _normal_iso(resid: np.ndarray, var: float) -> float:
    k = resid.size
    return -0.5 * (k * (LOG2PI + np.log(var)) + float(resid @ resid) / var)


def log_joint_terms(state: ChainState, spec: ModelSpec) -> dict[str, float]:
    """Per-block log densities making up :func:`log_joint`."""
    state.validate()
    pr = spec.priors
    mean = spec.X @ state.beta + spec.Lam @ state.delta
    terms = {}
    terms["data"] = 0.0 if spec.y is None else _normal_iso(spec.y - state.mu, state.sigma2)
    terms["process"] = _normal_iso(state.mu - mean, state.sigma2_eta)
    z = spec.cov_vecs.T @ state.delta
    r = spec.r
    terms["delta"] = -0.5 * (
        r * LOG2PI + r * np.log(state.phi) + np.sum(np.log(spec.cov_vals)) + float(z @ (z / spec.cov_vals)) / state.phi
    )
    terms["beta"] = _normal_iso(state.beta - spec.beta_mean, pr.beta_var)
    terms["sigma2"] = ig_logpdf(state.sigma2, pr.a_eps, pr.b_eps)
    terms["sigma2_eta"] = ig_logpdf(state.sigma2_eta, pr.a_eta, pr.b_eta)
    terms["phi"] = ig_logpdf(state.phi, pr.a_phi, pr.b_phi)
    return terms


def log_joint(state: ChainState, spec: ModelSpec) -> float:
    """Log joint density of data, latent process and parameters."""
    return float(sum(log_joint_terms(state, spec).values()))
