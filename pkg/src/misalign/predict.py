"""Predictive posterior on a misaligned target layer.

The target layer gets its own Moran operator (from its contiguity ``W*`` and
design ``X*``) but shares the fitted knots, so ``Lam* = M* @ R*`` has the same
``r`` columns as the fit basis and the fitted coefficients carry over.
Predictions are composition samples: one fresh ``eta*`` and ``eps*`` per
posterior draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .basis import HybridBasis, JitterPolicy, KnotSet, hybrid_basis
from .errors import InvalidArgumentError
from .sampler import QUANTILES, PosteriorSamples, moran_eigenvectors


@dataclass
class PredictionResult:
    ids: list[str]
    draws: np.ndarray

    def summary(self) -> pd.DataFrame:
        d = self.draws
        q = np.quantile(d, QUANTILES, axis=0)
        return pd.DataFrame(
            {
                "id": self.ids,
                "mean": d.mean(axis=0),
                "sd": d.std(axis=0, ddof=1),
                "q2.5": q[0],
                "q50": q[1],
                "q97.5": q[2],
            }
        )

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)


def build_prediction_basis(
    target,
    X_star,
    knots: KnotSet,
    jitter: JitterPolicy = JitterPolicy(),
    reference: KnotSet | None = None,
) -> HybridBasis:
    """Hybrid basis of the target layer over the fit-side knots.

    ``reference`` is the knot set used for fitting; a different ``r`` or
    radius is rejected because the coefficients would not line up.
    """
    if reference is not None and not (knots.r == reference.r and knots.tau == reference.tau):
        raise InvalidArgumentError(
            f"target knots (r={knots.r}, tau={knots.tau}) differ from the fit knots "
            f"(r={reference.r}, tau={reference.tau})"
        )
    X_star = np.asarray(X_star, dtype=float)
    if X_star.ndim == 1:
        X_star = X_star[:, None]
    if target.n == 1:
        # no neighbours: M* = [1] and Lam* is the bi-square row
        return hybrid_basis(target, np.zeros((1, 0)), knots, jitter, prior=False)
    return hybrid_basis(target, X_star, knots, jitter, prior=False)


def baseline_prediction_basis(target, X_star, q: int) -> np.ndarray:
    """Leading ``q`` Moran eigenvectors of the target layer."""
    if q > target.n:
        raise InvalidArgumentError(f"q={q} exceeds the {target.n} target units")
    return moran_eigenvectors(target, X_star)[:, :q]


def predictive_draws(samples: PosteriorSamples, X_star, Lam_star, rng, ids=None) -> PredictionResult:
    """One predictive draw of ``y*`` per retained posterior draw (chains pooled)."""
    X_star = np.asarray(X_star, dtype=float)
    if X_star.ndim == 1:
        X_star = X_star[:, None]
    Lam_star = np.asarray(Lam_star, dtype=float).reshape(X_star.shape[0], -1)
    beta = samples.pooled("beta")
    delta = samples.pooled("delta")
    if beta.shape[1] != X_star.shape[1]:
        raise InvalidArgumentError(f"X* has {X_star.shape[1]} columns, fit has {beta.shape[1]}")
    if delta.shape[1] != Lam_star.shape[1]:
        raise InvalidArgumentError(f"Lam* has {Lam_star.shape[1]} columns, fit has {delta.shape[1]}")
    s2 = samples.pooled("sigma2")[:, None]
    s2e = samples.pooled("sigma2_eta")[:, None]
    D, ns = beta.shape[0], X_star.shape[0]
    mean = beta @ X_star.T + delta @ Lam_star.T
    eta = np.sqrt(s2e) * rng.standard_normal((D, ns))
    eps = np.sqrt(s2) * rng.standard_normal((D, ns))
    draws = mean + eta + eps
    if ids is None:
        ids = [str(i) for i in range(ns)]
    return PredictionResult(list(map(str, ids)), draws)
