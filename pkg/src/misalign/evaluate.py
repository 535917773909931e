"""Model comparison: RMSE with a posterior credible interval, and DIC."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgumentError, MisalignError
from .model import LOG2PI
from .predict import PredictionResult
from .sampler import PosteriorSamples


def _anchored_mean(a: np.ndarray, axis: int = 0) -> np.ndarray:
    # identical draws give back the first draw exactly
    ref = np.take(a, 0, axis=axis)
    return ref + np.mean(a - np.expand_dims(ref, axis), axis=axis)


def rmse_ci(pred: PredictionResult, truth) -> tuple[float, float, float]:
    """Mean and 2.5/97.5% quantiles of the per-draw RMSE against ``truth``."""
    truth = np.asarray(truth, dtype=float).ravel()
    draws = pred.draws if isinstance(pred, PredictionResult) else np.atleast_2d(np.asarray(pred, dtype=float))
    if draws.shape[1] != truth.size:
        raise InvalidArgumentError(f"{draws.shape[1]} predicted units vs {truth.size} truth values")
    per_draw = np.sqrt(np.mean((draws - truth) ** 2, axis=1))
    lo, hi = np.quantile(per_draw, (0.025, 0.975))
    mean = float(_anchored_mean(per_draw))
    return mean, float(min(lo, mean)), float(max(hi, mean))


@dataclass(frozen=True)
class DIC:
    dic: float
    dbar: float
    pd: float
    dhat: float


def deviance(y: np.ndarray, mu: np.ndarray, sigma2) -> np.ndarray:
    """``-2 log N(y; mu, sigma2 I)``; broadcasts over leading draw axes."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise MisalignError("internal error: non-positive sigma2 draw")
    n = y.shape[-1]
    ss = np.sum((y - mu) ** 2, axis=-1)
    return n * (LOG2PI + np.log(sigma2)) + ss / sigma2


def dic(samples: PosteriorSamples, y, spec=None) -> DIC:
    """Deviance information criterion focused on the data level ``N(y; mu, sigma2 I)``.

    ``pd = mean(D) - D(mean mu, mean sigma2)`` and ``dic = mean(D) + pd``.
    """
    y = np.asarray(y, dtype=float).ravel()
    mu = samples.pooled("mu")
    s2 = samples.pooled("sigma2")
    if mu.shape[0] < 2:
        raise InvalidArgumentError("DIC needs at least two retained draws")
    if mu.shape[1] != y.size:
        raise InvalidArgumentError(f"y has {y.size} entries, draws have {mu.shape[1]}")
    D = deviance(y, mu, s2)
    dbar = float(_anchored_mean(D))
    dhat = float(deviance(y, _anchored_mean(mu), _anchored_mean(s2)))
    pd = dbar - dhat
    return DIC(dic=dbar + pd, dbar=dbar, pd=pd, dhat=dhat)


@dataclass
class ModelMetrics:
    rmse_mean: float
    rmse_lo: float
    rmse_hi: float
    dic: float
    dbar: float
    pd: float

    @classmethod
    def from_results(cls, pred: PredictionResult, truth, d: DIC) -> "ModelMetrics":
        m, lo, hi = rmse_ci(pred, truth)
        return cls(m, lo, hi, d.dic, d.dbar, d.pd)


@dataclass
class StudyReport:
    """Per-model metrics, averaged over replications, with the raw replicate rows."""

    models: dict[str, ModelMetrics]
    replicates: list[dict[str, ModelMetrics]] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_replicates(cls, replicates: list[dict[str, ModelMetrics]], metadata: dict | None = None) -> "StudyReport":
        names = list(replicates[0])
        models = {}
        for name in names:
            rows = [asdict(rep[name]) for rep in replicates]
            avg = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
            avg["dic"] = avg["dbar"] + avg["pd"]
            models[name] = ModelMetrics(**avg)
        meta = dict(metadata or {})
        meta.setdefault("config_hash", config_hash(meta.get("config", {})))
        return cls(models, replicates, meta)

    def wins(self, a: str, b: str, metric: str) -> int:
        """Replications in which model ``a`` has a strictly lower ``metric`` than ``b``."""
        return sum(getattr(r[a], metric) < getattr(r[b], metric) for r in self.replicates)

    def to_dict(self) -> dict:
        return {
            "models": {k: asdict(v) for k, v in self.models.items()},
            "replicates": [{k: asdict(v) for k, v in rep.items()} for rep in self.replicates],
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        head = f"{'':<18}{'RMSE (95% Bayesian-CI)':>30}{'DIC (measure of fit + penalty)':>38}"
        lines = [head, "-" * len(head)]
        for name, m in self.models.items():
            rmse = f"{m.rmse_mean:.4f} ({m.rmse_lo:.4f},{m.rmse_hi:.4f})"
            d = f"{m.dic:.2f} ({m.dbar:.2f}+{m.pd:.2f})"
            lines.append(f"{name:<18}{rmse:>30}{d:>38}")
        if len(self.replicates) > 1:
            lines.append(f"(averaged over {len(self.replicates)} replications)")
        return "\n".join(lines)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
