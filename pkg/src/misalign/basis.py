"""Hybrid spatial basis: Moran operator eigenvectors times a bi-square basis.

The basis for a layer with contiguity ``W`` and design ``X`` is
``Lam = M @ R`` where ``M`` holds all eigenvectors of the Moran operator
``(I - P) W (I - P)`` (``P`` the projector onto the columns of ``X``) and
``R`` is an ``n x r`` compactly supported bi-square basis evaluated between
unit centroids and knots. The prior covariance of the basis coefficients is
``phi * Lam' Q Lam``, stored through its spectral decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy import sparse

from .bundles import save_npz
from .errors import InvalidArgumentError, NumericalError
from .geometry import ArealLayer

SYM_TOL = 1e-8
RANK_TOL = 1e-10


@dataclass(frozen=True)
class KnotSet:
    """Knot locations (``r x 2``) and the bi-square support radius ``tau``."""

    knots: np.ndarray
    tau: float

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float).reshape(-1, 2)
        if len(k) < 1:
            raise InvalidArgumentError("a knot set needs at least one knot")
        if not np.all(np.isfinite(k)):
            raise InvalidArgumentError("knot coordinates must be finite")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise InvalidArgumentError(f"bi-square radius must be positive, got {self.tau}")
        k.setflags(write=False)
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def r(self) -> int:
        return len(self.knots)

    def same_as(self, other: "KnotSet") -> bool:
        return self.r == other.r and self.tau == other.tau and np.array_equal(self.knots, other.knots)


@dataclass(frozen=True)
class JitterPolicy:
    """Relative diagonal jitter for near-singular prior covariance matrices.

    If the smallest eigenvalue is below ``threshold * largest`` the matrix is
    shifted by ``scale * trace / r`` times the identity.
    """

    threshold: float = 1e-10
    scale: float = 1e-8


@dataclass(frozen=True)
class HybridBasis:
    M: np.ndarray
    eigenvalues: np.ndarray
    R: np.ndarray
    Lam: np.ndarray
    Psi: np.ndarray
    Phi: np.ndarray
    jitter: float
    knots: KnotSet

    @property
    def n(self) -> int:
        return self.Lam.shape[0]

    @property
    def r(self) -> int:
        return self.Lam.shape[1]

    def to_npz(self, path) -> None:
        save_npz(
            path,
            M=self.M,
            eigenvalues=self.eigenvalues,
            R=self.R,
            Lam=self.Lam,
            Psi=self.Psi,
            Phi=self.Phi,
            jitter=np.array(self.jitter),
            knots=self.knots.knots,
            tau=np.array(self.knots.tau),
        )


def _dense(A) -> np.ndarray:
    return A.toarray() if sparse.issparse(A) else np.asarray(A, dtype=float)


def moran_operator(W, X) -> np.ndarray:
    """Return ``(I - P) W (I - P)`` with ``P = X (X'X)^-1 X'``.

    The projector is formed from a pivoted QR factorization of ``X``; a
    column whose pivot falls below ``1e-10 * ||X||`` is reported as linearly
    dependent.
    """
    W = _dense(W)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = W.shape[0]
    if W.shape != (n, n):
        raise InvalidArgumentError("W must be square")
    if X.shape[0] != n:
        raise InvalidArgumentError(f"X has {X.shape[0]} rows, W has {n}")
    if np.max(np.abs(W - W.T), initial=0.0) > SYM_TOL:
        raise InvalidArgumentError("W must be symmetric")
    p = X.shape[1]
    if p == 0:
        return W.copy()
    if p > n:
        raise InvalidArgumentError(f"X has more columns ({p}) than rows ({n})")
    Qx, Rx, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rx))
    tol = RANK_TOL * np.linalg.norm(X)
    bad = np.flatnonzero(diag <= tol)
    if bad.size:
        raise InvalidArgumentError(
            f"design matrix is rank deficient: column {int(piv[bad[0]])} is linearly dependent on the others"
        )
    A = W - Qx @ (Qx.T @ W)
    S = A - (A @ Qx) @ Qx.T
    return (S + S.T) / 2.0


def _sign_fix(V: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    """Flip columns so the largest-magnitude entry (lowest index on ties) is positive."""
    V = V.copy()
    absV = np.abs(V)
    peak = absV.max(axis=0, keepdims=True)
    lead = np.argmax(absV >= peak * (1.0 - rtol), axis=0)
    signs = np.sign(V[lead, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def _ordered_eigh(A: np.ndarray, group_tol: float) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(A)
    vecs = _sign_fix(vecs)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    # equal eigenvalues: order their vectors lexicographically (descending)
    start = 0
    n = len(vals)
    while start < n:
        stop = start + 1
        while stop < n and vals[stop - 1] - vals[stop] <= group_tol:
            stop += 1
        if stop - start > 1:
            block = np.round(vecs[:, start:stop], 12)
            keys = sorted(range(stop - start), key=lambda j: tuple(-block[:, j]))
            vecs[:, start:stop] = vecs[:, start:stop][:, keys]
        start = stop
    return vals, vecs


def eigendecompose_moran(MW) -> tuple[np.ndarray, np.ndarray]:
    """Full eigendecomposition of a symmetric Moran operator.

    Returns ``(M, eigenvalues)`` with eigenvalues descending and each
    eigenvector's largest-magnitude entry positive.
    """
    MW = np.asarray(MW, dtype=float)
    if MW.ndim != 2 or MW.shape[0] != MW.shape[1]:
        raise InvalidArgumentError("Moran operator must be square")
    if np.max(np.abs(MW - MW.T), initial=0.0) > SYM_TOL:
        raise InvalidArgumentError("Moran operator is not symmetric")
    sym = (MW + MW.T) / 2.0
    scale = max(1.0, float(np.max(np.abs(sym), initial=0.0)))
    vals, vecs = _ordered_eigh(sym, group_tol=1e-10 * scale)
    return vecs, vals


def _grid_dims(r: int) -> tuple[int, int]:
    cols = int(np.ceil(np.sqrt(r)))
    rows = int(np.ceil(r / cols))
    return cols, rows


def knot_count(n: int, fraction: float = 0.10) -> int:
    if not (0 < fraction <= 1):
        raise InvalidArgumentError(f"knot fraction must be in (0, 1], got {fraction}")
    r = int(np.floor(fraction * n + 0.5))
    return min(max(r, 1), max(n - 1, 1))


def place_knots(layer: ArealLayer, fraction: float = 0.10, r: int | None = None, radius_factor: float = 1.5) -> KnotSet:
    """Regular knot grid over the centroid bounding box.

    ``r = round(fraction * n)`` clamped to ``[1, n - 1]`` unless ``r`` is
    given. Knots sit at the centres of a ``cols x rows`` partition of the
    bounding box (``cols = ceil(sqrt(r))``); when ``cols * rows > r`` the last
    row holds the remainder, spread evenly across the width. The bi-square
    radius is ``radius_factor`` times the smallest knot spacing.
    """
    if layer.n < 2:
        raise InvalidArgumentError("knot placement needs at least two units")
    if r is None:
        r = knot_count(layer.n, fraction)
    elif not (1 <= int(r) <= layer.n - 1):
        raise InvalidArgumentError(f"knot count must be in [1, {layer.n - 1}], got {r}")
    r = int(r)
    c = layer.centroids
    xmin, ymin = c.min(axis=0)
    xmax, ymax = c.max(axis=0)
    cols, rows = _grid_dims(r)
    sx = (xmax - xmin) / cols
    sy = (ymax - ymin) / rows
    knots = []
    for j in range(rows):
        in_row = cols if j < rows - 1 else r - cols * (rows - 1)
        step = (xmax - xmin) / in_row
        y = ymin + (j + 0.5) * sy
        knots.extend((xmin + (i + 0.5) * step, y) for i in range(in_row))
    spacings = [s for s, k in ((sx, cols), (sy, rows)) if k > 1]
    if not spacings:
        # single knot: the whole box is one cell
        spacings = [max(sx, sy)]
    spacings = [s for s in spacings if s > 0]
    if not spacings:
        raise InvalidArgumentError("all centroids coincide; cannot space knots")
    return KnotSet(np.array(knots), radius_factor * min(spacings))


def bisquare_basis(centroids, knots: KnotSet, ids=None) -> np.ndarray:
    """``R[i, j] = (1 - (d_ij / tau)**2)**2`` for ``d_ij < tau``, else 0."""
    c = np.asarray(centroids, dtype=float).reshape(-1, 2)
    diff = c[:, None, :] - knots.knots[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    u = d / knots.tau
    R = np.where(d < knots.tau, (1.0 - u * u) ** 2, 0.0)
    empty = np.flatnonzero(~(R > 0).any(axis=1))
    if empty.size:
        names = [str(ids[i]) if ids is not None else str(i) for i in empty[:20]]
        raise InvalidArgumentError(
            f"{empty.size} unit(s) lie outside every knot support ({', '.join(names)}); "
            "use a larger radius or more knots"
        )
    return R


def spectral_with_jitter(
    A: np.ndarray, policy: JitterPolicy = JitterPolicy(), reference: float | None = None
) -> tuple[np.ndarray, np.ndarray, float]:
    """Eigenpairs (descending) of a symmetric PSD matrix, jittered when near singular.

    ``reference`` is the magnitude ``A`` would have if nothing cancelled (for
    ``B' Q B`` that is ``||Q|| * ||B||_F**2``). A largest eigenvalue below
    ``1e-12 * reference`` means ``A`` is zero up to rounding, which no relative
    jitter can repair.
    """
    A = (A + A.T) / 2.0
    r = A.shape[0]
    if r == 0:
        return np.zeros((0, 0)), np.zeros(0), 0.0
    scale = max(1.0, float(np.max(np.abs(A))))
    vals, vecs = _ordered_eigh(A, group_tol=1e-10 * scale)
    if reference is not None and vals[0] <= 1e-12 * reference:
        raise NumericalError(
            "prior covariance is numerically zero: the basis lies in the null space of the Laplacian"
        )
    eps = 0.0
    if vals[-1] < policy.threshold * vals[0]:
        eps = policy.scale * float(np.trace(A)) / r
        vals = vals + eps
    if np.any(vals <= 0):
        raise NumericalError(
            f"prior covariance is not positive definite after jitter (min eigenvalue {vals[-1]:.3e})"
        )
    return vecs, vals, eps


def laplacian_scale(Q, B: np.ndarray) -> float:
    """``max|row sum of |Q|| * ||B||_F**2``, an upper bound on ``||B' Q B||``."""
    qn = float(abs(Q).sum(axis=1).max()) if Q.shape[0] else 0.0
    return qn * float(np.sum(B * B))


def hybrid_basis(
    layer: ArealLayer, X, knots: KnotSet, jitter: JitterPolicy = JitterPolicy(), prior: bool = True
) -> HybridBasis:
    """Build ``Lam = M @ R`` and the spectral form of ``Lam' Q Lam`` for a layer.

    With ``prior=False`` the covariance step is skipped (``Psi`` and ``Phi``
    are empty); prediction layers only need ``Lam``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != layer.n:
        raise InvalidArgumentError(f"X has {X.shape[0]} rows for a layer of {layer.n} units")
    MW = moran_operator(layer.W, X)
    if layer.W.nnz and np.max(np.abs(MW)) <= 1e-12:
        raise InvalidArgumentError("basis annihilated: the design removes every spatial pattern of W")
    M, lam = eigendecompose_moran(MW)
    R = bisquare_basis(layer.centroids, knots, ids=layer.ids)
    Lam = M @ R
    if not prior:
        return HybridBasis(M=M, eigenvalues=lam, R=R, Lam=Lam, Psi=np.zeros((0, 0)), Phi=np.zeros(0), jitter=0.0, knots=knots)
    LQL = Lam.T @ (layer.Q @ Lam)
    Psi, Phi, eps = spectral_with_jitter(LQL, jitter, reference=laplacian_scale(layer.Q, Lam))
    return HybridBasis(M=M, eigenvalues=lam, R=R, Lam=Lam, Psi=Psi, Phi=Phi, jitter=eps, knots=knots)
