"""Areal layers: units, centroids, contiguity matrices and graph Laplacians.

A layer is a fixed ordering of areal units together with a binary symmetric
contiguity matrix ``W`` and its Laplacian ``Q = diag(W 1) - W``. Grid layers
are built directly from lattice indices; polygon layers (GeoJSON) use a
vertex-snapping shared-boundary test.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import InvalidArgumentError, LayerLoadError

RULES = ("rook", "queen", "shared-boundary")


@dataclass(frozen=True)
class ArealUnit:
    """One areal unit.

    ``boundary`` holds closed rings as ``(k, 2)`` arrays; the first ring of
    each polygon part is its exterior, later rings are holes. Holes are only
    used for area/centroid bookkeeping and for vertex matching.
    """

    id: str
    centroid: tuple[float, float]
    boundary: tuple[np.ndarray, ...] | None = None
    area: float | None = None

    def __post_init__(self):
        if self.boundary is None:
            return
        for ring in self.boundary:
            ring = np.asarray(ring)
            if ring.ndim != 2 or ring.shape[1] != 2:
                raise InvalidArgumentError(f"unit {self.id!r}: ring must be (k, 2)")
            if not np.array_equal(ring[0], ring[-1]):
                raise InvalidArgumentError(f"unit {self.id!r}: ring is not closed")
            if len(np.unique(ring[:-1], axis=0)) < 3:
                raise InvalidArgumentError(
                    f"unit {self.id!r}: ring has fewer than 3 distinct vertices"
                )


@dataclass(frozen=True)
class ArealLayer:
    """An ordered set of areal units with contiguity ``W`` and Laplacian ``Q``.

    ``grid`` is ``(nx, ny, bbox)`` for lattice layers and ``None`` otherwise.
    ``isolated`` lists ids of units without neighbours; they are kept.
    """

    units: tuple[ArealUnit, ...]
    W: sparse.csr_matrix
    Q: sparse.csr_matrix
    isolated: tuple[str, ...] = ()
    grid: tuple | None = None
    rule: str = "rook"
    _centroids: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [u.id for u in self.units]
        if len(set(ids)) != len(ids):
            seen, dup = set(), None
            for i in ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise InvalidArgumentError(f"duplicate unit id {dup!r}")
        cents = np.array([u.centroid for u in self.units], dtype=float).reshape(-1, 2)
        cents.setflags(write=False)
        object.__setattr__(self, "_centroids", cents)

    @property
    def n(self) -> int:
        return len(self.units)

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.units]

    @property
    def centroids(self) -> np.ndarray:
        return self._centroids

    @property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.W.sum(axis=1)).ravel()

    def to_manifest(self) -> dict:
        """JSON-serializable snapshot: ids, centroids and W as COO triplets."""
        coo = sparse.triu(self.W, k=1).tocoo()
        out = {
            "kind": "misalign-layer",
            "n": self.n,
            "rule": self.rule,
            "ids": self.ids,
            "centroids": self.centroids.tolist(),
            "W": {"row": coo.row.tolist(), "col": coo.col.tolist()},
            "isolated": list(self.isolated),
        }
        if self.grid is not None:
            nx, ny, bbox = self.grid
            out["grid"] = {"nx": nx, "ny": ny, "bbox": list(bbox)}
        return out

    @classmethod
    def from_manifest(cls, manifest: dict) -> "ArealLayer":
        n = int(manifest["n"])
        if manifest.get("grid"):
            g = manifest["grid"]
            layer = build_grid_layer(g["nx"], g["ny"], tuple(g["bbox"]), rule=manifest.get("rule", "rook"))
            if layer.ids != [str(i) for i in manifest["ids"]]:
                raise LayerLoadError("grid manifest ids do not match the lattice ordering")
            return layer
        row = np.asarray(manifest["W"]["row"], dtype=int)
        col = np.asarray(manifest["W"]["col"], dtype=int)
        upper = sparse.coo_matrix((np.ones(len(row)), (row, col)), shape=(n, n))
        W = (upper + upper.T).tocsr()
        W.data[:] = 1.0
        units = tuple(
            ArealUnit(str(i), (float(c[0]), float(c[1])))
            for i, c in zip(manifest["ids"], manifest["centroids"])
        )
        return _make_layer(units, W, rule=manifest.get("rule", "rook"))


def laplacian(W) -> sparse.csr_matrix:
    """Return ``Q = diag(W 1) - W`` for a symmetric binary ``W``."""
    W = sparse.csr_matrix(W, dtype=float)
    if W.shape[0] != W.shape[1]:
        raise InvalidArgumentError("W must be square")
    if (abs(W - W.T)).sum() != 0:
        raise InvalidArgumentError("W must be symmetric")
    if np.any(W.diagonal() != 0):
        raise InvalidArgumentError("W must have a zero diagonal")
    if W.nnz and not np.all(np.isin(W.data, (0.0, 1.0))):
        raise InvalidArgumentError("W entries must be 0 or 1")
    deg = np.asarray(W.sum(axis=1)).ravel()
    return (sparse.diags(deg) - W).tocsr()


def _make_layer(units, W, rule="rook", grid=None) -> ArealLayer:
    W = sparse.csr_matrix(W, dtype=float)
    W.eliminate_zeros()
    Q = laplacian(W)
    deg = np.asarray(W.sum(axis=1)).ravel()
    isolated = tuple(units[i].id for i in np.flatnonzero(deg == 0))
    if isolated and len(units) > 1:
        warnings.warn(
            f"{len(isolated)} unit(s) have no neighbours: {', '.join(isolated[:10])}",
            stacklevel=3,
        )
    return ArealLayer(tuple(units), W, Q, isolated=isolated, grid=grid, rule=rule)


def grid_adjacency(nx: int, ny: int, rule: str = "rook") -> sparse.csr_matrix:
    """Contiguity of an ``nx`` by ``ny`` lattice in row-major order."""
    if rule not in RULES:
        raise InvalidArgumentError(f"unknown contiguity rule {rule!r}")
    idx = np.arange(nx * ny).reshape(ny, nx)
    pairs = [
        (idx[:, :-1].ravel(), idx[:, 1:].ravel()),
        (idx[:-1, :].ravel(), idx[1:, :].ravel()),
    ]
    if rule == "queen":
        pairs.append((idx[:-1, :-1].ravel(), idx[1:, 1:].ravel()))
        pairs.append((idx[:-1, 1:].ravel(), idx[1:, :-1].ravel()))
    row = np.concatenate([p[0] for p in pairs])
    col = np.concatenate([p[1] for p in pairs])
    n = nx * ny
    upper = sparse.coo_matrix((np.ones(len(row)), (row, col)), shape=(n, n))
    return (upper + upper.T).tocsr()


def build_grid_layer(nx: int, ny: int, bbox: Sequence[float], rule: str = "rook") -> ArealLayer:
    """Regular lattice layer over ``bbox = (xmin, ymin, xmax, ymax)``.

    Units are numbered row-major starting at the ``ymin`` row, ids are the
    stringified indices. Every cell carries its square boundary.
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise InvalidArgumentError(f"grid dimensions must be positive integers, got {nx}x{ny}")
    nx, ny = int(nx), int(ny)
    xmin, ymin, xmax, ymax = map(float, bbox)
    if not (xmax > xmin and ymax > ymin):
        raise InvalidArgumentError(f"degenerate bounding box {tuple(bbox)}")
    xs = np.linspace(xmin, xmax, nx + 1)
    ys = np.linspace(ymin, ymax, ny + 1)
    units = []
    for j in range(ny):
        for i in range(nx):
            x0, x1, y0, y1 = xs[i], xs[i + 1], ys[j], ys[j + 1]
            ring = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]])
            units.append(
                ArealUnit(
                    str(j * nx + i),
                    ((x0 + x1) / 2.0, (y0 + y1) / 2.0),
                    boundary=(ring,),
                    area=(x1 - x0) * (y1 - y0),
                )
            )
    W = grid_adjacency(nx, ny, rule)
    return _make_layer(units, W, rule=rule, grid=(nx, ny, (xmin, ymin, xmax, ymax)))


def _segments(rings) -> np.ndarray:
    return np.concatenate([np.hstack([r[:-1], r[1:]]) for r in rings])


def _collinear_overlap(sa: np.ndarray, sb: np.ndarray, tol: float) -> bool:
    """True if any segment in ``sa`` overlaps any in ``sb`` along a positive length."""
    p0, p1 = sa[:, None, :2], sa[:, None, 2:]
    q0, q1 = sb[None, :, :2], sb[None, :, 2:]
    d = p1 - p0
    length = np.hypot(d[..., 0], d[..., 1])
    ok = length > tol
    length = np.where(ok, length, 1.0)

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    # perpendicular distance of both q endpoints from the p line
    c0 = np.abs(cross(d, q0 - p0)) / length
    c1 = np.abs(cross(d, q1 - p0)) / length
    col = ok & (c0 <= tol) & (c1 <= tol)
    if not col.any():
        return False
    t0 = np.sum(d * (q0 - p0), axis=-1) / length
    t1 = np.sum(d * (q1 - p0), axis=-1) / length
    lo = np.maximum(0.0, np.minimum(t0, t1))
    hi = np.minimum(length, np.maximum(t0, t1))
    return bool(np.any(col & (hi - lo > tol)))


def build_adjacency(units: Sequence[ArealUnit], rule: str = "shared-boundary", tol: float = 1e-9) -> sparse.csr_matrix:
    """Binary contiguity matrix from polygon boundaries.

    Coordinates are snapped to multiples of ``tol``. Two units are neighbours
    under ``rook``/``shared-boundary`` when they share at least two snapped
    vertices or one collinear overlapping segment; ``queen`` additionally
    accepts a single shared vertex.
    """
    if rule not in RULES:
        raise InvalidArgumentError(f"unknown contiguity rule {rule!r}")
    missing = [u.id for u in units if not u.boundary]
    if missing:
        raise InvalidArgumentError(
            f"rule {rule!r} needs polygon boundaries; missing for: {', '.join(missing[:10])}"
        )
    n = len(units)
    shared: dict[tuple[int, int], int] = {}
    owners: dict[tuple[int, int], list[int]] = {}
    for k, u in enumerate(units):
        verts = np.concatenate([r[:-1] for r in u.boundary])
        keys = {tuple(v) for v in np.round(verts / tol).astype(np.int64).tolist()}
        for key in keys:
            owners.setdefault(key, []).append(k)
    for ks in owners.values():
        for a in range(len(ks)):
            for b in range(a + 1, len(ks)):
                pair = (ks[a], ks[b]) if ks[a] < ks[b] else (ks[b], ks[a])
                shared[pair] = shared.get(pair, 0) + 1

    need = 1 if rule == "queen" else 2
    edges = {p for p, c in shared.items() if c >= need}

    # T-junctions: segments that overlap without sharing two vertices
    segs = [_segments(u.boundary) for u in units]
    boxes = np.array(
        [[s[:, [0, 2]].min(), s[:, [1, 3]].min(), s[:, [0, 2]].max(), s[:, [1, 3]].max()] for s in segs]
    )
    overlap = (
        (boxes[:, None, 0] <= boxes[None, :, 2] + tol)
        & (boxes[None, :, 0] <= boxes[:, None, 2] + tol)
        & (boxes[:, None, 1] <= boxes[None, :, 3] + tol)
        & (boxes[None, :, 1] <= boxes[:, None, 3] + tol)
    )
    ii, jj = np.nonzero(np.triu(overlap, k=1))
    for i, j in zip(ii.tolist(), jj.tolist()):
        if (i, j) in edges:
            continue
        if _collinear_overlap(segs[i], segs[j], tol):
            edges.add((i, j))

    if edges:
        row, col = np.array(sorted(edges)).T
    else:
        row = col = np.array([], dtype=int)
    upper = sparse.coo_matrix((np.ones(len(row)), (row, col)), shape=(n, n))
    return (upper + upper.T).tocsr()


def _ring_area_centroid(ring: np.ndarray) -> tuple[float, float, float]:
    x, y = ring[:-1, 0], ring[:-1, 1]
    xn, yn = ring[1:, 0], ring[1:, 1]
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    if a == 0:
        return 0.0, float(x.mean()), float(y.mean())
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return a, cx, cy


def polygon_area_centroid(parts: Iterable[Sequence[np.ndarray]]) -> tuple[float, tuple[float, float]]:
    """Area and area-weighted centroid of a (multi)polygon.

    ``parts`` is a sequence of polygons, each a sequence of rings with the
    exterior first. Holes are subtracted regardless of ring orientation.
    """
    total, sx, sy = 0.0, 0.0, 0.0
    for rings in parts:
        for k, ring in enumerate(rings):
            a, cx, cy = _ring_area_centroid(np.asarray(ring, dtype=float))
            a = abs(a) if k == 0 else -abs(a)
            total += a
            sx += a * cx
            sy += a * cy
    if total <= 0:
        raise InvalidArgumentError("polygon has non-positive area")
    return total, (sx / total, sy / total)


def _close(ring) -> np.ndarray:
    ring = np.asarray(ring, dtype=float)
    if ring.ndim != 2 or ring.shape[1] < 2:
        raise ValueError("malformed ring")
    ring = ring[:, :2]
    if not np.array_equal(ring[0], ring[-1]):
        ring = np.vstack([ring, ring[:1]])
    return ring


def load_geojson_layer(
    path,
    id_property: str = "id",
    rule: str = "shared-boundary",
    tol: float = 1e-9,
) -> ArealLayer:
    """Read a GeoJSON FeatureCollection of Polygon/MultiPolygon features.

    Unit ids come from ``properties[id_property]`` (falling back to the
    feature's top-level ``id``). Centroids are area-weighted.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LayerLoadError(f"cannot read {path}: {exc}") from exc
    if doc.get("type") != "FeatureCollection":
        raise LayerLoadError(f"{path}: expected a GeoJSON FeatureCollection")
    units, seen = [], set()
    for k, feat in enumerate(doc.get("features", [])):
        props = feat.get("properties") or {}
        uid = props.get(id_property, feat.get("id"))
        if uid is None:
            raise LayerLoadError(f"{path}: feature #{k} has no {id_property!r} property")
        uid = str(uid)
        if uid in seen:
            raise LayerLoadError(f"{path}: duplicate id {uid!r} (feature #{k})")
        seen.add(uid)
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            polys = [geom["coordinates"]]
        elif gtype == "MultiPolygon":
            polys = geom["coordinates"]
        else:
            raise LayerLoadError(f"{path}: feature {uid!r} has non-polygon geometry {gtype!r}")
        try:
            parts = [[_close(r) for r in poly] for poly in polys]
            area, cent = polygon_area_centroid(parts)
            unit = ArealUnit(uid, cent, boundary=tuple(r for p in parts for r in p), area=area)
        except (ValueError, TypeError, IndexError) as exc:
            raise LayerLoadError(f"{path}: feature {uid!r}: {exc}") from exc
        units.append(unit)
    if not units:
        raise LayerLoadError(f"{path}: no features")
    W = build_adjacency(units, rule=rule, tol=tol)
    return _make_layer(units, W, rule=rule)


def load_layer(path, id_property: str = "id", rule: str | None = None) -> ArealLayer:
    """Load a GeoJSON layer or a layer manifest written by :meth:`ArealLayer.to_manifest`."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LayerLoadError(f"cannot read {path}: {exc}") from exc
    if doc.get("kind") == "misalign-layer":
        return ArealLayer.from_manifest(doc)
    return load_geojson_layer(path, id_property=id_property, rule=rule or "shared-boundary")


def layer_to_geojson(layer: ArealLayer, id_property: str = "id") -> dict:
    """GeoJSON FeatureCollection for a layer whose units carry boundaries."""
    feats = []
    for u in layer.units:
        if not u.boundary:
            raise InvalidArgumentError(f"unit {u.id!r} has no boundary")
        feats.append(
            {
                "type": "Feature",
                "properties": {id_property: u.id},
                "geometry": {"type": "Polygon", "coordinates": [r.tolist() for r in u.boundary]},
            }
        )
    return {"type": "FeatureCollection", "features": feats}
