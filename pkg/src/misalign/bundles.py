"""Deterministic on-disk artifacts: npz bundles, CSV joins, manifests, hashes."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_npz(path, **arrays) -> Path:
    """Like ``numpy.savez`` but byte-for-byte reproducible (fixed zip timestamps)."""
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_csv(path, frame: pd.DataFrame, index: bool = False) -> Path:
    path = Path(path)
    frame.to_csv(path, index=index, lineterminator="\n")
    return path


def read_table(path, id_col: str, columns: list[str]) -> pd.DataFrame:
    """Read a CSV keyed by ``id_col`` and check the requested numeric columns."""
    try:
        frame = pd.read_csv(path, dtype={id_col: str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    missing = [c for c in [id_col, *columns] if c not in frame.columns]
    if missing:
        raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
    if frame[id_col].duplicated().any():
        dup = frame.loc[frame[id_col].duplicated(), id_col].iloc[0]
        raise DataError(f"{path}: duplicate id {dup!r}")
    for c in columns:
        vals = pd.to_numeric(frame[c], errors="coerce")
        if vals.isna().any():
            bad = frame.loc[vals.isna(), id_col].tolist()[:10]
            raise DataError(f"{path}: column {c!r} has missing or non-numeric values for ids {bad}")
        frame[c] = vals.astype(float)
    return frame.set_index(id_col)


def align_to_layer(frame: pd.DataFrame, ids: list[str], what: str) -> pd.DataFrame:
    """Reorder rows to layer order; every id must match exactly once."""
    layer_ids = set(ids)
    table_ids = set(frame.index)
    no_data = sorted(layer_ids - table_ids)
    no_unit = sorted(table_ids - layer_ids)
    if no_data or no_unit:
        parts = []
        if no_data:
            parts.append(f"layer units without rows: {', '.join(no_data[:10])}")
        if no_unit:
            parts.append(f"rows without layer units: {', '.join(no_unit[:10])}")
        raise DataError(f"{what}: unmatched ids ({'; '.join(parts)})")
    return frame.loc[ids]


def design_matrix(frame: pd.DataFrame, x_cols: list[str], intercept: bool = True) -> np.ndarray:
    cols = [frame[c].to_numpy(dtype=float) for c in x_cols]
    if intercept:
        cols.insert(0, np.ones(len(frame)))
    if not cols:
        raise ConfigError("the design matrix has no columns")
    return np.column_stack(cols)
