"""Panel files and canonical result serialization.

CSV panels are long format with a ``#`` header block::

    # space: wasserstein
    # grid: uniform 100 0 1
    # T0: 9
    # treated: 1
    # covariates: z1,z2
    # covariate: 1,0.3,1.2
    unit_id,period,coord_index,value
    1,1,1,0.01
    ...

``coord_index`` is 1-based and runs over the native coordinates of an object
(grid values, quantiles, row-major matrix entries or composition parts).
Grid specs: ``uniform <n> <lo> <hi> [midpoint|trapezoid]``, ``index <d>`` or
``points <x1>,<x2>,...`` (midpoint-cell weights).  JSON panels carry the same
fields with ``units: [{"id", "outcomes": [[...], ...], "covariates": [...]}]``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from fsynth.errors import ValidationError
from fsynth.hilbert import Grid
from fsynth.spaces import SpaceAdapter, make_adapter
from fsynth.weights import Panel

FLOAT_FMT = ".17g"


class IngestionError(ValidationError):
    """A panel file could not be parsed; the message names the location."""


# --------------------------------------------------------------------------
# canonical output


def fmt_float(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, FLOAT_FMT)


def _emit(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return "null" if not math.isfinite(x) else format(x, FLOAT_FMT)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_emit(v, indent, level + 1) for v in obj) + "]"
        inner = (",\n" + pad).join(_emit(v, indent, level + 1) for v in obj)
        return "[\n" + pad + inner + "\n" + end + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [json.dumps(str(k)) + ": " + _emit(v, indent, level + 1) for k, v in obj.items()]
        return "{\n" + pad + (",\n" + pad).join(items) + "\n" + end + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_canonical(obj, indent: int = 2) -> str:
    """JSON with insertion-ordered keys and 17-significant-digit floats."""
    return _emit(obj, indent, 0) + "\n"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_canonical(obj))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh, object_pairs_hook=OrderedDict)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


# --------------------------------------------------------------------------
# panel files


@dataclass
class PanelData:
    """A loaded panel together with its adapter and raw native coordinates."""

    panel: Panel
    adapter: SpaceAdapter
    space: str
    native: np.ndarray  # (N, T, n_coords), treated first
    covariate_names: tuple = ()


def parse_grid(spec: Optional[str], n_coords: int) -> Optional[Grid]:
    if spec is None:
        return None
    parts = spec.split()
    kind = parts[0].lower()
    try:
        if kind == "uniform":
            n = int(parts[1])
            lo = float(parts[2]) if len(parts) > 2 else 0.0
            hi = float(parts[3]) if len(parts) > 3 else 1.0
            rule = parts[4] if len(parts) > 4 else "midpoint"
            return Grid.uniform(n, lo, hi, rule)
        if kind == "index":
            return Grid.index(int(parts[1]) if len(parts) > 1 else n_coords)
        if kind == "points":
            pts = np.array([float(v) for v in " ".join(parts[1:]).split(",")])
            if pts.size == 1:
                return Grid(pts, np.ones(1))
            edges = np.concatenate([[pts[0]], 0.5 * (pts[1:] + pts[:-1]), [pts[-1]]])
            return Grid(pts, np.diff(edges))
    except (IndexError, ValueError) as exc:
        raise IngestionError(f"bad grid specification {spec!r}: {exc}") from exc
    raise IngestionError(f"unknown grid kind {kind!r}")


def _adapter_for(space: str, grid: Optional[Grid], n_coords: int, **options) -> SpaceAdapter:
    key = space.split(":")[0].lower()
    if key in ("spd-frobenius", "spd-power", "spd-logeuclidean", "spd-log-euclidean", "laplacian"):
        m = int(round(math.sqrt(n_coords)))
        if m * m != n_coords:
            raise IngestionError(f"{space} needs a square number of coordinates, got {n_coords}")
        return make_adapter(space, dim=m, **options)
    if key == "composition":
        return make_adapter(space, dim=n_coords)
    if grid is None:
        grid = Grid.uniform(n_coords, 0.0, 1.0)
    if grid.size != n_coords:
        raise IngestionError(f"grid has {grid.size} points but objects have {n_coords} coordinates")
    return make_adapter(space, grid=grid, **options)


def build_panel(native: np.ndarray, unit_ids, T0: int, space: str,
                grid: Optional[Grid] = None, covariates=None, covariate_names=(),
                **options) -> PanelData:
    """Embed native coordinates ``(N, T, n_coords)`` (treated first) into a panel."""
    native = np.asarray(native, dtype=float)
    N, T, n = native.shape
    adapter = _adapter_for(space, grid, n, **options)
    emb = np.empty((N, T, adapter.grid.size))
    for i in range(N):
        for t in range(T):
            try:
                emb[i, t] = adapter.embed_values(adapter.from_coords(native[i, t]))
            except ValidationError as exc:
                raise IngestionError(
                    f"unit {unit_ids[i]}, period {t + 1}: {exc}"
                ) from exc
    panel = Panel(emb, adapter.grid, T0, covariates, tuple(unit_ids))
    return PanelData(panel, adapter, space, native, tuple(covariate_names))


def _header_value(header, key, required=True):
    if key in header:
        return header[key]
    if required:
        raise IngestionError(f"panel header is missing '{key}'")
    return None


def _assemble(records, header, covariate_rows, space_override, options):
    space = space_override or _header_value(header, "space", required=False) or "l2"
    T0 = int(_header_value(header, "T0"))
    treated = _header_value(header, "treated")
    units = sorted({r[0] for r in records}, key=_unit_key)
    if treated not in units:
        raise IngestionError(f"treated unit {treated!r} has no records")
    periods = sorted({r[1] for r in records})
    T = max(periods)
    coords = {}
    for (u, t, k, v, line) in records:
        coords.setdefault((u, t), {})
        if k in coords[(u, t)]:
            raise IngestionError(f"line {line}: duplicate coordinate {k} for unit {u}, period {t}")
        coords[(u, t)][k] = v
    n = max(max(c) for c in coords.values())
    order = [treated] + [u for u in units if u != treated]
    native = np.empty((len(order), T, n))
    for i, u in enumerate(order):
        for t in range(1, T + 1):
            if (u, t) not in coords:
                raise IngestionError(f"unit {u} is missing period {t} (periods must be 1..{T})")
            c = coords[(u, t)]
            missing = [k for k in range(1, n + 1) if k not in c]
            if missing:
                raise IngestionError(
                    f"unit {u}, period {t}: missing coordinates {missing[:5]}"
                )
            native[i, t - 1] = [c[k] for k in range(1, n + 1)]
    grid = parse_grid(_header_value(header, "grid", required=False), n)
    cov = None
    names = ()
    if covariate_rows:
        names = tuple(header.get("covariates", "").split(",")) if header.get("covariates") else ()
        p = len(next(iter(covariate_rows.values())))
        cov = np.empty((len(order), p))
        for i, u in enumerate(order):
            if u not in covariate_rows:
                raise IngestionError(f"unit {u} has no covariate row")
            if len(covariate_rows[u]) != p:
                raise IngestionError(f"unit {u} covariate row has the wrong length")
            cov[i] = covariate_rows[u]
    return build_panel(native, order, T0, space, grid, cov, names, **options)


def _unit_key(u):
    try:
        return (0, int(u), u)
    except ValueError:
        return (1, 0, u)


def load_panel(path, format: Optional[str] = None, space: Optional[str] = None,
               **options) -> PanelData:
    """Read a CSV or JSON panel file and embed it with the declared space."""
    if format is None:
        format = "json" if str(path).lower().endswith(".json") else "csv"
    if not os.path.exists(path):
        raise IngestionError(f"panel file {path} does not exist")
    if format == "json":
        return _load_json(path, space, options)
    if format != "csv":
        raise IngestionError(f"unknown panel format {format!r}")
    header, cov_rows, records = {}, {}, []
    seen_columns = False
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].partition(":")
                if not sep:
                    continue
                key, value = key.strip(), value.strip()
                if key == "covariate":
                    parts = [p.strip() for p in value.split(",")]
                    try:
                        cov_rows[parts[0]] = [float(v) for v in parts[1:]]
                    except ValueError as exc:
                        raise IngestionError(f"line {line_no}: bad covariate row") from exc
                else:
                    header[key] = value
                continue
            if not seen_columns:
                cols = [c.strip() for c in line.split(",")]
                if cols != ["unit_id", "period", "coord_index", "value"]:
                    raise IngestionError(
                        f"line {line_no}: expected columns unit_id,period,coord_index,value"
                    )
                seen_columns = True
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise IngestionError(f"line {line_no}: expected 4 fields, got {len(parts)}")
            try:
                rec = (parts[0], int(parts[1]), int(parts[2]), float(parts[3]), line_no)
            except ValueError as exc:
                raise IngestionError(f"line {line_no}: {exc}") from exc
            if rec[1] < 1 or rec[2] < 1:
                raise IngestionError(f"line {line_no}: period and coord_index are 1-based")
            if not math.isfinite(rec[3]):
                raise IngestionError(f"line {line_no}: value is not finite")
            records.append(rec)
    if not records:
        raise IngestionError("panel file has no records")
    if "treated" in header:
        header["treated"] = header["treated"].strip()
    return _assemble(records, header, cov_rows, space, options)


def _load_json(path, space, options):
    try:
        doc = read_json(path)
    except json.JSONDecodeError as exc:
        raise IngestionError(f"invalid JSON: {exc}") from exc
    header = {k: doc[k] for k in ("space", "grid", "T0") if k in doc}
    if "treated" in doc:
        header["treated"] = str(doc["treated"])
    if "covariates" in doc:
        header["covariates"] = ",".join(doc["covariates"])
    records, cov_rows = [], {}
    for ui, unit in enumerate(doc.get("units", [])):
        uid = str(unit["id"])
        for t, vec in enumerate(unit["outcomes"], 1):
            for k, v in enumerate(vec, 1):
                records.append((uid, t, k, float(v), f"units[{ui}]"))
        if "covariates" in unit:
            cov_rows[uid] = [float(v) for v in unit["covariates"]]
    if not records:
        raise IngestionError("panel file has no units")
    return _assemble(records, header, cov_rows, space, options)


def save_panel(path, data: PanelData, grid_spec: Optional[str] = None):
    """Write a panel in the long CSV format (native coordinates, exact floats)."""
    N, T, n = data.native.shape
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# space: {data.space}\n")
        if grid_spec:
            fh.write(f"# grid: {grid_spec}\n")
        elif data.adapter.kind in ("l2", "wasserstein"):
            pts = ",".join(fmt_float(v) for v in data.adapter.grid.points)
            fh.write(f"# grid: points {pts}\n")
        fh.write(f"# T0: {data.panel.T0}\n")
        fh.write(f"# treated: {data.panel.unit_ids[0]}\n")
        if data.panel.covariates is not None:
            names = data.covariate_names or tuple(
                f"z{j + 1}" for j in range(data.panel.covariates.shape[1]))
            fh.write(f"# covariates: {','.join(names)}\n")
            for uid, row in zip(data.panel.unit_ids, data.panel.covariates):
                fh.write(f"# covariate: {uid}," + ",".join(fmt_float(v) for v in row) + "\n")
        fh.write("unit_id,period,coord_index,value\n")
        for i in range(N):
            for t in range(T):
                for k in range(n):
                    fh.write(f"{data.panel.unit_ids[i]},{t + 1},{k + 1},"
                             f"{fmt_float(data.native[i, t, k])}\n")
