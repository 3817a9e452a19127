"""
Result files: long-format TSV maps, 16-bit PGM heatmaps, TSV tables and
JSON fit reports.  Floats are written with ``repr`` so text round-trips are
exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from .fitting import FitReport, SweepDataset
from .scan import ScanResult

UNITS = {"reset_map": "pA", "reaction_map": "pA", "per_pixel_tau": "s"}
AXIS_LABEL = {"x": "x_um", "y": "y_um", "z": "objective_z_um"}


def _fmt(v: float) -> str:
    return repr(float(v))


def _meta_line(meta: dict) -> str:
    return "# meta: " + json.dumps(meta, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _pitch(values: np.ndarray) -> str:
    return _fmt(values[1] - values[0]) if values.size > 1 else "nan"


def write_grid(path, grid: np.ndarray, row_values, col_values, row_axis: str, col_axis: str,
               quantity: str, units: str, meta: dict | None = None) -> Path:
    """One line per pixel, row-major: row index, col index, row coord, col coord, value."""
    grid = np.asarray(grid, dtype=float)
    rv, cv = np.asarray(row_values, dtype=float), np.asarray(col_values, dtype=float)
    if grid.shape != (rv.size, cv.size):
        raise ValueError("grid shape does not match its axes")
    meta = dict(meta or {})
    lines = [
        f"# nvbridge map {__version__}",
        f"# quantity: {quantity}",
        f"# units: {units}",
        f"# shape: {grid.shape[0]} {grid.shape[1]}",
        f"# rows: {AXIS_LABEL.get(row_axis, row_axis)} pitch={_pitch(rv)}",
        f"# cols: {AXIS_LABEL.get(col_axis, col_axis)} pitch={_pitch(cv)}",
        f"# scene_hash: {meta.get('scene_hash', '')}",
        _meta_line(meta),
        f"row\tcol\t{AXIS_LABEL.get(row_axis, row_axis)}\t{AXIS_LABEL.get(col_axis, col_axis)}\t{quantity}_{units}",
    ]
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            lines.append(f"{i}\t{j}\t{_fmt(rv[i])}\t{_fmt(cv[j])}\t{_fmt(grid[i, j])}")
    p = Path(path)
    p.write_text("\n".join(lines) + "\n")
    return p


def read_grid(path):
    """Inverse of write_grid: (grid, row_values, col_values, header dict)."""
    header = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(": ")
                header[key] = value
                continue
            if line.startswith("row\t"):
                continue
            if line:
                rows.append(line.split("\t"))
    n, m = (int(v) for v in header["shape"].split())
    grid = np.empty((n, m))
    rv, cv = np.empty(n), np.empty(m)
    for r in rows:
        i, j = int(r[0]), int(r[1])
        rv[i], cv[j], grid[i, j] = float(r[2]), float(r[3]), float(r[4])
    if "meta" in header:
        header["meta"] = json.loads(header["meta"])
    return grid, rv, cv, header


def write_pgm(path, grid: np.ndarray, quantity: str = "map") -> Path:
    """16-bit binary PGM, linear min-max scaling recorded in the header.

    A constant map becomes uniform mid-grey (32768) with zero_range=1.
    NaN pixels are written as 0.
    """
    g = np.asarray(grid, dtype=float)
    finite = np.isfinite(g)
    lo = float(np.min(g[finite])) if finite.any() else 0.0
    hi = float(np.max(g[finite])) if finite.any() else 0.0
    zero_range = not hi > lo
    if zero_range:
        img = np.full(g.shape, 32768, dtype=np.uint16)
    else:
        img = np.round((np.where(finite, g, lo) - lo) / (hi - lo) * 65535).astype(np.uint16)
    img[~finite] = 0
    head = (
        f"P5\n# nvbridge {__version__} {quantity}\n# min={lo!r} max={hi!r} zero_range={int(zero_range)}\n"
        f"{g.shape[1]} {g.shape[0]}\n65535\n"
    )
    p = Path(path)
    p.write_bytes(head.encode("ascii") + img.astype(">u2").tobytes())
    return p


def read_pgm(path):
    """(uint16 image, header comment dict) of a file written by write_pgm."""
    data = Path(path).read_bytes()
    fields, comments, pos = [], {}, 0
    while len(fields) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    comments[k] = v
            continue
        fields.extend(line.split())
    if fields[0] != "P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 65535:
        raise ValueError("only 16-bit PGM files are supported")
    img = np.frombuffer(data[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w)
    return img.astype(np.uint16), comments


def write_map(result: ScanResult, stem, formats=("tsv",)) -> list[Path]:
    """Write the maps of a scan as ``<stem>_<quantity>.tsv`` (and ``.pgm``)."""
    stem = Path(stem)
    meta = dict(result.metadata)
    row_axis = meta.get("rows", {}).get("axis", "row")
    col_axis = meta.get("cols", {}).get("axis", "col")
    out = []
    for quantity in ("reset_map", "reaction_map", "per_pixel_tau"):
        grid = getattr(result, quantity)
        if np.all(np.isnan(grid)):
            continue
        m = dict(meta)
        if quantity == "per_pixel_tau":
            m["timed_out"] = np.flatnonzero(result.timed_out.ravel()).tolist()
        base = stem.with_name(f"{stem.name}_{quantity}")
        if "tsv" in formats:
            out.append(write_grid(base.with_suffix(".tsv"), grid, result.row_values, result.col_values,
                                  row_axis, col_axis, quantity, UNITS[quantity], m))
        if "pgm" in formats:
            out.append(write_pgm(base.with_suffix(".pgm"), grid, quantity))
    return out


def write_table(path, columns: list[str], rows, meta: dict | None = None, title: str = "table") -> Path:
    """Tab-separated table with ``#`` header lines; column names carry units."""
    lines = [f"# nvbridge {title} {__version__}"]
    if meta:
        lines.append(_meta_line(meta))
    lines.append("\t".join(columns))
    for r in rows:
        lines.append("\t".join(_fmt(v) if not isinstance(v, str) else v for v in r))
    p = Path(path)
    p.write_text("\n".join(lines) + "\n")
    return p


def read_table(path):
    """(column names, float array, meta dict) of a table written by write_table."""
    meta, cols, data = {}, None, []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# meta: "):
                    meta = json.loads(line[len("# meta: "):])
                continue
            if cols is None:
                cols = line.split("\t")
                continue
            data.append([float(v) for v in line.split("\t")])
    if cols is None:
        raise ValueError(f"{path}: no column header")
    return cols, np.array(data, dtype=float).reshape(-1, len(cols)), meta


SWEEP_COLUMNS = ["P_main_mW", "P_aux_mW", "J_pA", "sigma_pA"]


def write_dataset(path, data: SweepDataset) -> Path:
    return write_table(path, SWEEP_COLUMNS, data.rows, data.meta, title="sweep")


def read_dataset(path) -> SweepDataset:
    cols, arr, meta = read_table(path)
    if cols[:4] != SWEEP_COLUMNS:
        raise ValueError(f"{path}: expected columns {SWEEP_COLUMNS}, found {cols}")
    return SweepDataset(arr[:, :4], meta)


def write_report(path, report: FitReport) -> Path:
    p = Path(path)
    doc = {"tool": f"nvbridge {__version__}", **report.to_dict()}
    p.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    return p
