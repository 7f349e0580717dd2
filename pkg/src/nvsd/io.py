"""File formats: signal CSV with a JSON provenance header, scenario and result JSON."""

from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .exceptions import InputFormatError
from .physics import SpinParams

SIGNAL_COLUMNS = ("tau_s", "p_x")


def _fmt(x) -> str:
    """Shortest round-tripping float text; keeps files byte-stable."""
    return repr(float(x))


def provenance(command: str, config: dict, **extra) -> dict:
    """Header block embedded in every output."""
    out = {"tool": "nvsd", "version": __version__, "command": command, "config": config}
    out.update(extra)
    return out


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], header: Optional[dict] = None):
    """CSV with an optional ``#``-prefixed one-line JSON header."""
    path = Path(path)
    buf = _io.StringIO()
    if header is not None:
        buf.write("# " + _dumps(header) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue())


def write_signal(path, tau, p_x, header: Optional[dict] = None):
    write_csv(path, SIGNAL_COLUMNS, zip(np.asarray(tau, dtype=float), np.asarray(p_x, dtype=float)), header)


def read_csv_header(path) -> Optional[dict]:
    """The JSON provenance header of a CSV file, or ``None``."""
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("#"):
        try:
            return json.loads(first[1:].strip())
        except json.JSONDecodeError as exc:
            raise InputFormatError(f"{path}: provenance header is not valid JSON: {exc.msg}", 1, exc.colno + 1)
    return None


def read_signal(path) -> Tuple[np.ndarray, np.ndarray, Optional[dict]]:
    """Parse a two-column signal CSV.

    Returns
    -------
    tau, p_x : ndarray
    header : dict or None

    Raises
    ------
    InputFormatError
        With the 1-based line and column of the first bad cell.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputFormatError(f"cannot read signal file {path}: {exc}")
    header = None
    tau, p_x = [], []
    seen_columns = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if lineno == 1:
                try:
                    header = json.loads(line[1:].strip())
                except json.JSONDecodeError as exc:
                    raise InputFormatError(f"{path}: provenance header is not valid JSON: {exc.msg}", lineno, exc.colno + 1)
            continue
        cells = [c.strip() for c in raw.split(",")]
        if not seen_columns and not _is_number(cells[0]):
            if tuple(cells) != SIGNAL_COLUMNS:
                raise InputFormatError(f"{path}: expected columns {','.join(SIGNAL_COLUMNS)}, got {raw.strip()!r}", lineno, 1)
            seen_columns = True
            continue
        seen_columns = True
        if len(cells) != 2:
            raise InputFormatError(f"{path}: expected 2 columns, found {len(cells)}", lineno, 1)
        col = 1
        values = []
        for cell in cells:
            try:
                v = float(cell)
            except ValueError:
                raise InputFormatError(f"{path}: cannot parse {cell!r} as a number", lineno, col) from None
            if not math.isfinite(v):
                raise InputFormatError(f"{path}: non-finite value {cell!r}", lineno, col)
            values.append(v)
            col += len(cell) + 1
        tau.append(values[0])
        p_x.append(values[1])
    if not tau:
        raise InputFormatError(f"{path}: no data rows")
    return np.asarray(tau), np.asarray(p_x), header


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"{path}: {exc.msg}", exc.lineno, exc.colno)


def spins_to_json(spins: Sequence[SpinParams]) -> List[dict]:
    return [{"A_Hz": s.A, "B_Hz": s.B, "A_kHz": s.A / 1e3, "B_kHz": s.B / 1e3} for s in spins]


def spins_from_json(rows) -> List[SpinParams]:
    out = []
    for i, r in enumerate(rows):
        try:
            if "A_Hz" in r:
                out.append(SpinParams(float(r["A_Hz"]), float(r["B_Hz"])))
            else:
                out.append(SpinParams(float(r["A_kHz"]) * 1e3, float(r["B_kHz"]) * 1e3))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputFormatError(f"spin record {i} is malformed: {exc}")
    return out
