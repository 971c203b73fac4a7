"""Dataset model, CSV ingestion and result serialization."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    InsufficientDataError,
    InvalidArgumentError,
    SchemaError,
)

SCORE_FLOOR = 1e-6
MIN_USABLE_ROWS = 10


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ObservationalDataset:
    """Covariates ``x`` (n x p), the index of X^l among them, treatment and outcome."""

    x: np.ndarray
    xl_index: int
    d: np.ndarray
    y: np.ndarray
    external_scores: np.ndarray | None = None
    covariate_names: tuple[str, ...] | None = None
    dropped_rows: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise InvalidArgumentError("x must be a matrix")
        n, p = x.shape
        d = np.asarray(self.d, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if d.size != n or y.size != n:
            raise InvalidArgumentError("x, d and y must have the same number of rows")
        if not 0 <= self.xl_index < p:
            raise InvalidArgumentError(f"xl_index {self.xl_index} out of range for p={p}")
        if not np.all((d == 0) | (d == 1)):
            raise DataError("treatment must be 0/1")
        if d.sum() == 0 or d.sum() == n:
            raise DataError("need at least one treated and one control unit")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError("covariates and outcome must be finite")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "d", _frozen(d))
        object.__setattr__(self, "y", _frozen(y))
        if self.external_scores is not None:
            e = np.asarray(self.external_scores, dtype=float).ravel()
            if e.size != n:
                raise InvalidArgumentError("external_scores length differs from n")
            if not np.all((e > 0) & (e < 1)):
                raise DataError("external scores must lie strictly inside (0, 1)")
            object.__setattr__(self, "external_scores", _frozen(e))
        if self.covariate_names is not None:
            names = tuple(self.covariate_names)
            if len(names) != p:
                raise InvalidArgumentError("covariate_names length differs from p")
            object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def xl(self) -> np.ndarray:
        return self.x[:, self.xl_index]

    def replace(self, **changes) -> "ObservationalDataset":
        kw = dict(
            x=self.x,
            xl_index=self.xl_index,
            d=self.d,
            y=self.y,
            external_scores=self.external_scores,
            covariate_names=self.covariate_names,
            dropped_rows=self.dropped_rows,
        )
        kw.update(changes)
        return ObservationalDataset(**kw)

    def take(self, idx) -> "ObservationalDataset":
        """Row subset (or resample, with repeated indices)."""
        idx = np.asarray(idx)
        ext = None if self.external_scores is None else self.external_scores[idx]
        return self.replace(x=self.x[idx], d=self.d[idx], y=self.y[idx], external_scores=ext, dropped_rows=0)


@dataclass(frozen=True, eq=False)
class EvaluationGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).ravel()
        if pts.size == 0:
            raise InvalidArgumentError("grid must be nonempty")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("grid points must be finite")
        if pts.size > 1 and not np.all(np.diff(pts) > 0):
            raise InvalidArgumentError("grid must be strictly increasing")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self):
        return self.points.size


def default_grid(dataset: ObservationalDataset, m: int = 25, trim: float = 0.05) -> EvaluationGrid:
    """``m`` equispaced points between the ``trim`` and ``1 - trim`` quantiles of X^l."""
    if m < 2:
        raise InvalidArgumentError("grid needs at least 2 points")
    if not 0 < trim < 0.5:
        raise InvalidArgumentError("trim must lie in (0, 0.5)")
    xl = dataset.xl
    lo, hi = np.quantile(xl, [trim, 1.0 - trim])
    if not hi > lo:
        raise InvalidArgumentError("X^l has (near) zero spread; cannot build a grid")
    return EvaluationGrid(np.linspace(lo, hi, m))


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


def _to_float(cell: str) -> float | None:
    s = cell.strip()
    if not s:
        return None
    try:
        v = float(s)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def read_csv(
    path,
    treatment_col: str,
    outcome_col: str,
    xl_col: str,
    score_col: str | None = None,
    covariate_cols: Sequence[str] | str = "all",
) -> ObservationalDataset:
    """Load an observational dataset.

    Rows with a missing or non-numeric cell in any selected column are dropped
    (the count lands in ``dropped_rows``). A numeric treatment outside {0, 1}
    is an error naming the file row. Scores of exactly 0 or 1 are clamped to
    [1e-6, 1 - 1e-6]; anything outside [0, 1] is rejected.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        rows = list(reader)

    special = [treatment_col, outcome_col] + ([score_col] if score_col else [])
    for name in special + [xl_col]:
        if name not in header:
            raise SchemaError(f"{path}: missing column {name!r}")
    if isinstance(covariate_cols, str):
        if covariate_cols != "all":
            raise InvalidArgumentError("covariate_cols must be a list or 'all'")
        covs = [h for h in header if h not in special]
    else:
        covs = list(covariate_cols)
        for name in covs:
            if name not in header:
                raise SchemaError(f"{path}: missing column {name!r}")
        if xl_col not in covs:
            covs = [xl_col] + covs
    if xl_col not in covs:
        raise SchemaError(f"{path}: X^l column {xl_col!r} is not among the covariates")

    pos = {h: i for i, h in enumerate(header)}
    selected = [treatment_col, outcome_col] + covs + ([score_col] if score_col else [])
    good: list[list[float]] = []
    dropped = 0
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            dropped += 1
            continue
        vals = [_to_float(row[pos[c]]) for c in selected]
        if any(v is None for v in vals):
            dropped += 1
            continue
        if vals[0] not in (0.0, 1.0):
            raise DataError(f"{path}: row {lineno}: treatment value {row[pos[treatment_col]]!r} not in {{0,1}}", row=lineno)
        if score_col and not 0.0 <= vals[-1] <= 1.0:
            raise DataError(f"{path}: row {lineno}: score {vals[-1]} outside [0, 1]", row=lineno)
        good.append(vals)

    if len(good) < MIN_USABLE_ROWS:
        raise InsufficientDataError(
            f"{path}: only {len(good)} usable rows ({dropped} dropped); need {MIN_USABLE_ROWS}"
        )
    arr = np.array(good)
    ncov = len(covs)
    scores = None
    if score_col:
        scores = np.clip(arr[:, -1], SCORE_FLOOR, 1.0 - SCORE_FLOOR)
    return ObservationalDataset(
        x=arr[:, 2 : 2 + ncov],
        xl_index=covs.index(xl_col),
        d=arr[:, 0],
        y=arr[:, 1],
        external_scores=scores,
        covariate_names=tuple(covs),
        dropped_rows=dropped,
    )


def write_dataset_csv(dataset: ObservationalDataset, path, treatment_col="d", outcome_col="y", score_col=None, scores=None):
    """Write a dataset in the layout :func:`read_csv` expects."""
    names = list(dataset.covariate_names or [f"x{j + 1}" for j in range(dataset.p)])
    header = [treatment_col, outcome_col] + names
    cols = [dataset.d, dataset.y] + [dataset.x[:, j] for j in range(dataset.p)]
    if score_col is not None:
        header.append(score_col)
        cols.append(dataset.external_scores if scores is None else np.asarray(scores))
    lines = [",".join(header)]
    for row in zip(*cols):
        lines.append(",".join(_fmt(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# result serialization
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    if not math.isfinite(v):
        return ""
    s = f"{v:.6g}"
    return "0" if s == "-0" else s


def _json_num(v):
    if v is None:
        return None
    v = float(v)
    if not math.isfinite(v):
        return None
    out = float(f"{v:.6g}")
    return 0.0 if out == 0 else out


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


HTE_COLUMNS = ("x", "tau_hat", "variance", "ci_lo", "ci_hi")
METRIC_KEYS = ("scenario", "method", "n", "p", "reps", "bias", "sd", "mae", "mse", "cp95")


def _hte_rows(est):
    n = len(est.grid)

    def col(v):
        return [None] * n if v is None else list(v)

    return list(zip(est.grid.points, est.tau_hat, col(est.variance), col(est.ci_lo), col(est.ci_hi)))


def _metric_record(rep) -> dict:
    rec = {}
    for key in METRIC_KEYS:
        v = getattr(rep, key)
        rec[key] = v if isinstance(v, str) else (int(v) if key in ("n", "p", "reps") else _json_num(v))
    return rec


def results_to_text(obj, fmt: str) -> str:
    """Serialize an HTEEstimate, a MetricsReport, or a list of MetricsReports."""
    if fmt not in ("csv", "json"):
        raise InvalidArgumentError(f"unknown format {fmt!r}")
    reports = obj if isinstance(obj, (list, tuple)) else None
    if reports is None and hasattr(obj, "tau_hat"):
        rows = _hte_rows(obj)
        if fmt == "csv":
            lines = [",".join(HTE_COLUMNS)] + [",".join(_fmt(v) for v in r) for r in rows]
            return "\n".join(lines) + "\n"
        payload = {
            "method": obj.method,
            "level": _json_num(getattr(obj, "level", None)),
            "bandwidths": {k: _json_num(v) for k, v in sorted(obj.bandwidths.items())},
            "points": [dict(zip(HTE_COLUMNS, (_json_num(v) for v in r))) for r in rows],
        }
        return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"
    if reports is None:
        reports = [obj]
    records = [_metric_record(r) for r in reports]
    if fmt == "csv":
        lines = [",".join(METRIC_KEYS)]
        for rec in records:
            lines.append(",".join(v if isinstance(v, str) else (str(v) if isinstance(v, int) else _fmt(v)) for v in rec.values()))
        return "\n".join(lines) + "\n"
    payload = records[0] if len(records) == 1 and not isinstance(obj, (list, tuple)) else {"reports": records}
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def write_results(obj, path, format: str = "csv") -> None:
    """Write results with fixed field order and 6-significant-digit floats."""
    atomic_write_text(path, results_to_text(obj, format))


def read_results(path, format: str | None = None):
    """Read back a file produced by :func:`write_results`.

    Returns a list of dicts (one per row) for CSV, or the decoded JSON object.
    Empty CSV cells come back as ``None``.
    """
    path = Path(path)
    fmt = format or path.suffix.lstrip(".")
    text = path.read_text(encoding="utf-8")
    if fmt == "json":
        return json.loads(text)
    rows = list(csv.DictReader(text.splitlines()))
    out = []
    for row in rows:
        rec = {}
        for k, v in row.items():
            if v == "":
                rec[k] = None
            else:
                try:
                    rec[k] = int(v) if k in ("n", "p", "reps") else float(v)
                except ValueError:
                    rec[k] = v
        out.append(rec)
    return out
