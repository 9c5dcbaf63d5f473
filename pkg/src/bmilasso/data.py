"""Data model for multiply-imputed regression data.

A :class:`Dataset` is one completed design ``(X, y)``; an
:class:`IncompleteDataset` carries a missingness mask ``R`` where ``R[i, j] == 0``
marks a missing cell; an :class:`ImputedStack` holds the ``D`` completed copies
that every fitter consumes.

File formats
------------
long CSV
    header ``.imp,y,<cov_1>,...,<cov_p>``; ``.imp`` is an integer in ``1..D``
    and every imputation contributes the same number of rows.
multi-file
    ``<stem>_1.csv ... <stem>_D.csv``, each with header ``y,<cov_1>,...``.
mask CSV
    header ``<cov_1>,...,<cov_p>``; entries 0 (missing) or 1 (observed).

Numbers are written with 17 significant digits so doubles round-trip exactly.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CONTINUOUS = "continuous"
BINARY = "binary"

_FMT = "%.17g"


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def infer_kinds(X: np.ndarray) -> tuple[str, ...]:
    """Column is binary iff all its finite values lie in {0, 1}."""
    kinds = []
    for col in np.asarray(X, dtype=float).T:
        vals = col[np.isfinite(col)]
        kinds.append(BINARY if vals.size and np.all((vals == 0) | (vals == 1)) else CONTINUOUS)
    return tuple(kinds)


def default_names(p: int) -> tuple[str, ...]:
    return tuple(f"X{j + 1}" for j in range(p))


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    column_names: tuple[str, ...] = ()
    column_kinds: tuple[str, ...] = ()

    def __post_init__(self):
        X = _frozen(self.X)
        y = _frozen(self.y).ravel()
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        n, p = X.shape
        if y.shape[0] != n:
            raise ValueError(f"y has {y.shape[0]} rows but X has {n}")
        if n < 2 or p < 1:
            raise ValueError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("Dataset contains non-finite entries")
        names = tuple(self.column_names) or default_names(p)
        kinds = tuple(self.column_kinds) or infer_kinds(X)
        if len(names) != p or len(kinds) != p:
            raise ValueError("column_names/column_kinds must have length p")
        for j, k in enumerate(kinds):
            if k not in (CONTINUOUS, BINARY):
                raise ValueError(f"unknown column kind {k!r}")
            if k == BINARY and not np.all((X[:, j] == 0) | (X[:, j] == 1)):
                raise ValueError(f"binary column {names[j]!r} has values outside {{0, 1}}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "column_kinds", kinds)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def complete_cases(self, mask: np.ndarray) -> "Dataset":
        keep = np.all(np.asarray(mask) == 1, axis=1)
        return Dataset(self.X[keep], self.y[keep], self.column_names, self.column_kinds)


@dataclass(frozen=True)
class IncompleteDataset:
    """Covariates with missing cells; ``X`` holds NaN wherever ``R == 0``."""

    X: np.ndarray
    y: np.ndarray
    R: np.ndarray
    column_names: tuple[str, ...] = ()
    column_kinds: tuple[str, ...] = ()

    def __post_init__(self):
        R = np.array(self.R, dtype=np.int8)
        X = np.array(self.X, dtype=float)
        y = _frozen(self.y).ravel()
        if R.shape != X.shape:
            raise ValueError(f"mask shape {R.shape} does not match X shape {X.shape}")
        if not np.all((R == 0) | (R == 1)):
            raise ValueError("mask entries must be 0 (missing) or 1 (observed)")
        if y.shape[0] != X.shape[0] or not np.all(np.isfinite(y)):
            raise ValueError("y must be fully observed with one entry per row")
        X[R == 0] = np.nan
        if not np.all(np.isfinite(X[R == 1])):
            raise ValueError("observed cells must be finite")
        p = X.shape[1]
        names = tuple(self.column_names) or default_names(p)
        kinds = tuple(self.column_kinds) or infer_kinds(X)
        n_obs = R.sum(axis=0)
        for j in range(p):
            if n_obs[j] < 2:
                raise ValueError(f"column {names[j]!r} has fewer than 2 observed values")
        X.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "column_kinds", kinds)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_dataset(cls, data: Dataset, R: np.ndarray) -> "IncompleteDataset":
        return cls(data.X, data.y, R, data.column_names, data.column_kinds)

    def complete_cases(self) -> Dataset:
        keep = np.all(self.R == 1, axis=1)
        return Dataset(self.X[keep], self.y[keep], self.column_names, self.column_kinds)


@dataclass(frozen=True)
class ImputedStack:
    datasets: tuple[Dataset, ...]
    provenance: str = "loaded"

    def __post_init__(self):
        ds = tuple(self.datasets)
        if not ds:
            raise ValueError("an ImputedStack needs at least one dataset")
        first = ds[0]
        for d, other in enumerate(ds[1:], start=2):
            if other.X.shape != first.X.shape:
                raise ValueError(f"imputation {d} has shape {other.X.shape}, expected {first.X.shape}")
            if other.column_names != first.column_names:
                raise ValueError(f"imputation {d} column names differ from imputation 1")
        if self.provenance not in ("simulated", "imputed", "loaded", "standardized"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "datasets", ds)

    @property
    def D(self) -> int:
        return len(self.datasets)

    @property
    def n(self) -> int:
        return self.datasets[0].n

    @property
    def p(self) -> int:
        return self.datasets[0].p

    @property
    def column_names(self) -> tuple[str, ...]:
        return self.datasets[0].column_names

    @property
    def column_kinds(self) -> tuple[str, ...]:
        return self.datasets[0].column_kinds

    @property
    def X(self) -> np.ndarray:
        """Covariates as a ``(D, n, p)`` array."""
        return np.stack([d.X for d in self.datasets])

    @property
    def Y(self) -> np.ndarray:
        """Outcomes as a ``(D, n)`` array."""
        return np.stack([d.y for d in self.datasets])

    @classmethod
    def from_arrays(cls, X, Y, column_names=(), column_kinds=(), provenance="loaded"):
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if X.ndim == 2:
            X, Y = X[None], Y.reshape(1, -1)
        return cls(
            tuple(Dataset(X[d], Y[d], column_names, column_kinds) for d in range(X.shape[0])),
            provenance,
        )

    def reordered(self, order: Sequence[int]) -> "ImputedStack":
        return ImputedStack(tuple(self.datasets[i] for i in order), self.provenance)


@dataclass(frozen=True)
class StandardizationState:
    x_mean: np.ndarray  # (D, p)
    x_sd: np.ndarray  # (D, p)
    y_mean: np.ndarray  # (D,)

    def __post_init__(self):
        for name in ("x_mean", "x_sd", "y_mean"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if np.any(self.x_sd <= 0):
            raise ValueError("standard deviations must be positive")

    @classmethod
    def identity(cls, D: int, p: int, y_mean=None) -> "StandardizationState":
        y_mean = np.zeros(D) if y_mean is None else y_mean
        return cls(np.zeros((D, p)), np.ones((D, p)), y_mean)


def standardize(stack: ImputedStack) -> tuple[ImputedStack, StandardizationState]:
    """Scale each column to mean 0 / sd 1 and center ``y``, per imputed dataset.

    The sd uses ``ddof=1``.  Fitters work on the returned stack; estimates are
    mapped back with :func:`destandardize_coefficients`.
    """
    X, Y = stack.X, stack.Y
    mean = X.mean(axis=1)
    sd = X.std(axis=1, ddof=1)
    bad = np.argwhere(~(sd > 0))
    if bad.size:
        d, j = bad[0]
        raise ValueError(
            f"column {stack.column_names[j]!r} has zero variance in imputation {d + 1}"
        )
    y_mean = Y.mean(axis=1)
    Xs = (X - mean[:, None, :]) / sd[:, None, :]
    Ys = Y - y_mean[:, None]
    # kinds of standardized binary columns are no longer {0,1}
    kinds = (CONTINUOUS,) * stack.p
    out = ImputedStack(
        tuple(Dataset(Xs[d], Ys[d], stack.column_names, kinds) for d in range(stack.D)),
        "standardized",
    )
    return out, StandardizationState(mean, sd, y_mean)


def unstandardize(stack: ImputedStack, state: StandardizationState, column_kinds=()) -> ImputedStack:
    X = stack.X * state.x_sd[:, None, :] + state.x_mean[:, None, :]
    Y = stack.Y + state.y_mean[:, None]
    return ImputedStack.from_arrays(X, Y, stack.column_names, column_kinds, "loaded")


def destandardize_coefficients(beta_std, state: StandardizationState):
    """Map standardized slopes to the original scale.

    Parameters
    ----------
    beta_std : array of shape (..., D, p)
        Leading axes (e.g. draws) are broadcast.

    Returns
    -------
    intercepts : array of shape (..., D)
    slopes : array of shape (..., D, p)
    """
    beta_std = np.asarray(beta_std, dtype=float)
    if beta_std.shape[-2:] != state.x_sd.shape:
        raise ValueError(
            f"coefficient shape {beta_std.shape[-2:]} does not match state {state.x_sd.shape}"
        )
    slopes = beta_std / state.x_sd
    intercepts = state.y_mean - np.sum(slopes * state.x_mean, axis=-1)
    return intercepts, slopes


# ---------------------------------------------------------------------------
# CSV ingestion / emission


def _parse_float(cell: str, row: int, col: int) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ValueError(f"non-numeric cell at ({row}, {col}): {cell!r}") from None
    if not math.isfinite(v):
        raise ValueError(f"non-numeric cell at ({row}, {col}): {cell!r}")
    return v


def _read_numeric_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = []
        for r, line in enumerate(reader, start=1):
            if not line:
                continue
            if len(line) != len(header):
                raise ValueError(f"{path}: row {r} has {len(line)} cells, expected {len(header)}")
            rows.append([_parse_float(c.strip(), r, c_idx + 1) for c_idx, c in enumerate(line)])
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def _split_outcome(header, arr, path):
    if "y" not in header:
        raise ValueError(f"{path}: missing 'y' column")
    iy = header.index("y")
    cov = [i for i, h in enumerate(header) if h not in ("y", ".imp")]
    return arr[:, iy], arr[:, cov], tuple(header[i] for i in cov)


def _kinds_for(Xs: list[np.ndarray]) -> tuple[str, ...]:
    return infer_kinds(np.concatenate(Xs, axis=0))


def load_stack(path, format: str = "long-csv") -> ImputedStack:
    """Read an :class:`ImputedStack` from disk.

    ``format="long-csv"`` reads one file keyed by ``.imp``; ``format="multi-file"``
    treats ``path`` as a stem and reads ``<stem>_1.csv``, ``<stem>_2.csv``, ...
    until the next index is absent.
    """
    path = Path(path)
    if format == "long-csv":
        header, arr = _read_numeric_csv(path)
        if ".imp" not in header:
            raise ValueError(f"{path}: missing '.imp' column")
        imp = arr[:, header.index(".imp")]
        if np.any(imp != np.round(imp)):
            raise ValueError(f"{path}: '.imp' must be integer")
        imp = imp.astype(int)
        D = int(imp.max()) if imp.size else 0
        if D < 1 or set(np.unique(imp)) != set(range(1, D + 1)):
            raise ValueError(f"{path}: '.imp' must cover 1..D")
        y, X, names = _split_outcome(header, arr, path)
        counts = np.bincount(imp)[1:]
        if np.any(counts != counts[0]):
            raise ValueError(f"{path}: imputations have unequal row counts {counts.tolist()}")
        parts = [(X[imp == d], y[imp == d]) for d in range(1, D + 1)]
    elif format == "multi-file":
        parts, names, d = [], None, 1
        while True:
            f = path.parent / f"{path.name}_{d}.csv"
            if not f.exists():
                break
            header, arr = _read_numeric_csv(f)
            y, X, nm = _split_outcome(header, arr, f)
            if names is not None and (nm != names or X.shape != parts[0][0].shape):
                raise ValueError(f"{f}: schema differs from {path.name}_1.csv")
            names = nm
            parts.append((X, y))
            d += 1
        if not parts:
            raise ValueError(f"no files matching {path.name}_1.csv")
    else:
        raise ValueError(f"unknown stack format {format!r}")
    if len(parts) < 2:
        warnings.warn("stack has D = 1; models degenerate to single-dataset fits", stacklevel=2)
    kinds = _kinds_for([X for X, _ in parts])
    return ImputedStack(tuple(Dataset(X, y, names, kinds) for X, y in parts), "loaded")


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(v) for v in row) + "\n")


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return _FMT % v


def emit_stack(stack: ImputedStack, path, format: str = "long-csv") -> list[Path]:
    """Write ``stack`` in either format; returns the files written."""
    path = Path(path)
    names = list(stack.column_names)
    if format == "long-csv":
        rows = []
        for d, ds in enumerate(stack.datasets, start=1):
            for i in range(ds.n):
                rows.append([d, ds.y[i], *ds.X[i]])
        _write_rows(path, [".imp", "y", *names], rows)
        return [path]
    if format == "multi-file":
        out = []
        for d, ds in enumerate(stack.datasets, start=1):
            f = path.parent / f"{path.name}_{d}.csv"
            _write_rows(f, ["y", *names], [[ds.y[i], *ds.X[i]] for i in range(ds.n)])
            out.append(f)
        return out
    raise ValueError(f"unknown stack format {format!r}")


def emit_incomplete(data: IncompleteDataset, data_path, mask_path) -> None:
    """Write covariates (missing cells as empty strings) and the 0/1 mask."""
    names = list(data.column_names)
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(["y", *names]) + "\n")
        for i in range(data.n):
            cells = [_FMT % data.y[i]]
            cells += ["" if data.R[i, j] == 0 else _FMT % data.X[i, j] for j in range(data.p)]
            fh.write(",".join(cells) + "\n")
    _write_rows(Path(mask_path), names, data.R.astype(int).tolist())


def load_incomplete(data_path, mask_path) -> IncompleteDataset:
    """Read covariates plus a mask CSV; cells masked 0 may hold anything (or be empty)."""
    header_m, R = _read_numeric_csv(Path(mask_path))
    with open(data_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        raw = [line for line in reader if line]
    if "y" not in header:
        raise ValueError(f"{data_path}: missing 'y' column")
    iy = header.index("y")
    cov = [i for i, h in enumerate(header) if h != "y"]
    names = tuple(header[i] for i in cov)
    if tuple(header_m) != names:
        raise ValueError("mask header does not match data covariate columns")
    if R.shape != (len(raw), len(cov)):
        raise ValueError(f"mask shape {R.shape} does not match data shape {(len(raw), len(cov))}")
    X = np.full(R.shape, np.nan)
    y = np.empty(len(raw))
    for r, line in enumerate(raw):
        y[r] = _parse_float(line[iy], r + 1, iy + 1)
        for c, i in enumerate(cov):
            if R[r, c] == 1:
                X[r, c] = _parse_float(line[i], r + 1, i + 1)
    return IncompleteDataset(X, y, R.astype(np.int8), names)


def emit_table(path, header: Sequence[str], rows) -> None:
    """Generic CSV writer with round-trip float formatting."""
    _write_rows(Path(path), list(header), rows)


__all__ = [
    "BINARY",
    "CONTINUOUS",
    "Dataset",
    "ImputedStack",
    "IncompleteDataset",
    "StandardizationState",
    "destandardize_coefficients",
    "emit_incomplete",
    "emit_stack",
    "emit_table",
    "infer_kinds",
    "load_incomplete",
    "load_stack",
    "standardize",
    "unstandardize",
]
