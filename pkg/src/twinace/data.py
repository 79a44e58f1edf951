"""Twin-pair data model, CSV ingestion and pre-fit transformations.

A :class:`TwinDataset` stores its pairs column-wise in read-only numpy
arrays; :class:`TwinPair` objects are materialised on demand.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InsufficientDataError, ParseError, SchemaError, SingularityError

log = logging.getLogger(__name__)

_MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}


class Zygosity(str, enum.Enum):
    MZ = "MZ"
    DZ = "DZ"

    @property
    def weight(self) -> float:
        """Kinship weight: share of additive genetic variance between co-twins."""
        return 1.0 if self is Zygosity.MZ else 0.5

    @property
    def kinship(self) -> np.ndarray:
        w = self.weight
        return np.array([[1.0, w], [w, 1.0]])

    @classmethod
    def parse(cls, token: str) -> "Zygosity":
        return cls(token.strip().upper())


@dataclass(frozen=True)
class TwinPair:
    y1: float
    y2: float
    zygosity: Zygosity
    covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.y1) and math.isfinite(self.y2)):
            raise ValueError("trait values must be finite")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TwinDataset:
    """Immutable collection of twin pairs.

    Attributes
    ----------
    y : (N, 2) array of trait values (twin 1, twin 2).
    mz : (N,) boolean array, True for monozygotic pairs.
    covariates : (N, K) array of pair-level covariates.
    covariate_names : names of the K covariate columns.
    """

    y: np.ndarray
    mz: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = _readonly(self.y).reshape(-1, 2)
        mz = np.array(self.mz, dtype=bool).reshape(-1)
        mz.setflags(write=False)
        cov = _readonly(self.covariates).reshape(len(y), len(self.covariate_names))
        if len(mz) != len(y):
            raise ValueError("zygosity and trait arrays differ in length")
        if not np.all(np.isfinite(y)):
            raise ValueError("trait values must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mz", mz)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @classmethod
    def from_arrays(cls, y, mz, covariates: Mapping[str, Sequence[float]] | None = None):
        covariates = dict(covariates or {})
        names = tuple(covariates)
        n = len(np.asarray(mz))
        cov = np.column_stack([np.asarray(covariates[k], float) for k in names]) if names else np.empty((n, 0))
        return cls(np.asarray(y, float), np.asarray(mz, bool), cov, names)

    @classmethod
    def from_pairs(cls, pairs: Iterable[TwinPair], covariate_names: Sequence[str] = ()):
        pairs = list(pairs)
        names = tuple(covariate_names)
        for i, p in enumerate(pairs):
            if set(p.covariates) != set(names):
                raise ValueError(f"pair {i} covariates {sorted(p.covariates)} != {sorted(names)}")
        y = np.array([[p.y1, p.y2] for p in pairs], dtype=float).reshape(-1, 2)
        mz = np.array([p.zygosity is Zygosity.MZ for p in pairs], dtype=bool)
        cov = np.array([[p.covariates[k] for k in names] for p in pairs], dtype=float).reshape(len(pairs), len(names))
        return cls(y, mz, cov, names)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def pairs(self) -> list[TwinPair]:
        out = []
        for i in range(len(self)):
            covs = {k: float(self.covariates[i, j]) for j, k in enumerate(self.covariate_names)}
            zyg = Zygosity.MZ if self.mz[i] else Zygosity.DZ
            out.append(TwinPair(float(self.y[i, 0]), float(self.y[i, 1]), zyg, covs))
        return out

    @property
    def n_mz(self) -> int:
        return int(self.mz.sum())

    @property
    def n_dz(self) -> int:
        return len(self) - self.n_mz

    @property
    def weights(self) -> np.ndarray:
        """Kinship weight of every pair."""
        return np.where(self.mz, 1.0, 0.5)

    def covariate(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}; have {list(self.covariate_names)}") from None
        return self.covariates[:, j]

    def subset(self, mask) -> "TwinDataset":
        mask = np.asarray(mask)
        return TwinDataset(self.y[mask], self.mz[mask], self.covariates[mask], self.covariate_names)

    def with_traits(self, y) -> "TwinDataset":
        return TwinDataset(np.asarray(y, float), self.mz, self.covariates, self.covariate_names)

    def require_both_groups(self) -> None:
        if self.n_mz < 1 or self.n_dz < 1:
            raise InsufficientDataError(
                f"need at least one MZ and one DZ pair (have {self.n_mz} MZ, {self.n_dz} DZ)"
            )

    def variance_ratio(self) -> float:
        """Ratio of MZ to DZ sample variance of the pooled individual trait values."""
        return float(np.var(self.y[self.mz]) / np.var(self.y[~self.mz]))


def read_csv(
    path,
    trait_cols: Sequence[str],
    zygosity_col: str,
    covariate_cols: Sequence[str] = (),
    binary_cols: Mapping[str, str] | None = None,
    drop_missing: bool = True,
) -> TwinDataset:
    """Load twin pairs from a comma-separated file with a header row.

    ``binary_cols`` maps a covariate column to the label coded as 1 (every other
    label becomes 0), e.g. ``{"sex": "M"}``. Such columns must also appear in
    ``covariate_cols``. Rows with a missing required cell are dropped (complete
    cases) unless ``drop_missing`` is False, in which case they raise.
    """
    path = Path(path)
    if len(trait_cols) != 2:
        raise ValueError("exactly two trait columns are required")
    binary_cols = {k: v.strip().lower() for k, v in (binary_cols or {}).items()}
    covariate_cols = list(covariate_cols)
    for name in binary_cols:
        if name not in covariate_cols:
            covariate_cols.append(name)

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(trait_cols[0], str(path)) from None
        index = {}
        for col in [*trait_cols, zygosity_col, *covariate_cols]:
            if col not in header:
                raise SchemaError(col, str(path))
            index[col] = header.index(col)

        ys, mz, covs = [], [], []
        binary_seen: dict[str, set[str]] = {k: set() for k in binary_cols}
        dropped = 0
        for rownum, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            cells = {col: (row[i].strip() if i < len(row) else "") for col, i in index.items()}
            missing = [c for c, v in cells.items() if v.lower() in _MISSING_TOKENS]
            if missing:
                if drop_missing:
                    dropped += 1
                    continue
                raise ParseError(f"missing value in column(s) {missing}", rownum)
            try:
                zyg = Zygosity.parse(cells[zygosity_col])
            except ValueError:
                raise ParseError(f"unknown zygosity token {cells[zygosity_col]!r}", rownum) from None
            pair = []
            for col in trait_cols:
                pair.append(_parse_float(cells[col], col, rownum))
            cvals = []
            for col in covariate_cols:
                if col in binary_cols:
                    token = cells[col].lower()
                    binary_seen[col].add(token)
                    if len(binary_seen[col]) > 2:
                        raise ParseError(f"column {col!r} has more than two labels", rownum)
                    cvals.append(1.0 if token == binary_cols[col] else 0.0)
                else:
                    cvals.append(_parse_float(cells[col], col, rownum))
            ys.append(pair)
            mz.append(zyg is Zygosity.MZ)
            covs.append(cvals)

    if dropped:
        log.warning("dropped %d row(s) with missing values from %s", dropped, path)
    n = len(ys)
    return TwinDataset(
        np.array(ys, float).reshape(n, 2),
        np.array(mz, bool),
        np.array(covs, float).reshape(n, len(covariate_cols)),
        tuple(covariate_cols),
    )


def _parse_float(text: str, col: str, rownum: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r} in column {col!r}", rownum) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {text!r} in column {col!r}", rownum)
    return value


def write_csv(data: TwinDataset, path, trait_cols=("y1", "y2"), zygosity_col="zygosity") -> None:
    """Write a dataset in the schema :func:`read_csv` accepts.

    Floats are written with ``repr`` so a round trip is bit-exact.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*trait_cols, zygosity_col, *data.covariate_names])
        for i in range(len(data)):
            w.writerow(
                [
                    repr(float(data.y[i, 0])),
                    repr(float(data.y[i, 1])),
                    "MZ" if data.mz[i] else "DZ",
                    *(repr(float(v)) for v in data.covariates[i]),
                ]
            )


@dataclass(frozen=True)
class ResidualizationModel:
    coefficients: np.ndarray
    covariate_names: tuple[str, ...]

    def predict(self, data: TwinDataset) -> np.ndarray:
        X = _design(data, self.covariate_names)
        return (X @ self.coefficients).reshape(-1, 1) * np.ones((1, 2))


def _design(data: TwinDataset, names: Sequence[str]) -> np.ndarray:
    cols = [np.ones(len(data))] + [data.covariate(k) for k in names]
    return np.column_stack(cols)


def collinear_columns(X: np.ndarray, names: Sequence[str], rtol: float = 1e-10) -> list[str]:
    """Names of the columns involved in an exact linear dependence of ``X``."""
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    tol = rtol * (s[0] if s.size else 1.0)
    null = vt[s <= tol]
    if null.size == 0:
        return []
    involved = np.any(np.abs(null) > 1e-8, axis=0)
    return [n for n, hit in zip(names, involved) if hit]


def residualize(data: TwinDataset, covariates: Sequence[str] | None = None):
    """Regress stacked individual trait values on intercept + covariates.

    Returns the residualised dataset and the fitted model. ``covariates``
    defaults to every covariate in the dataset.
    """
    names = tuple(data.covariate_names if covariates is None else covariates)
    X = _design(data, names)
    p = X.shape[1]
    if 2 * len(data) < p + 1:
        raise InsufficientDataError(f"{2 * len(data)} observations cannot support {p} regression coefficients")
    labels = ["(intercept)", *names]
    if np.linalg.matrix_rank(X) < p:
        raise SingularityError(
            f"covariate design is rank deficient; collinear columns: {collinear_columns(X, labels)}",
            columns=collinear_columns(X, labels),
        )
    # both twins share the covariate row, so the stacked OLS reduces to pair means
    beta, *_ = np.linalg.lstsq(X, data.y.mean(axis=1), rcond=None)
    model = ResidualizationModel(beta, names)
    resid = data.y - model.predict(data)
    # remove the rounding-level mean left by the solve
    resid = resid - resid.mean()
    return data.with_traits(resid), model


def center(data: TwinDataset, mode: str = "per_zygosity") -> TwinDataset:
    """Subtract the global mean or the per-zygosity means from every trait value."""
    y = np.array(data.y)
    if mode == "global":
        if len(data) == 0:
            raise InsufficientDataError("cannot center an empty dataset")
        y -= y.mean()
    elif mode == "per_zygosity":
        for grp in (data.mz, ~data.mz):
            if not grp.any():
                raise InsufficientDataError("per-zygosity centering needs at least one MZ and one DZ pair")
            y[grp] -= y[grp].mean()
    else:
        raise ValueError(f"unknown centering mode {mode!r}")
    return data.with_traits(y)
