"""Core dataset, configuration and fold types."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from dmla.errors import ConfigurationError, DataValidationError, InvalidPartitionError


def _frozen_array(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    if arr.ndim != ndim:
        if ndim == 2 and arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        else:
            raise DataValidationError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """Aligned per-row outcome, treatment, embedding features and optional guesses.

    Construction copies every input and marks the arrays read-only. It does
    not enforce the invariants; call :func:`validate_table` (or
    :meth:`validate`) for that, so malformed tables can still be reported on.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    ids: tuple
    y_guess: Optional[np.ndarray] = None
    d_guess: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen_array(self.y, 1))
        object.__setattr__(self, "d", _frozen_array(self.d, 1))
        object.__setattr__(self, "x", _frozen_array(self.x, 2))
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        for name in ("y_guess", "d_guess"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen_array(val, 1))

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def has_guesses(self) -> bool:
        return self.y_guess is not None and self.d_guess is not None

    def without_guesses(self) -> "ObservationTable":
        return ObservationTable(y=self.y, d=self.d, x=self.x, ids=self.ids)

    def take(self, rows) -> "ObservationTable":
        rows = np.asarray(rows)
        return ObservationTable(
            y=self.y[rows],
            d=self.d[rows],
            x=self.x[rows],
            ids=[self.ids[i] for i in rows],
            y_guess=None if self.y_guess is None else self.y_guess[rows],
            d_guess=None if self.d_guess is None else self.d_guess[rows],
        )

    def validate(self) -> "ObservationTable":
        report = validate_table(self)
        if not report.ok:
            raise DataValidationError(report.summary(), report.violations)
        return self


@dataclass(frozen=True)
class Violation:
    kind: str  # "non_finite" | "length_mismatch" | "duplicate_id" | "empty_features"
    column: str
    row: Optional[int] = None
    detail: str = ""

    def __str__(self):
        loc = self.column if self.row is None else f"{self.column}[{self.row}]"
        return f"{self.kind} at {loc}" + (f": {self.detail}" if self.detail else "")


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self, limit: int = 10) -> str:
        if self.ok:
            return "pass"
        lines = [str(v) for v in self.violations[:limit]]
        extra = len(self.violations) - limit
        if extra > 0:
            lines.append(f"... and {extra} more")
        return "; ".join(lines)


def validate_table(t: ObservationTable) -> ValidationReport:
    """Check every ObservationTable invariant and report violations with coordinates."""
    n = t.n
    out = []
    vectors = [("y", t.y), ("d", t.d), ("y_guess", t.y_guess), ("d_guess", t.d_guess)]
    for name, vec in vectors:
        if vec is None:
            continue
        if vec.shape[0] != n:
            out.append(Violation("length_mismatch", name, detail=f"{vec.shape[0]} rows, expected {n}"))
        for i in np.flatnonzero(~np.isfinite(vec)):
            out.append(Violation("non_finite", name, int(i), repr(float(vec[i]))))
    if t.x.shape[0] != n:
        out.append(Violation("length_mismatch", "x", detail=f"{t.x.shape[0]} rows, expected {n}"))
    if t.x.shape[1] < 1:
        out.append(Violation("empty_features", "x", detail="p must be >= 1"))
    for i, j in np.argwhere(~np.isfinite(t.x)):
        out.append(Violation("non_finite", f"x_{j}", int(i), repr(float(t.x[i, j]))))
    seen = {}
    for i, ident in enumerate(t.ids):
        if ident in seen:
            out.append(Violation("duplicate_id", "id", i, f"{ident!r} first seen at row {seen[ident]}"))
        else:
            seen[ident] = i
    return ValidationReport(tuple(out))


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Assignment of n rows to k folds. Labels are 0-based."""

    k: int
    assignment: np.ndarray
    seed: int

    def __post_init__(self):
        arr = np.array(self.assignment, dtype=np.int64, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "assignment", arr)

    @property
    def n(self) -> int:
        return self.assignment.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def __eq__(self, other):
        if not isinstance(other, FoldPlan):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.assignment, other.assignment)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.assignment.tobytes() + str(self.k).encode()).hexdigest()[:16]


def make_fold_plan(n: int, k: int, seed: int) -> FoldPlan:
    """Shuffle ``range(n)`` with ``seed`` and split it into ``k`` contiguous blocks."""
    if k < 2:
        raise InvalidPartitionError(f"need at least 2 folds, got k={k}")
    if n < k:
        raise InvalidPartitionError(f"cannot split n={n} rows into k={k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    for label, block in enumerate(np.array_split(perm, k)):
        assignment[block] = label
    return FoldPlan(k=k, assignment=assignment, seed=seed)


@dataclass(frozen=True)
class CvMode:
    kind: str = "loocv"
    inner_k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("loocv", "kfold"):
            raise ConfigurationError(f"unknown cv mode {self.kind!r}")
        if self.kind == "kfold" and (self.inner_k is None or self.inner_k < 2):
            raise ConfigurationError("kfold cv needs inner_k >= 2")
        if self.kind == "loocv" and self.inner_k is not None:
            raise ConfigurationError("loocv takes no inner_k")

    @classmethod
    def parse(cls, text) -> "CvMode":
        if isinstance(text, CvMode):
            return text
        text = str(text).strip().lower()
        if text == "loocv":
            return cls("loocv")
        if text.startswith("kfold:"):
            try:
                return cls("kfold", int(text.split(":", 1)[1]))
            except ValueError as exc:
                raise ConfigurationError(f"bad cv mode {text!r}") from exc
        raise ConfigurationError(f"bad cv mode {text!r}; expected 'loocv' or 'kfold:N'")

    def __str__(self):
        return "loocv" if self.kind == "loocv" else f"kfold:{self.inner_k}"


@dataclass(frozen=True)
class EstimatorConfig:
    k_folds: int = 5
    cv_mode: CvMode = field(default_factory=CvMode)
    lambda_grid_size: int = 100
    lambda_min_ratio: float = 1e-3
    penalize_guess: bool = False
    tol: float = 1e-7
    max_iter: int = 10_000
    seed: int = 0
    # Bypasses path construction and CV when set; a single value is used as-is.
    fixed_lambdas: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "cv_mode", CvMode.parse(self.cv_mode))
        if self.fixed_lambdas is not None:
            lams = tuple(float(v) for v in self.fixed_lambdas)
            if not lams or any(v < 0 for v in lams):
                raise ConfigurationError("fixed_lambdas must be a non-empty tuple of values >= 0")
            object.__setattr__(self, "fixed_lambdas", lams)
        if self.k_folds < 2:
            raise ConfigurationError("k_folds must be >= 2")
        if self.lambda_grid_size < 2:
            raise ConfigurationError("lambda_grid_size must be >= 2")
        if not 0 < self.lambda_min_ratio < 1:
            raise ConfigurationError("lambda_min_ratio must lie in (0, 1)")
        if not self.tol > 0:
            raise ConfigurationError("tol must be > 0")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cv_mode"] = str(self.cv_mode)
        out["fixed_lambdas"] = None if self.fixed_lambdas is None else list(self.fixed_lambdas)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EstimatorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown estimator settings: {sorted(unknown)}")
        data = dict(data)
        if data.get("fixed_lambdas") is not None:
            data["fixed_lambdas"] = tuple(data["fixed_lambdas"])
        return cls(**data)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
