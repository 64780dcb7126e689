"""Long-format longitudinal data: one row per (subject, visit)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd

INTERCEPT = "(intercept)"


class DataError(ValueError):
    """Problem with input data; ``row`` is the 1-based CSV line when known."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


@dataclass
class LongitudinalDataset:
    """Observations sorted by (subject, time).

    ``subject`` holds integer codes ``0..n-1`` into ``subject_ids``.
    ``Z`` has one column per random effect (``q`` may be zero).
    """

    subject: np.ndarray
    time: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    subject_ids: list = field(default_factory=list)
    fixed_names: list = field(default_factory=list)
    random_names: list = field(default_factory=list)

    def __post_init__(self):
        self.subject = np.asarray(self.subject, dtype=np.int64)
        self.time = np.asarray(self.time, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.asarray(self.X, dtype=float).reshape(self.y.size, -1)
        self.Z = np.asarray(self.Z, dtype=float).reshape(self.y.size, -1)
        N = self.y.size
        if N == 0:
            raise DataError("dataset has no rows")
        if not (self.subject.size == self.time.size == N):
            raise DataError("subject, time and response lengths differ")
        for name, arr in (("time", self.time), ("response", self.y), ("X", self.X), ("Z", self.Z)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {name}")
        n = int(self.subject.max()) + 1
        if self.subject.min() < 0 or np.any(np.bincount(self.subject, minlength=n) == 0):
            raise DataError("subject codes must cover 0..n-1 with at least one row each")
        if np.any(np.diff(self.subject) < 0):
            raise DataError("rows must be grouped and sorted by subject")
        same = np.diff(self.subject) == 0
        if np.any(np.diff(self.time)[same] <= 0):
            raise DataError("times must be strictly increasing within subject")
        if not self.subject_ids:
            self.subject_ids = list(range(n))
        if not self.fixed_names:
            self.fixed_names = [f"x{k + 1}" for k in range(self.X.shape[1])]
        if not self.random_names:
            self.random_names = [f"z{k + 1}" for k in range(self.Z.shape[1])]

    @classmethod
    def from_arrays(cls, subject, time, y, X, Z=None, fixed_names=None, random_names=None):
        """Build from unsorted arrays; ``Z=None`` means a random intercept."""
        subject = np.asarray(subject)
        time = np.asarray(time, dtype=float)
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float).reshape(y.size, -1)
        if Z is None:
            Z = np.ones((y.size, 1))
            random_names = random_names or [INTERCEPT]
        Z = np.asarray(Z, dtype=float).reshape(y.size, -1)
        ids, codes = np.unique(subject, return_inverse=True)
        order = np.lexsort((time, codes))
        return cls(codes[order], time[order], y[order], X[order], Z[order],
                   subject_ids=ids.tolist(), fixed_names=list(fixed_names or []),
                   random_names=list(random_names or []))

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.subject, minlength=self.n_subjects)

    def to_frame(self) -> pd.DataFrame:
        """Canonical long-format frame (what :func:`load_csv` reads back)."""
        df = pd.DataFrame({"subject": np.asarray(self.subject_ids, dtype=object)[self.subject],
                           "time": self.time, "y": self.y})
        for k, name in enumerate(self.fixed_names):
            df[name] = self.X[:, k]
        for k, name in enumerate(self.random_names):
            if name != INTERCEPT:
                df[name] = self.Z[:, k]
        return df

    def canonical_schema(self) -> dict:
        return {"subject": "subject", "time": "time", "response": "y",
                "fixed": list(self.fixed_names), "random": list(self.random_names)}


def _numeric(df: pd.DataFrame, col: str) -> np.ndarray:
    vals = pd.to_numeric(df[col], errors="coerce")
    bad = vals.isna().to_numpy()
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        # header is line 1
        raise DataError(f"column {col!r} has a missing or non-numeric value {df[col].iloc[first]!r}",
                        row=first + 2)
    return vals.to_numpy(dtype=float)


def load_csv(path, schema: dict[str, Any]) -> LongitudinalDataset:
    """Read a long-format CSV.

    ``schema`` keys:

    - ``subject``, ``time``, ``response``: column names.
    - ``fixed``: list of covariate columns.
    - ``random``: list of columns for Z; ``"(intercept)"`` adds a column of
      ones.  Defaults to a random intercept.
    - ``interactions``: list of column-name pairs; each adds the rowwise
      product ``"A*B"`` after the listed fixed covariates.
    - ``standardize``: ``True`` (all fixed columns, interactions included),
      or a list of column names; standardised columns get mean 0 and sample
      variance 1 (ddof=1).
    """
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except pd.errors.ParserError as exc:
        raise DataError(f"malformed CSV: {exc}") from None
    except pd.errors.EmptyDataError:
        raise DataError("empty CSV file") from None
    return dataset_from_frame(df, schema)


def dataset_from_frame(df: pd.DataFrame, schema: dict[str, Any]) -> LongitudinalDataset:
    fixed = list(schema.get("fixed", []))
    random = list(schema.get("random", [INTERCEPT]))
    for key in ("subject", "time", "response"):
        if key not in schema:
            raise DataError(f"schema is missing the {key!r} role")
    needed = [schema["subject"], schema["time"], schema["response"], *fixed,
              *[c for c in random if c != INTERCEPT]]
    for pair in schema.get("interactions", []):
        needed.extend(pair)
    missing = [c for c in dict.fromkeys(needed) if c not in df.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    if len(df) == 0:
        raise DataError("CSV has no data rows")

    subj_raw = df[schema["subject"]].astype(str).str.strip()
    empty = (subj_raw == "").to_numpy()
    if empty.any():
        raise DataError("empty subject identifier", row=int(np.flatnonzero(empty)[0]) + 2)
    time = _numeric(df, schema["time"])
    y = _numeric(df, schema["response"])

    cols = {c: _numeric(df, c) for c in dict.fromkeys(fixed + [c for pair in schema.get("interactions", []) for c in pair])}
    X_cols = [cols[c] for c in fixed]
    names = list(fixed)
    for a, b in schema.get("interactions", []):
        X_cols.append(cols[a] * cols[b])
        names.append(f"{a}*{b}")
    X = np.column_stack(X_cols) if X_cols else np.empty((len(df), 0))

    std = schema.get("standardize", False)
    targets = names if std is True else list(std or [])
    for c in targets:
        if c not in names:
            raise DataError(f"cannot standardize unknown covariate {c!r}")
        k = names.index(c)
        sd = X[:, k].std(ddof=1) if X.shape[0] > 1 else 0.0
        if not sd > 0:
            raise DataError(f"covariate {c!r} is constant and cannot be standardized")
        X[:, k] = (X[:, k] - X[:, k].mean()) / sd

    Z = np.column_stack([np.ones(len(df)) if c == INTERCEPT else _numeric(df, c) for c in random]) \
        if random else np.empty((len(df), 0))

    # Subject labels keep first-appearance order.
    labels, first = np.unique(subj_raw.to_numpy(), return_index=True)
    labels = labels[np.argsort(first)]
    code_of = {lab: i for i, lab in enumerate(labels)}
    codes = np.array([code_of[s] for s in subj_raw.to_numpy()], dtype=np.int64)
    order = np.lexsort((time, codes))
    sc, st = codes[order], time[order]
    dup = (np.diff(sc) == 0) & (np.diff(st) <= 0)
    if dup.any():
        row = int(order[np.flatnonzero(dup)[0] + 1]) + 2
        raise DataError("repeated time within a subject", row=row)
    return LongitudinalDataset(sc, st, y[order], X[order], Z[order],
                               subject_ids=labels.tolist(), fixed_names=names,
                               random_names=random)
