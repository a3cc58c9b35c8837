"""Grouped datasets: CSV ingestion, standardization, synthetic generation, sampling.

A :class:`GroupedDataset` carries a feature matrix, labels, and a protected
group id per row.  Group ids are dense integers assigned in order of first
appearance so that encodings are stable across runs.  Datasets are immutable
after construction (arrays are marked read-only) and safe to share across
threads; samplers own their RNG state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np


class SchemaError(ValueError):
    """A required column is missing or the schema is inconsistent."""


class FeatureParseError(ValueError):
    """A feature cell could not be parsed as a real number."""


class EmptyDatasetError(ValueError):
    """The input contains no data rows."""


class RatioError(ValueError):
    """Requested group-size ratio cannot be reached by subsampling."""


@dataclass(frozen=True)
class ColumnSchema:
    """Column roles for CSV ingestion.

    ``feature_cols`` are parsed as reals.  ``group_col`` is categorical.  The
    label column is categorical by default: with ``positive_label`` it is
    binarized (1 for the positive value, 0 otherwise), otherwise labels get
    dense ids in order of first appearance.  ``label_kind="real"`` parses the
    label as a regression target instead.
    """

    feature_cols: tuple[str, ...]
    label_col: str
    group_col: str
    positive_label: str | None = None
    label_kind: str = "categorical"

    def __post_init__(self):
        if self.label_kind not in ("categorical", "real"):
            raise ValueError(f"unknown label kind {self.label_kind!r}")
        if self.label_kind == "real" and self.positive_label is not None:
            raise ValueError("positive_label only applies to categorical labels")


@dataclass(frozen=True)
class GroupedDataset:
    """Feature matrix plus labels and protected-group ids.

    Invariants: ``features``, ``labels`` and ``groups`` share the same length
    n >= 1, and every group id in ``group_names`` appears at least once.
    """

    features: np.ndarray          # (n, d) float64
    labels: np.ndarray            # (n,) int64 class ids, or float64 targets
    groups: np.ndarray            # (n,) int64 dense group ids
    group_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        groups = np.asarray(self.groups, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        n = feats.shape[0]
        if n < 1:
            raise EmptyDatasetError("dataset must contain at least one row")
        if labels.shape != (n,) or groups.shape != (n,):
            raise ValueError("features, labels, groups must have identical length")
        names = dict(self.group_names)
        if not names:
            names = {int(g): str(g) for g in np.unique(groups)}
        present = set(np.unique(groups).tolist())
        if set(names) != present:
            raise ValueError(f"group_names ids {sorted(names)} do not match present groups {sorted(present)}")
        for arr in (feats, labels, groups):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "group_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def group_ids(self) -> list[int]:
        return sorted(self.group_names)

    def group_indices(self, group_id: int) -> np.ndarray:
        return np.nonzero(self.groups == group_id)[0]

    def group_fraction(self, group_id: int) -> float:
        return self.group_indices(group_id).size / self.n

    def num_classes(self) -> int:
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("num_classes is only defined for classification labels")
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class BatchPlan:
    """Poisson mini-batch plan: inclusion probability q, seed, iteration count."""

    q: float
    seed: int
    iterations: int

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"sampling probability must be in [0, 1], got {self.q}")
        if self.iterations < 1:
            raise ValueError(f"iteration count must be >= 1, got {self.iterations}")

    def batches(self, n: int):
        """Yield ``iterations`` independent Poisson batches over n indices."""
        rng = np.random.default_rng(self.seed)
        for _ in range(self.iterations):
            yield poisson_batch(n, self.q, rng)


def _is_real(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _dense_encode(values: list[str]) -> tuple[np.ndarray, dict[int, str]]:
    ids: dict[str, int] = {}
    out = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        if v not in ids:
            ids[v] = len(ids)
        out[i] = ids[v]
    return out, {i: v for v, i in ids.items()}


def load_csv(path, schema: ColumnSchema) -> GroupedDataset:
    """Load a header-ed CSV file into a :class:`GroupedDataset`.

    Raises :class:`SchemaError` when a named column is absent,
    :class:`FeatureParseError` (with the offending data-row index) for
    non-numeric feature cells, and :class:`EmptyDatasetError` for files
    without data rows.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file is empty") from None
        col_idx = {name: i for i, name in enumerate(header)}
        for col in (*schema.feature_cols, schema.label_col, schema.group_col):
            if col not in col_idx:
                raise SchemaError(f"{path}: column {col!r} not found in header")
        feat_idx = [col_idx[c] for c in schema.feature_cols]
        lab_idx = col_idx[schema.label_col]
        grp_idx = col_idx[schema.group_col]

        feats: list[list[float]] = []
        raw_labels: list[str] = []
        raw_groups: list[str] = []
        for row_i, row in enumerate(reader):
            parsed = []
            for j, col in zip(feat_idx, schema.feature_cols):
                try:
                    parsed.append(float(row[j]))
                except (ValueError, IndexError):
                    cell = row[j] if j < len(row) else "<missing>"
                    raise FeatureParseError(
                        f"{path}: row {row_i}: cannot parse feature {col!r} value {cell!r}"
                    ) from None
            feats.append(parsed)
            raw_labels.append(row[lab_idx])
            raw_groups.append(row[grp_idx])

    if not feats:
        raise EmptyDatasetError(f"{path}: no data rows")

    if schema.label_kind == "real":
        try:
            labels = np.array([float(v) for v in raw_labels])
        except ValueError:
            bad = next(i for i, v in enumerate(raw_labels) if not _is_real(v))
            raise FeatureParseError(
                f"{path}: row {bad}: cannot parse label value {raw_labels[bad]!r}"
            ) from None
    elif schema.positive_label is not None:
        labels = np.array([1 if v == schema.positive_label else 0 for v in raw_labels], dtype=np.int64)
    else:
        labels, _ = _dense_encode(raw_labels)
    groups, group_names = _dense_encode(raw_groups)
    return GroupedDataset(np.array(feats, dtype=np.float64), labels, groups, group_names)


def _standardize_block(X: np.ndarray) -> np.ndarray:
    # population variance (ddof=0); constant columns map to zeros
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    out = X - mu
    nonconst = sd > 0.0
    out[:, nonconst] /= sd[nonconst]
    out[:, ~nonconst] = 0.0
    return out


def standardize(ds: GroupedDataset, scope: str = "global") -> GroupedDataset:
    """Zero-mean / unit-variance features, globally or within each group.

    ``per_group`` scope standardizes each feature independently inside every
    group, which equalizes per-group mean squared feature norms by
    construction.  Idempotent up to floating-point roundoff.
    """
    if scope not in ("global", "per_group"):
        raise ValueError(f"unknown standardization scope {scope!r}")
    X = np.array(ds.features, dtype=np.float64)
    if scope == "global":
        X = _standardize_block(X)
    else:
        for g in ds.group_ids:
            idx = ds.group_indices(g)
            X[idx] = _standardize_block(X[idx])
    return replace(ds, features=X)


def synth_two_group(
    n_a: int,
    n_b: int,
    d: int,
    norm_scale_a: float = 1.0,
    norm_scale_b: float = 1.0,
    seed: int = 0,
) -> GroupedDataset:
    """Two-group Gaussian dataset with a shared linear-threshold teacher.

    Group "a" features are ``norm_scale_a * N(0, I_d)`` and likewise for "b",
    so the expected input-norm ratio between groups is the scale ratio.
    Binary labels are the sign of the margin against a teacher weight vector
    drawn once from N(0, I_d); everything is deterministic given the seed.
    """
    if n_a < 1 or n_b < 1:
        raise ValueError("group sizes must be >= 1")
    if d < 1:
        raise ValueError("feature dimension must be >= 1")
    if norm_scale_a <= 0 or norm_scale_b <= 0:
        raise ValueError("norm scales must be positive")
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal(d)
    X_a = norm_scale_a * rng.standard_normal((n_a, d))
    X_b = norm_scale_b * rng.standard_normal((n_b, d))
    X = np.vstack([X_a, X_b])
    labels = (X @ teacher > 0.0).astype(np.int64)
    groups = np.concatenate([np.zeros(n_a, dtype=np.int64), np.ones(n_b, dtype=np.int64)])
    return GroupedDataset(X, labels, groups, {0: "a", 1: "b"})


def poisson_batch(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of a Poisson sub-sample: each of n rows kept independently w.p. q."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling probability must be in [0, 1], got {q}")
    if q == 0.0:
        return np.empty(0, dtype=np.int64)
    if q == 1.0:
        return np.arange(n, dtype=np.int64)
    return np.nonzero(rng.random(n) < q)[0].astype(np.int64)


def fixed_batch(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``size`` indices sampled without replacement."""
    if not 1 <= size <= n:
        raise ValueError(f"fixed batch size must be in [1, {n}], got {size}")
    return np.sort(rng.choice(n, size=size, replace=False)).astype(np.int64)


def resample_ratio(ds: GroupedDataset, target_ratio: float, seed: int = 0) -> GroupedDataset:
    """Subsample group "b" (id 1) so that |D_b| / |D_a| matches ``target_ratio``.

    Group "a" rows are preserved bit-exactly; only the second group may shrink,
    so ratios above the current one raise :class:`RatioError` naming the
    maximum achievable value.  Sampling is without replacement and keeps the
    original row order of survivors.
    """
    if len(ds.group_ids) != 2:
        raise ValueError("resample_ratio requires exactly two groups")
    if target_ratio <= 0:
        raise ValueError("target ratio must be positive")
    a_id, b_id = ds.group_ids
    n_a = ds.group_indices(a_id).size
    idx_b = ds.group_indices(b_id)
    n_b = idx_b.size
    want_b = int(round(target_ratio * n_a))
    if want_b > n_b:
        raise RatioError(
            f"ratio {target_ratio} needs {want_b} group-b rows but only {n_b} exist "
            f"(max achievable ratio {n_b / n_a})"
        )
    if want_b < 1:
        raise RatioError(f"ratio {target_ratio} leaves group b empty")
    if want_b == n_b:
        return ds
    rng = np.random.default_rng(seed)
    keep_b = np.sort(rng.choice(idx_b, size=want_b, replace=False))
    keep = np.sort(np.concatenate([ds.group_indices(a_id), keep_b]))
    return GroupedDataset(
        ds.features[keep], ds.labels[keep], ds.groups[keep], dict(ds.group_names)
    )
