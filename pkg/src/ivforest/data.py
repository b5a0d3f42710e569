"""Observational data container, CSV ingestion, and tercile discretization.

A dataset bundles the feature matrix with outcome Y, binary treatment D,
binary instrument Z, and a cluster id per row (the randomization unit).
Rows with any missing mapped cell are dropped at ingestion and counted;
there is no imputation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import (
    CsvParseError,
    DegenerateCutpointError,
    DomainError,
    SchemaError,
)

FEATURE_KINDS = ("binary", "tercile-coded", "continuous")

# Quantile convention for tercile cutpoints; a data-value quantile so that
# cutpoints are observed values and the tie-to-lower-code rule is exact.
TERCILE_QUANTILE_METHOD = "lower"


@dataclass(frozen=True)
class FeatureSpec:
    """Declares one covariate column: its kind and propensity-model role."""

    name: str
    kind: str = "continuous"
    in_propensity: bool = True
    tercile_cutpoints: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise SchemaError(f"unknown feature kind {self.kind!r} for {self.name!r}")
        if self.tercile_cutpoints is not None:
            if self.kind != "tercile-coded":
                raise SchemaError(
                    f"{self.name!r}: cutpoints only valid for tercile-coded features"
                )
            lo, hi = self.tercile_cutpoints
            if not lo < hi:
                raise SchemaError(
                    f"{self.name!r}: tercile cutpoints must be strictly increasing"
                )


@dataclass(frozen=True)
class CausalDataset:
    """Validated (X, Y, D, Z, cluster) sample, immutable after construction."""

    features: np.ndarray
    outcome: np.ndarray
    treatment: np.ndarray
    instrument: np.ndarray
    cluster: np.ndarray
    feature_specs: tuple[FeatureSpec, ...]
    dropped_rows: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        y = np.asarray(self.outcome, dtype=np.float64)
        d = np.asarray(self.treatment, dtype=np.float64)
        z = np.asarray(self.instrument, dtype=np.float64)
        c = np.asarray(self.cluster, dtype=np.int64)
        n = X.shape[0]
        if n < 1:
            raise SchemaError("dataset is empty")
        for name, arr in (("outcome", y), ("treatment", d), ("instrument", z), ("cluster", c)):
            if arr.shape[0] != n:
                raise SchemaError(f"{name} length {arr.shape[0]} != {n} rows")
        if X.shape[1] != len(self.feature_specs):
            raise SchemaError(
                f"{X.shape[1]} feature columns vs {len(self.feature_specs)} specs"
            )
        for arr, label in ((d, "treatment"), (z, "instrument")):
            bad = ~np.isin(arr, (0.0, 1.0))
            if bad.any():
                row = int(np.nonzero(bad)[0][0])
                raise DomainError(
                    f"{label} takes value {arr[row]} outside {{0,1}} at row {row}",
                    row=row,
                )
        if not (np.any(z == 0.0) and np.any(z == 1.0)):
            raise DomainError("instrument must take both values 0 and 1")
        for arr, label in ((X, "features"), (y, "outcome")):
            if not np.isfinite(arr).all():
                raise DomainError(f"{label} contain non-finite values after ingestion")
        for j, spec in enumerate(self.feature_specs):
            col = X[:, j]
            if spec.kind == "binary" and not np.isin(col, (0.0, 1.0)).all():
                raise DomainError(f"binary feature {spec.name!r} has values outside {{0,1}}")
            if spec.kind == "tercile-coded" and not np.isin(col, (1.0, 2.0, 3.0)).all():
                raise DomainError(
                    f"tercile-coded feature {spec.name!r} has codes outside {{1,2,3}}"
                )
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "treatment", d)
        object.__setattr__(self, "instrument", z)
        object.__setattr__(self, "cluster", c)
        object.__setattr__(self, "feature_specs", tuple(self.feature_specs))
        X.setflags(write=False)
        y.setflags(write=False)
        d.setflags(write=False)
        z.setflags(write=False)
        c.setflags(write=False)

    @property
    def n_obs(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def feature_names(self) -> list[str]:
        return [s.name for s in self.feature_specs]

    def cluster_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(unique cluster ids, dense 0..C-1 index per row)."""
        uniq, inv = np.unique(self.cluster, return_inverse=True)
        return uniq, inv.astype(np.int64)

    def propensity_columns(self) -> np.ndarray:
        cols = [j for j, s in enumerate(self.feature_specs) if s.in_propensity]
        return np.asarray(cols, dtype=np.int64)

    def compliance_summary(self) -> dict:
        """Contingency cells of D by Z plus the two conditional uptake rates."""
        z = self.instrument
        d = self.treatment
        cells = {
            "n_z0_d0": int(np.sum((z == 0) & (d == 0))),
            "n_z0_d1": int(np.sum((z == 0) & (d == 1))),
            "n_z1_d0": int(np.sum((z == 1) & (d == 0))),
            "n_z1_d1": int(np.sum((z == 1) & (d == 1))),
        }
        n_z0 = cells["n_z0_d0"] + cells["n_z0_d1"]
        n_z1 = cells["n_z1_d0"] + cells["n_z1_d1"]
        cells["p_d1_given_z1"] = cells["n_z1_d1"] / n_z1 if n_z1 else float("nan")
        cells["p_d1_given_z0"] = cells["n_z0_d1"] / n_z0 if n_z0 else float("nan")
        return cells


def discretize_terciles(values) -> tuple[np.ndarray, tuple[float, float]]:
    """Tercile codes {1,2,3} and the (1/3, 2/3) empirical cutpoints.

    Ties at a cutpoint take the lower code. Raises DegenerateCutpointError
    when the cutpoints coincide (constant-ish input).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 3:
        raise SchemaError("tercile discretization needs a vector of length >= 3")
    if not np.isfinite(v).all():
        raise DomainError("tercile discretization input contains non-finite values")
    lo, hi = np.quantile(v, [1.0 / 3.0, 2.0 / 3.0], method=TERCILE_QUANTILE_METHOD)
    if not lo < hi:
        raise DegenerateCutpointError(
            f"tercile cutpoints coincide at {lo}; values nearly constant"
        )
    codes = np.where(v <= lo, 1, np.where(v <= hi, 2, 3)).astype(np.int64)
    return codes, (float(lo), float(hi))


def _parse_cell(raw: str, row: int, column: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise CsvParseError(
            f"non-numeric value {raw!r} in column {column!r} at data row {row}",
            row=row,
            column=column,
        ) from None


def load_csv(
    path,
    schema: list[FeatureSpec],
    outcome: str,
    treatment: str,
    instrument: str,
    cluster: str,
    discretize: set[str] | None = None,
) -> CausalDataset:
    """Read a header CSV into a validated dataset.

    Rows with any empty mapped cell are dropped and counted. Features named
    in `discretize` are converted to tercile codes; their cutpoints land in
    the resulting FeatureSpec and in dataset metadata.
    """
    discretize = set(discretize or ())
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        rows = list(reader)

    header = [h.strip() for h in header]
    colpos = {name: i for i, name in enumerate(header)}
    wanted = [outcome, treatment, instrument, cluster] + [s.name for s in schema]
    for name in wanted:
        if name not in colpos:
            raise SchemaError(f"column {name!r} not found in {path} (header: {header})")

    kept: list[list[float]] = []
    dropped = 0
    for r, row in enumerate(rows):
        cells = []
        missing = False
        for name in wanted:
            pos = colpos[name]
            raw = row[pos].strip() if pos < len(row) else ""
            if raw == "" or raw.upper() in ("NA", "NAN"):
                missing = True
                break
            cells.append(_parse_cell(raw, r, name))
        if missing:
            dropped += 1
            continue
        kept.append(cells)

    if not kept:
        raise SchemaError(f"{path}: no complete rows after dropping {dropped}")

    arr = np.asarray(kept, dtype=np.float64)
    y, d, z = arr[:, 0], arr[:, 1], arr[:, 2]
    c = arr[:, 3]
    if not np.all(c == np.round(c)):
        raise CsvParseError(f"cluster column {cluster!r} must hold integer ids")
    X = arr[:, 4:].copy()

    for col, label in ((d, treatment), (z, instrument)):
        bad = ~np.isin(col, (0.0, 1.0))
        if bad.any():
            row = int(np.nonzero(bad)[0][0])
            raise DomainError(
                f"column {label!r} takes value {col[row]} outside {{0,1}} at data row {row}",
                row=row,
                column=label,
            )

    specs: list[FeatureSpec] = []
    meta: dict = {"dropped_rows": dropped, "source": str(path)}
    cutpoints_meta = {}
    for j, spec in enumerate(schema):
        if spec.name in discretize:
            codes, cuts = discretize_terciles(X[:, j])
            X[:, j] = codes
            spec = replace(spec, kind="tercile-coded", tercile_cutpoints=cuts)
            cutpoints_meta[spec.name] = {
                "cutpoints": list(cuts),
                "quantile_method": TERCILE_QUANTILE_METHOD,
            }
        specs.append(spec)
    if cutpoints_meta:
        meta["terciles"] = cutpoints_meta

    return CausalDataset(
        features=X,
        outcome=y,
        treatment=d,
        instrument=z,
        cluster=c.astype(np.int64),
        feature_specs=tuple(specs),
        dropped_rows=dropped,
        metadata=meta,
    )


def save_csv(dataset: CausalDataset, path, outcome="y", treatment="d",
             instrument="z", cluster="cluster") -> None:
    """Write a dataset back out in the ingestion format (round-trippable)."""
    names = [outcome, treatment, instrument, cluster] + dataset.feature_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(dataset.n_obs):
            row = [
                repr(float(dataset.outcome[i])),
                repr(float(dataset.treatment[i])),
                repr(float(dataset.instrument[i])),
                str(int(dataset.cluster[i])),
            ]
            row += [repr(float(v)) for v in dataset.features[i]]
            w.writerow(row)


def feature_specs_from_config(cfg: list[dict]) -> list[FeatureSpec]:
    specs = []
    for entry in cfg:
        if "name" not in entry:
            raise SchemaError(f"feature entry without a name: {entry}")
        cuts = entry.get("tercile_cutpoints")
        specs.append(
            FeatureSpec(
                name=entry["name"],
                kind=entry.get("kind", "continuous"),
                in_propensity=bool(entry.get("in_propensity", True)),
                tercile_cutpoints=tuple(cuts) if cuts else None,
            )
        )
    return specs


def load_dataset_config(path) -> dict:
    """Parse the dataset section of a run config file (JSON)."""
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    return cfg
