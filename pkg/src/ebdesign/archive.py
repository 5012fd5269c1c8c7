"""Study-archive data model: CSV ingestion, validation, partial-reporting structure.

An archive holds one summary per prior study: the reported estimate vector,
its sampling covariance, and a reporting operator mapping the shared
stratum-level parameter vector to whatever linear functionals the study
actually published (all strata, one stratum, a weighted combination).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ValidationError

# Covariances are accepted when smallest eigenvalue > PD_RELATIVE_TOL * largest.
PD_RELATIVE_TOL = 1e-10
# Condition numbers beyond this draw a warning-level diagnostic, not an error.
NEAR_SINGULAR_CONDITION = 1e8

ARCHIVE_COLUMNS = (
    "study_id",
    "component_index",
    "estimate",
    "se",
    "stratum_index",
    "weight",
    "cov_row",
    "cov_col",
    "cov_value",
)


class Diagnostic(NamedTuple):
    """One validation finding. level is 'error' or 'warning'."""

    level: str
    message: str


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class StudySummary:
    """One prior study's published summary.

    Args:
        study_id: identifier shared by all CSV rows of the study.
        estimate: reported estimate vector, length k.
        covariance: k x k sampling covariance of the estimate.
        reporting_operator: k x n_strata matrix mapping the full stratum
            parameter vector to the reported functionals. Identity rows
            correspond to plain per-stratum reporting.
    """

    study_id: str
    estimate: np.ndarray
    covariance: np.ndarray
    reporting_operator: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "estimate", _readonly(np.atleast_1d(self.estimate)))
        object.__setattr__(self, "covariance", _readonly(np.atleast_2d(self.covariance)))
        object.__setattr__(
            self, "reporting_operator", _readonly(np.atleast_2d(self.reporting_operator))
        )

    @property
    def n_components(self) -> int:
        return self.estimate.shape[0]


@dataclass(frozen=True)
class StudyArchive:
    """Ordered collection of study summaries over a shared parameter dimension."""

    studies: tuple[StudySummary, ...]
    dimension: int

    def __post_init__(self):
        object.__setattr__(self, "studies", tuple(self.studies))

    def __len__(self) -> int:
        return len(self.studies)


def _study_diagnostics(study: StudySummary, dimension: int) -> list[Diagnostic]:
    """Per-study invariant checks, returned as diagnostics."""
    out = []
    k = study.n_components
    sid = study.study_id
    if study.covariance.shape != (k, k):
        out.append(Diagnostic("error", f"study {sid}: covariance shape {study.covariance.shape} does not match {k} components"))
        return out
    if study.reporting_operator.shape[0] != k:
        out.append(Diagnostic("error", f"study {sid}: reporting operator has {study.reporting_operator.shape[0]} rows for {k} components"))
        return out
    if study.reporting_operator.shape[1] != dimension:
        out.append(Diagnostic("error", f"study {sid}: reporting operator has {study.reporting_operator.shape[1]} columns, expected {dimension}"))
        return out
    if not np.allclose(study.covariance, study.covariance.T, rtol=0.0, atol=1e-12 * (1.0 + np.abs(study.covariance).max())):
        out.append(Diagnostic("error", f"study {sid}: covariance is not symmetric"))
        return out
    eigs = np.linalg.eigvalsh(0.5 * (study.covariance + study.covariance.T))
    largest = float(eigs[-1])
    smallest = float(eigs[0])
    if largest <= 0.0 or smallest <= PD_RELATIVE_TOL * largest:
        out.append(Diagnostic("error", f"study {sid}: covariance is not positive definite (eigenvalues in [{smallest:.3e}, {largest:.3e}])"))
    elif smallest > 0.0 and largest / smallest > NEAR_SINGULAR_CONDITION:
        out.append(Diagnostic("warning", f"study {sid}: covariance is near-singular (condition number {largest / smallest:.3e})"))
    if k > dimension:
        out.append(Diagnostic("error", f"study {sid}: {k} reported components exceed dimension {dimension}"))
    elif np.linalg.matrix_rank(study.reporting_operator) < k:
        out.append(Diagnostic("error", f"study {sid}: reporting operator is rank-deficient"))
    return out


def validate_archive(archive: StudyArchive) -> list[Diagnostic]:
    """Checks every archive invariant and reports findings without raising.

    Returns:
        Empty list when all invariants hold; otherwise a list of
        error-level diagnostics for violations and warning-level ones
        for near-singular covariances.
    """
    out = []
    if len(archive.studies) == 0:
        out.append(Diagnostic("error", "archive contains no studies"))
        return out
    if archive.dimension < 1:
        out.append(Diagnostic("error", f"dimension must be >= 1, got {archive.dimension}"))
        return out
    touched = np.zeros(archive.dimension, dtype=bool)
    for study in archive.studies:
        out.extend(_study_diagnostics(study, archive.dimension))
        if study.reporting_operator.shape[1] == archive.dimension:
            touched |= np.any(study.reporting_operator != 0.0, axis=0)
    for g in np.flatnonzero(~touched):
        out.append(Diagnostic("error", f"coordinate {g} unidentified: no study's reporting operator touches it"))
    return out


def _parse_float(text: str | None, line: int, column: str) -> float | None:
    if text is None:
        return None
    text = text.strip()
    if not text:
        return None
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"line {line}: column {column!r} has non-numeric value {text!r}") from None


def _parse_int(text: str | None, line: int, column: str) -> int | None:
    if text is None:
        return None
    text = text.strip()
    if not text:
        return None
    try:
        return int(text)
    except ValueError:
        raise ValidationError(f"line {line}: column {column!r} has non-integer value {text!r}") from None


class _StudyBuilder:
    """Accumulates CSV rows of one study before matrix assembly."""

    def __init__(self, study_id: str):
        self.study_id = study_id
        self.components: dict[int, dict] = {}
        self.cov_entries: list[tuple[int, int, float]] = []

    def component(self, index: int) -> dict:
        return self.components.setdefault(index, {"estimate": None, "se": None, "triples": []})


def load_archive(path, dimension: int) -> StudyArchive:
    """Loads and validates a study archive from CSV.

    One CSV row per reported component; extra rows keyed by the same
    (study_id, component_index) append reporting-operator entries for
    weighted-combination functionals, and cov_row/cov_col/cov_value
    triples spell out non-diagonal covariances. Explicit covariance
    entries override the per-component se.

    Args:
        path: CSV file following the archive schema.
        dimension: shared parameter dimension (number of strata).

    Returns:
        Validated StudyArchive with one StudySummary per distinct study_id.

    Raises:
        ValidationError: malformed rows (with line numbers), non-PD
            covariances, rank-deficient reporting operators, or an
            archive failing any error-level validation.
    """
    if dimension < 1:
        raise ValidationError(f"dimension must be >= 1, got {dimension}")
    builders: dict[str, _StudyBuilder] = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: empty file")
        missing = {"study_id", "component_index"} - set(reader.fieldnames)
        if missing:
            raise ValidationError(f"{path}: missing required columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            sid = (row.get("study_id") or "").strip()
            if not sid:
                raise ValidationError(f"line {line}: empty study_id")
            comp = _parse_int(row.get("component_index"), line, "component_index")
            if comp is None:
                raise ValidationError(f"line {line}: missing component_index")
            builder = builders.setdefault(sid, _StudyBuilder(sid))
            entry = builder.component(comp)
            estimate = _parse_float(row.get("estimate"), line, "estimate")
            if estimate is not None:
                if entry["estimate"] is not None and entry["estimate"] != estimate:
                    raise ValidationError(f"line {line}: study {sid} component {comp} has conflicting estimates")
                entry["estimate"] = estimate
            se = _parse_float(row.get("se"), line, "se")
            if se is not None:
                if entry["se"] is not None and entry["se"] != se:
                    raise ValidationError(f"line {line}: study {sid} component {comp} has conflicting se values")
                entry["se"] = se
            stratum = _parse_int(row.get("stratum_index"), line, "stratum_index")
            if stratum is not None:
                if not 0 <= stratum < dimension:
                    raise ValidationError(f"line {line}: stratum_index {stratum} outside [0, {dimension - 1}]")
                weight = _parse_float(row.get("weight"), line, "weight")
                if weight is None:
                    weight = 1.0  # omitted weight means pure selection
                if any(s == stratum for s, _ in entry["triples"]):
                    raise ValidationError(f"line {line}: study {sid} component {comp} repeats stratum {stratum}")
                entry["triples"].append((stratum, weight))
            cov_row = _parse_int(row.get("cov_row"), line, "cov_row")
            cov_col = _parse_int(row.get("cov_col"), line, "cov_col")
            cov_value = _parse_float(row.get("cov_value"), line, "cov_value")
            if (cov_row is None) != (cov_col is None) or (cov_row is None) != (cov_value is None):
                raise ValidationError(f"line {line}: cov_row, cov_col, cov_value must be given together")
            if cov_row is not None:
                builder.cov_entries.append((cov_row, cov_col, cov_value))
    studies = []
    for sid, builder in builders.items():
        studies.append(_assemble_study(builder, dimension))
    archive = StudyArchive(studies=tuple(studies), dimension=dimension)
    problems = [d for d in validate_archive(archive) if d.level == "error"]
    if problems:
        raise ValidationError("; ".join(d.message for d in problems))
    return archive


def _assemble_study(builder: _StudyBuilder, dimension: int) -> StudySummary:
    sid = builder.study_id
    indices = sorted(builder.components)
    k = len(indices)
    position = {comp: pos for pos, comp in enumerate(indices)}
    estimate = np.empty(k)
    covariance = np.zeros((k, k))
    has_diagonal = np.zeros(k, dtype=bool)
    operator = np.zeros((k, dimension))
    for comp, pos in position.items():
        entry = builder.components[comp]
        if entry["estimate"] is None:
            raise ValidationError(f"study {sid}: component {comp} has no estimate")
        estimate[pos] = entry["estimate"]
        if entry["se"] is not None:
            covariance[pos, pos] = entry["se"] ** 2
            has_diagonal[pos] = True
        if not entry["triples"]:
            raise ValidationError(f"study {sid}: component {comp} has no stratum_index entry")
        for stratum, weight in entry["triples"]:
            operator[pos, stratum] = weight
    for row, col, value in builder.cov_entries:
        if row not in position or col not in position:
            raise ValidationError(f"study {sid}: covariance entry refers to unknown component ({row}, {col})")
        r, c = position[row], position[col]
        covariance[r, c] = value
        covariance[c, r] = value
        if r == c:
            has_diagonal[r] = True
    if not has_diagonal.all():
        comp = indices[int(np.flatnonzero(~has_diagonal)[0])]
        raise ValidationError(f"study {sid}: component {comp} has neither se nor a covariance entry")
    return StudySummary(study_id=sid, estimate=estimate, covariance=covariance, reporting_operator=operator)


def save_archive(archive: StudyArchive, path) -> None:
    """Writes an archive back to CSV such that reloading round-trips exactly.

    Covariances are emitted as explicit upper-triangle entries (se left
    blank) because repr-formatted floats reload bit-identically.
    """
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(ARCHIVE_COLUMNS)
        for study in archive.studies:
            k = study.n_components
            for pos in range(k):
                triples = [(int(s), study.reporting_operator[pos, s]) for s in np.flatnonzero(study.reporting_operator[pos])]
                first_stratum, first_weight = triples[0]
                writer.writerow([study.study_id, pos, repr(float(study.estimate[pos])), "", first_stratum, repr(float(first_weight)), "", "", ""])
                for stratum, weight in triples[1:]:
                    writer.writerow([study.study_id, pos, "", "", stratum, repr(float(weight)), "", "", ""])
            for r in range(k):
                for c in range(r, k):
                    writer.writerow([study.study_id, r, "", "", "", "", r, c, repr(float(study.covariance[r, c]))])


_CONFIG_KEYS = {
    "n_strata",
    "shares",
    "costs",
    "budget",
    "overlap",
    "var_treated",
    "var_control",
    "stratum_sizes",
    "policy_costs",
    "takeup_baseline",
    "takeup_slope",
}


@dataclass(frozen=True)
class StrataConfig:
    """Strata of the planned experiment plus budget and overlap constraints.

    Args:
        shares: population share of each stratum, sums to 1.
        costs: per-unit treatment cost of each stratum.
        budget: total expected-cost cap.
        overlap: lower propensity clamp; propensities live in
            [overlap, 1 - overlap].
        var_treated / var_control: per-stratum outcome variances under
            treatment and control.
        stratum_sizes: per-stratum sample sizes of the planned experiment.
        policy_costs: per-stratum adoption cost subtracted from effect
            means in policy-choice objectives (defaults to zero).
        takeup_baseline / takeup_slope: optional noncompliance model;
            realized take-up is baseline + propensity * slope.
    """

    shares: np.ndarray
    costs: np.ndarray
    budget: float
    overlap: float
    var_treated: np.ndarray
    var_control: np.ndarray
    stratum_sizes: np.ndarray
    policy_costs: np.ndarray | None = None
    takeup_baseline: np.ndarray | None = None
    takeup_slope: np.ndarray | None = None

    def __post_init__(self):
        shares = _readonly(np.atleast_1d(self.shares))
        g = shares.shape[0]
        object.__setattr__(self, "shares", shares)
        for name in ("costs", "var_treated", "var_control", "stratum_sizes"):
            value = _readonly(np.atleast_1d(getattr(self, name)))
            if value.shape != (g,):
                raise ValidationError(f"{name} must have length {g}, got {value.shape}")
            object.__setattr__(self, name, value)
        policy = self.policy_costs
        policy = np.zeros(g) if policy is None else np.atleast_1d(policy)
        if policy.shape != (g,):
            raise ValidationError(f"policy_costs must have length {g}, got {policy.shape}")
        object.__setattr__(self, "policy_costs", _readonly(policy))
        if (self.takeup_baseline is None) != (self.takeup_slope is None):
            raise ValidationError("takeup_baseline and takeup_slope must be given together")
        if self.takeup_baseline is not None:
            for name in ("takeup_baseline", "takeup_slope"):
                value = _readonly(np.atleast_1d(getattr(self, name)))
                if value.shape != (g,):
                    raise ValidationError(f"{name} must have length {g}, got {value.shape}")
                object.__setattr__(self, name, value)
            if np.any(self.takeup_baseline < 0.0) or np.any(self.takeup_slope <= 0.0):
                raise ValidationError("takeup_baseline must be >= 0 and takeup_slope > 0")
        if abs(float(shares.sum()) - 1.0) > 1e-8:
            raise ValidationError(f"shares sum to {shares.sum()!r}, expected 1")
        if not 0.0 < self.overlap < 0.5:
            raise ValidationError(f"overlap must lie in (0, 0.5), got {self.overlap}")
        if np.any(self.costs < 0.0):
            raise ValidationError("costs must be nonnegative")
        for name in ("var_treated", "var_control", "stratum_sizes"):
            if np.any(getattr(self, name) <= 0.0):
                raise ValidationError(f"{name} must be strictly positive")
        if self.budget < 0.0:
            raise ValidationError("budget must be nonnegative")
        floor_cost = float(self.shares @ (self.costs * self.overlap))
        if floor_cost > self.budget + 1e-12:
            raise ValidationError(
                f"infeasible config: minimum-cost design costs {floor_cost:.6g} > budget {self.budget:.6g}"
            )

    @property
    def n_strata(self) -> int:
        return self.shares.shape[0]

    @property
    def propensity_bounds(self) -> tuple[float, float]:
        return self.overlap, 1.0 - self.overlap

    @property
    def has_compliance(self) -> bool:
        return self.takeup_baseline is not None


def _parse_config_value(text: str, line: int):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ValidationError(f"line {line}: unterminated array {text!r}")
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [float(part) for part in inner.split(",")]
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"line {line}: non-numeric value {text!r}") from None


def load_strata_config(path) -> StrataConfig:
    """Reads a StrataConfig from flat key = value text or from JSON.

    Recognized keys: n_strata, shares, costs, budget, overlap,
    var_treated, var_control, stratum_sizes, policy_costs,
    takeup_baseline, takeup_slope. Arrays use bracketed
    comma-separated decimals. Lines starting with # are comments.
    """
    with open(path) as handle:
        text = handle.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        raw = json.loads(text)
    else:
        raw = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"line {line_no}: expected key = value, got {line!r}")
            key, _, value = line.partition("=")
            raw[key.strip()] = _parse_config_value(value, line_no)
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    required = {"shares", "costs", "budget", "overlap", "var_treated", "var_control", "stratum_sizes"}
    missing = required - set(raw)
    if missing:
        raise ValidationError(f"missing config keys: {sorted(missing)}")
    config = StrataConfig(
        shares=np.asarray(raw["shares"], dtype=float),
        costs=np.asarray(raw["costs"], dtype=float),
        budget=float(raw["budget"]),
        overlap=float(raw["overlap"]),
        var_treated=np.asarray(raw["var_treated"], dtype=float),
        var_control=np.asarray(raw["var_control"], dtype=float),
        stratum_sizes=np.asarray(raw["stratum_sizes"], dtype=float),
        policy_costs=None if "policy_costs" not in raw else np.asarray(raw["policy_costs"], dtype=float),
        takeup_baseline=None if "takeup_baseline" not in raw else np.asarray(raw["takeup_baseline"], dtype=float),
        takeup_slope=None if "takeup_slope" not in raw else np.asarray(raw["takeup_slope"], dtype=float),
    )
    if "n_strata" in raw and int(raw["n_strata"]) != config.n_strata:
        raise ValidationError(f"n_strata = {int(raw['n_strata'])} does not match {config.n_strata} shares")
    return config
