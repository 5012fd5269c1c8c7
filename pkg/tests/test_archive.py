"""Archive ingestion, validation, and strata-config tests."""

import json

import numpy as np
import pytest

from ebdesign import (
    StrataConfig,
    StudyArchive,
    StudySummary,
    ValidationError,
    load_archive,
    load_strata_config,
    save_archive,
    validate_archive,
)

from conftest import write_rows


def test_full_reporting_two_studies(tmp_path):
    rows = [
        ["a", 0, 0.5, 0.1, 0, "", "", "", ""],
        ["a", 1, 0.2, 0.2, 1, "", "", "", ""],
        ["b", 0, -0.1, 0.3, 0, "", "", "", ""],
        ["b", 1, 0.4, 0.15, 1, "", "", "", ""],
    ]
    path = write_rows(tmp_path / "arch.csv", rows)
    archive = load_archive(path, dimension=2)
    assert len(archive.studies) == 2
    a, b = archive.studies
    assert np.array_equal(a.reporting_operator, np.eye(2))
    assert np.array_equal(b.reporting_operator, np.eye(2))
    assert np.array_equal(a.covariance, np.diag([0.1**2, 0.2**2]))
    assert np.array_equal(a.estimate, [0.5, 0.2])
    assert np.array_equal(b.estimate, [-0.1, 0.4])


def test_drug_shaped_grouping(tmp_path):
    rows = []
    for i in range(52):
        rows.append([f"s1only{i}", 0, 0.2 + 0.001 * i, 0.1, 0, "", "", "", ""])
    for i in range(5):
        rows.append([f"s2only{i}", 0, 0.1 + 0.001 * i, 0.1, 1, "", "", "", ""])
    for i in range(7):
        rows.append([f"both{i}", 0, 0.25, 0.1, 0, "", "", "", ""])
        rows.append([f"both{i}", 1, 0.15, 0.1, 1, "", "", "", ""])
    path = write_rows(tmp_path / "drugshape.csv", rows)
    archive = load_archive(path, dimension=2)
    assert len(archive.studies) == 64
    shapes = {"first": 0, "second": 0, "both": 0}
    for study in archive.studies:
        R = study.reporting_operator
        if R.shape == (2, 2):
            assert np.array_equal(R, np.eye(2))
            shapes["both"] += 1
        elif np.array_equal(R, [[1.0, 0.0]]):
            shapes["first"] += 1
        elif np.array_equal(R, [[0.0, 1.0]]):
            shapes["second"] += 1
    assert shapes == {"first": 52, "second": 5, "both": 7}
    assert sum(s.n_components for s in archive.studies) == 71


def test_zero_se_rejected(tmp_path):
    rows = [
        ["a", 0, 0.5, 0.0, 0, "", "", "", ""],
        ["b", 0, 0.5, 0.1, 0, "", "", "", ""],
    ]
    path = write_rows(tmp_path / "zero.csv", rows)
    with pytest.raises(ValidationError, match="positive definite"):
        load_archive(path, dimension=1)


def test_grouping_count(tmp_path):
    rows = [
        ["x", 0, 0.1, 0.1, 0, "", "", "", ""],
        ["y", 0, 0.2, 0.1, 0, "", "", "", ""],
        ["x", 1, 0.3, 0.1, 1, "", "", "", ""],
        ["z", 0, 0.4, 0.1, 1, "", "", "", ""],
    ]
    path = write_rows(tmp_path / "group.csv", rows)
    archive = load_archive(path, dimension=2)
    assert len(archive.studies) == 3
    assert {s.study_id for s in archive.studies} == {"x", "y", "z"}


def test_weighted_combination_operator(tmp_path):
    # One component spread over two strata via repeated keyed rows.
    rows = [
        ["w", 0, 0.5, 0.1, 0, 0.3, "", "", ""],
        ["w", 0, "", "", 1, 0.7, "", "", ""],
        ["v", 0, 0.1, 0.2, 0, "", "", "", ""],
        ["v", 1, 0.2, 0.2, 1, "", "", "", ""],
    ]
    path = write_rows(tmp_path / "weighted.csv", rows)
    archive = load_archive(path, dimension=2)
    w = next(s for s in archive.studies if s.study_id == "w")
    assert np.array_equal(w.reporting_operator, [[0.3, 0.7]])


def test_explicit_covariance_overrides_se(tmp_path):
    rows = [
        ["c", 0, 0.5, 0.5, 0, "", "", "", ""],
        ["c", 1, 0.2, 0.5, 1, "", "", "", ""],
        ["c", "0", "", "", "", "", 0, 0, 0.04],
        ["c", "0", "", "", "", "", 1, 1, 0.09],
        ["c", "0", "", "", "", "", 0, 1, 0.01],
    ]
    path = write_rows(tmp_path / "cov.csv", rows)
    archive = load_archive(path, dimension=2)
    study = archive.studies[0]
    assert np.array_equal(study.covariance, [[0.04, 0.01], [0.01, 0.09]])


def test_malformed_row_reports_line(tmp_path):
    rows = [
        ["a", 0, 0.5, 0.1, 0, "", "", "", ""],
        ["b", 0, "oops", 0.1, 0, "", "", "", ""],
    ]
    path = write_rows(tmp_path / "bad.csv", rows)
    with pytest.raises(ValidationError, match="line 3"):
        load_archive(path, dimension=1)


def test_unidentified_coordinate(tmp_path):
    rows = [
        ["a", 0, 0.5, 0.1, 0, "", "", "", ""],
        ["b", 0, 0.1, 0.1, 1, "", "", "", ""],
    ]
    path = write_rows(tmp_path / "unident.csv", rows)
    with pytest.raises(ValidationError, match="coordinate 2 unidentified"):
        load_archive(path, dimension=3)


def test_unidentified_diagnostic_message():
    study = StudySummary(
        study_id="a",
        estimate=np.array([0.5]),
        covariance=np.array([[0.01]]),
        reporting_operator=np.array([[1.0, 0.0, 0.0]]),
    )
    archive = StudyArchive(studies=(study,), dimension=3)
    messages = [d.message for d in validate_archive(archive) if d.level == "error"]
    assert any("coordinate 1 unidentified" in m for m in messages)
    assert any("coordinate 2 unidentified" in m for m in messages)


def test_near_singular_warning_not_error():
    study = StudySummary(
        study_id="tiny",
        estimate=np.array([0.0, 0.0]),
        covariance=np.diag([1e-3, 1e-12]),
        reporting_operator=np.eye(2),
    )
    archive = StudyArchive(studies=(study,), dimension=2)
    diags = validate_archive(archive)
    assert all(d.level == "warning" for d in diags)
    assert any("near-singular" in d.message for d in diags)


def test_rank_deficient_operator_rejected(tmp_path):
    rows = [
        ["dup", 0, 0.5, 0.1, 0, "", "", "", ""],
        ["dup", 1, 0.6, 0.1, 0, "", "", "", ""],
        ["ok", 0, 0.1, 0.1, 1, "", "", "", ""],
    ]
    path = write_rows(tmp_path / "rank.csv", rows)
    with pytest.raises(ValidationError, match="rank-deficient"):
        load_archive(path, dimension=2)


def test_components_exceed_dimension(tmp_path):
    rows = [
        ["big", 0, 0.1, 0.1, 0, "", "", "", ""],
        ["big", 1, 0.2, 0.1, 1, "", "", "", ""],
        ["big", 2, 0.3, 0.1, 0, 0.5, "", "", ""],
        ["big", 2, "", "", 1, 0.5, "", "", ""],
    ]
    path = write_rows(tmp_path / "big.csv", rows)
    with pytest.raises(ValidationError, match="exceed dimension"):
        load_archive(path, dimension=2)


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(5)
    studies = []
    for i in range(6):
        k = int(rng.integers(1, 3))
        A = rng.standard_normal((k, k))
        cov = A @ A.T + 0.5 * np.eye(k)
        R = np.zeros((k, 2))
        if k == 2:
            R = np.eye(2)
        else:
            R[0, int(rng.integers(0, 2))] = float(rng.uniform(0.5, 1.5))
        studies.append(
            StudySummary(
                study_id=f"rt{i}",
                estimate=rng.standard_normal(k),
                covariance=cov,
                reporting_operator=R,
            )
        )
    archive = StudyArchive(studies=tuple(studies), dimension=2)
    path = tmp_path / "round.csv"
    save_archive(archive, path)
    reloaded = load_archive(path, dimension=2)
    assert len(reloaded.studies) == len(archive.studies)
    by_id = {s.study_id: s for s in reloaded.studies}
    for study in archive.studies:
        other = by_id[study.study_id]
        assert np.array_equal(study.estimate, other.estimate)
        assert np.array_equal(study.covariance, other.covariance)
        assert np.array_equal(study.reporting_operator, other.reporting_operator)


def test_validate_accepted_archive_clean(tmp_path):
    rows = [
        ["a", 0, 0.5, 0.1, 0, "", "", "", ""],
        ["a", 1, 0.2, 0.2, 1, "", "", "", ""],
        ["b", 0, -0.1, 0.3, 0, "", "", "", ""],
    ]
    path = write_rows(tmp_path / "clean.csv", rows)
    archive = load_archive(path, dimension=2)
    assert validate_archive(archive) == []


def make_config(**overrides):
    base = dict(
        shares=np.array([0.5, 0.5]),
        costs=np.array([1.0, 2.0]),
        budget=1.0,
        overlap=0.05,
        var_treated=np.array([1.0, 1.0]),
        var_control=np.array([1.0, 1.0]),
        stratum_sizes=np.array([100.0, 100.0]),
    )
    base.update(overrides)
    return StrataConfig(**base)


class TestStrataConfig:
    def test_accepts_valid(self):
        config = make_config()
        assert config.n_strata == 2
        assert config.propensity_bounds == (0.05, 0.95)
        assert np.array_equal(config.policy_costs, [0.0, 0.0])
        assert not config.has_compliance

    def test_shares_must_sum_to_one(self):
        with pytest.raises(ValidationError, match="shares"):
            make_config(shares=np.array([0.5, 0.6]))

    def test_overlap_range(self):
        with pytest.raises(ValidationError, match="overlap"):
            make_config(overlap=0.6)
        with pytest.raises(ValidationError, match="overlap"):
            make_config(overlap=0.0)

    def test_minimum_cost_design_must_fit_budget(self):
        with pytest.raises(ValidationError, match="infeasible"):
            make_config(budget=0.05, overlap=0.4)

    def test_takeup_fields_come_together(self):
        with pytest.raises(ValidationError, match="together"):
            make_config(takeup_baseline=np.array([0.1, 0.1]))

    def test_negative_variance_rejected(self):
        with pytest.raises(ValidationError, match="var_treated"):
            make_config(var_treated=np.array([1.0, -1.0]))


def test_load_strata_config_flat(tmp_path):
    text = "\n".join(
        [
            "# planned experiment",
            "shares = [0.5, 0.5]",
            "costs = [1.0, 2.0]",
            "budget = 1.0",
            "overlap = 0.05",
            "var_treated = [1.0, 1.0]",
            "var_control = [1.0, 1.0]",
            "stratum_sizes = [100, 100]",
        ]
    )
    path = tmp_path / "strata.cfg"
    path.write_text(text)
    config = load_strata_config(path)
    assert config.n_strata == 2
    assert config.budget == 1.0
    assert np.array_equal(config.costs, [1.0, 2.0])


def test_load_strata_config_json_matches_flat(tmp_path):
    payload = {
        "shares": [0.5, 0.5],
        "costs": [1.0, 2.0],
        "budget": 1.0,
        "overlap": 0.05,
        "var_treated": [1.0, 1.0],
        "var_control": [1.0, 1.0],
        "stratum_sizes": [100, 100],
    }
    path = tmp_path / "strata.json"
    path.write_text(json.dumps(payload))
    config = load_strata_config(path)
    assert config.overlap == 0.05
    assert np.array_equal(config.stratum_sizes, [100.0, 100.0])


def test_load_strata_config_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("shares = [1.0]\nwhat = 3\n")
    with pytest.raises(ValidationError, match="unknown config keys"):
        load_strata_config(path)


def test_load_strata_config_missing_key(tmp_path):
    path = tmp_path / "missing.cfg"
    path.write_text("shares = [1.0]\n")
    with pytest.raises(ValidationError, match="missing config keys"):
        load_strata_config(path)
