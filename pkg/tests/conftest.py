"""Shared test helpers: CSV builders and synthetic archives."""

import csv

import numpy as np
import pytest

from ebdesign import GaussianPrior, StudyArchive, StudySummary

ARCHIVE_HEADER = [
    "study_id",
    "component_index",
    "estimate",
    "se",
    "stratum_index",
    "weight",
    "cov_row",
    "cov_col",
    "cov_value",
]


def write_rows(path, rows):
    """Writes archive CSV rows (each a list aligned with ARCHIVE_HEADER)."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(ARCHIVE_HEADER)
        writer.writerows(rows)
    return path


def full_reporting_archive(estimates, variances, dimension):
    """Archive of fully reported studies with isotropic diagonal noise."""
    eye = np.eye(dimension)
    studies = []
    for i, (est, var) in enumerate(zip(estimates, variances)):
        studies.append(
            StudySummary(
                study_id=f"s{i}",
                estimate=np.atleast_1d(np.asarray(est, dtype=float)),
                covariance=np.atleast_2d(np.asarray(var, dtype=float) * eye)
                if np.isscalar(var)
                else np.atleast_2d(np.asarray(var, dtype=float)),
                reporting_operator=eye,
            )
        )
    return StudyArchive(studies=tuple(studies), dimension=dimension)


def simulate_archive(mean, cov, noise_vars, seed):
    """Full-reporting archive drawn from a Gaussian prior, one isotropic
    noise variance per study."""
    rng = np.random.default_rng(seed)
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    G = mean.shape[0]
    n = len(noise_vars)
    root = np.linalg.cholesky(cov + 1e-15 * np.eye(G)) if np.any(cov) else np.zeros((G, G))
    theta = mean + rng.standard_normal((n, G)) @ root.T
    psi = theta + rng.standard_normal((n, G)) * np.sqrt(np.asarray(noise_vars))[:, None]
    return full_reporting_archive(psi, noise_vars, G)


@pytest.fixture
def rng():
    return np.random.default_rng(20240229)


@pytest.fixture
def unit_gaussian_2d():
    return GaussianPrior(mean=np.zeros(2), covariance=np.eye(2))
