"""Prior-estimation tests: GLS, profile likelihood, Gaussian ML, NPMLE.

Oracles here recompute every closed form through explicit inverses and
scalar arithmetic, independently of the library's solve-based paths.
"""

import math

import numpy as np
import pytest

from ebdesign import (
    DiscretePrior,
    GaussianPrior,
    IdentificationError,
    NumericalError,
    StudyArchive,
    StudySummary,
    build_grid,
    fit_gaussian_prior,
    fit_npmle,
    fit_npmle_independent,
    gls_mean,
    load_prior,
    marginal_loglik,
    moment_match,
    prior_from_dict,
    prior_to_dict,
    profile_loglik,
    save_prior,
)

from conftest import full_reporting_archive, simulate_archive

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Independent oracles.
# ---------------------------------------------------------------------------


def oracle_gls(archive, V):
    """GLS mean via explicit matrix inverses (no np.linalg.solve)."""
    G = archive.dimension
    info = np.zeros((G, G))
    rhs = np.zeros(G)
    for study in archive.studies:
        R = study.reporting_operator
        W = np.linalg.inv(study.covariance + R @ V @ R.T)
        info += R.T @ W @ R
        rhs += R.T @ W @ study.estimate
    return np.linalg.inv(info) @ rhs


def oracle_profile_loglik(archive, V):
    """Profile likelihood via explicit inverses and determinants."""
    tau = oracle_gls(archive, V)
    total = 0.0
    for study in archive.studies:
        R = study.reporting_operator
        S = study.covariance + R @ V @ R.T
        resid = study.estimate - R @ tau
        k = study.estimate.shape[0]
        total += -0.5 * (k * LOG_2PI + math.log(np.linalg.det(S)) + resid @ np.linalg.inv(S) @ resid)
    return total


def oracle_mixture_loglik(archive, atoms, weights):
    """Discrete-mixture likelihood with dense per-atom Gaussian densities."""
    total = 0.0
    for study in archive.studies:
        R = study.reporting_operator
        S = study.covariance
        k = study.estimate.shape[0]
        norm = (2.0 * math.pi) ** (-0.5 * k) / math.sqrt(np.linalg.det(S))
        dens = 0.0
        for atom, w in zip(atoms, weights):
            resid = study.estimate - R @ np.atleast_1d(atom)
            dens += w * norm * math.exp(-0.5 * resid @ np.linalg.inv(S) @ resid)
        total += math.log(dens)
    return total


def gauss_quadrature_prior(mean, var, points=81, span=6.0):
    """Fine 1-D quadrature of a Gaussian as a DiscretePrior."""
    sd = math.sqrt(var)
    xs = np.linspace(mean - span * sd, mean + span * sd, points)
    w = np.exp(-0.5 * ((xs - mean) / sd) ** 2)
    return DiscretePrior(atoms=xs[:, None], weights=w / w.sum())


# ---------------------------------------------------------------------------
# GLS mean.
# ---------------------------------------------------------------------------


def test_gls_equal_weights_is_mean():
    estimates = [0.3, -0.2, 0.5, 0.8]
    archive = full_reporting_archive([[e] for e in estimates], [1.0] * 4, dimension=1)
    tau = gls_mean(archive, np.zeros((1, 1)))
    assert tau == pytest.approx(np.mean(estimates), abs=1e-12)


def test_gls_precision_weighted_two_studies():
    archive = full_reporting_archive([[0.0], [4.0]], [1.0, 3.0], dimension=1)
    tau = gls_mean(archive, np.zeros((1, 1)))
    assert tau[0] == pytest.approx(1.0, abs=1e-12)


def test_gls_coordinatewise_sample_mean_when_weights_equal():
    rng = np.random.default_rng(11)
    psi = rng.standard_normal((8, 3))
    archive = full_reporting_archive(psi, [0.7] * 8, dimension=3)
    tau = gls_mean(archive, 0.3 * np.eye(3))
    assert np.allclose(tau, psi.mean(axis=0), rtol=0.0, atol=1e-12)


def test_gls_matches_explicit_inverse_oracle():
    rng = np.random.default_rng(21)
    studies = []
    for i in range(12):
        kind = i % 3
        if kind == 0:
            R = np.eye(2)
            k = 2
        elif kind == 1:
            R = np.array([[1.0, 0.0]])
            k = 1
        else:
            R = np.array([[0.4, 0.6]])
            k = 1
        A = rng.standard_normal((k, k))
        cov = A @ A.T + 0.3 * np.eye(k)
        studies.append(
            StudySummary(
                study_id=f"g{i}",
                estimate=rng.standard_normal(k),
                covariance=cov,
                reporting_operator=R,
            )
        )
    archive = StudyArchive(studies=tuple(studies), dimension=2)
    V = np.array([[0.5, 0.2], [0.2, 0.8]])
    assert np.allclose(gls_mean(archive, V), oracle_gls(archive, V), atol=1e-10)


def test_gls_unidentified_lists_coordinates():
    study = StudySummary(
        study_id="only0",
        estimate=np.array([0.5]),
        covariance=np.array([[0.04]]),
        reporting_operator=np.array([[1.0, 0.0]]),
    )
    archive = StudyArchive(studies=(study,), dimension=2)
    with pytest.raises(IdentificationError) as exc:
        gls_mean(archive, np.eye(2))
    assert 1 in exc.value.coordinates


# ---------------------------------------------------------------------------
# Profile log-likelihood.
# ---------------------------------------------------------------------------


def test_profile_single_study_hand_value():
    archive = full_reporting_archive([[3.0]], [1.0], dimension=1)
    value = profile_loglik(archive, np.zeros((1, 1)))
    assert value == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)


def test_profile_two_identical_studies_doubles():
    archive1 = full_reporting_archive([[0.7]], [0.5], dimension=1)
    archive2 = full_reporting_archive([[0.7], [0.7]], [0.5, 0.5], dimension=1)
    for v in (0.0, 0.3, 2.0):
        V = np.array([[v]])
        assert profile_loglik(archive2, V) == pytest.approx(2.0 * profile_loglik(archive1, V), abs=1e-10)


def test_profile_matches_oracle_partial_reporting():
    rng = np.random.default_rng(33)
    studies = []
    for i in range(10):
        if i % 2:
            R = np.eye(2)
        else:
            R = np.array([[1.0, 0.0]]) if i % 4 else np.array([[0.0, 1.0]])
        k = R.shape[0]
        A = rng.standard_normal((k, k))
        studies.append(
            StudySummary(
                study_id=f"p{i}",
                estimate=rng.standard_normal(k),
                covariance=A @ A.T + 0.4 * np.eye(k),
                reporting_operator=R,
            )
        )
    archive = StudyArchive(studies=tuple(studies), dimension=2)
    for V in (np.zeros((2, 2)), np.diag([0.3, 0.1]), np.array([[0.5, 0.2], [0.2, 0.4]])):
        assert profile_loglik(archive, V) == pytest.approx(oracle_profile_loglik(archive, V), abs=1e-9)


def test_profile_prefers_generating_variance():
    V0 = np.diag([0.4, 0.2])
    wins = 0
    for seed in range(20):
        archive = simulate_archive([0.3, -0.1], V0, [0.8] * 500, seed=seed)
        if profile_loglik(archive, V0) > profile_loglik(archive, 10.0 * V0):
            wins += 1
    assert wins == 20


# ---------------------------------------------------------------------------
# Gaussian prior fitting.
# ---------------------------------------------------------------------------


def test_fit_boundary_zero_variance():
    archive = simulate_archive([0.5], np.zeros((1, 1)), [1.0] * 1000, seed=4)
    prior, report = fit_gaussian_prior(archive, structure="diagonal")
    assert float(np.abs(prior.covariance).max()) < 0.05 * 1.0


def test_fit_single_study_diagonal_is_zero():
    archive = full_reporting_archive([[0.4, -0.2]], [[0.5, 0.6]], dimension=2)
    # Single study: heterogeneity unidentified, boundary fit.
    studies = (
        StudySummary(
            study_id="solo",
            estimate=np.array([0.4, -0.2]),
            covariance=np.diag([0.5, 0.6]),
            reporting_operator=np.eye(2),
        ),
    )
    archive = StudyArchive(studies=studies, dimension=2)
    prior, report = fit_gaussian_prior(archive, structure="diagonal")
    assert np.allclose(prior.covariance, 0.0, atol=1e-10)
    assert np.allclose(prior.mean, [0.4, -0.2], atol=1e-9)


def test_fit_recovers_simulated_moments():
    V0 = np.diag([0.5, 0.25])
    tau0 = [0.3, -0.2]
    archive = simulate_archive(tau0, V0, list(np.linspace(0.5, 1.5, 2000)), seed=9)
    prior, report = fit_gaussian_prior(archive, structure="diagonal")
    assert report.converged
    assert np.allclose(prior.mean, tau0, atol=0.08)
    assert np.allclose(np.diag(prior.covariance), np.diag(V0), atol=0.09)


def test_fit_full_structure_stationary_gradient():
    V0 = np.array([[0.5, 0.15], [0.15, 0.3]])
    archive = simulate_archive([0.0, 0.0], V0, [0.6] * 400, seed=13)
    prior, report = fit_gaussian_prior(archive, structure="full")
    assert report.converged
    V_hat = prior.covariance
    assert np.linalg.eigvalsh(V_hat)[0] > 1e-4  # interior solution here
    base = profile_loglik(archive, V_hat)
    h = 1e-5
    grad = []
    for a in range(2):
        for b in range(a, 2):
            E = np.zeros((2, 2))
            E[a, b] = E[b, a] = 1.0
            grad.append((profile_loglik(archive, V_hat + h * E) - profile_loglik(archive, V_hat - h * E)) / (2 * h))
    assert np.linalg.norm(grad) <= 1e-3 * (1.0 + abs(base))


def test_fit_likelihood_beats_start_and_reports_trajectory():
    archive = simulate_archive([0.1, 0.2], np.diag([0.3, 0.4]), [1.0] * 200, seed=17)
    prior, report = fit_gaussian_prior(archive, structure="full")
    assert report.loglik == pytest.approx(profile_loglik(archive, prior.covariance), abs=1e-8)
    trajectory = np.asarray(report.trajectory)
    assert trajectory.size >= 1
    assert np.all(np.diff(trajectory) >= -1e-9)


def test_shift_equivariance():
    b = np.array([2.5, -1.0])
    archive = simulate_archive([0.0, 0.0], np.diag([0.4, 0.2]), [0.9] * 300, seed=23)
    shifted_studies = tuple(
        StudySummary(
            study_id=s.study_id,
            estimate=s.estimate + b,
            covariance=s.covariance,
            reporting_operator=s.reporting_operator,
        )
        for s in archive.studies
    )
    shifted = StudyArchive(studies=shifted_studies, dimension=2)
    prior, _ = fit_gaussian_prior(archive, structure="diagonal")
    prior_b, _ = fit_gaussian_prior(shifted, structure="diagonal")
    assert np.allclose(prior_b.mean - prior.mean, b, atol=1e-6)
    assert np.allclose(prior_b.covariance, prior.covariance, atol=1e-6)


def test_gaussian_prior_structure_enforced():
    with pytest.raises(Exception):
        GaussianPrior(mean=np.zeros(2), covariance=np.array([[1.0, 0.1], [0.1, 1.0]]), structure="diagonal")


# ---------------------------------------------------------------------------
# Grid construction.
# ---------------------------------------------------------------------------


def test_build_grid_1d_exact_endpoints():
    archive = full_reporting_archive([[-1.0], [0.0], [1.0]], [0.01, 0.01, 0.01], dimension=1)
    grid = build_grid(archive, points_per_dim=5, padding=3.0)
    assert np.allclose(grid.ravel(), [-1.3, -0.65, 0.0, 0.65, 1.3], atol=1e-12)


def test_build_grid_2d_tensor_count():
    archive = simulate_archive([0.0, 0.0], np.eye(2), [1.0] * 30, seed=2)
    grid = build_grid(archive, points_per_dim=40, padding=3.0)
    assert grid.shape == (1600, 2)


def test_build_grid_degenerate_spans_padding():
    archive = full_reporting_archive([[0.5], [0.5], [0.5]], [0.04, 0.04, 0.04], dimension=1)
    grid = build_grid(archive, points_per_dim=3, padding=3.0)
    assert grid.ravel()[0] == pytest.approx(0.5 - 3.0 * 0.2, abs=1e-12)
    assert grid.ravel()[-1] == pytest.approx(0.5 + 3.0 * 0.2, abs=1e-12)


def test_build_grid_unreported_coordinate_errors():
    study = StudySummary(
        study_id="a",
        estimate=np.array([0.1]),
        covariance=np.array([[0.04]]),
        reporting_operator=np.array([[1.0, 0.0]]),
    )
    archive = StudyArchive(studies=(study,), dimension=2)
    with pytest.raises(IdentificationError):
        build_grid(archive, points_per_dim=5, padding=3.0)


# ---------------------------------------------------------------------------
# NPMLE.
# ---------------------------------------------------------------------------


def test_npmle_single_observation_point_mass():
    archive = full_reporting_archive([[0.37]], [0.04], dimension=1)
    grid = np.array([[-1.0], [0.0], [0.37], [1.0]])
    prior, report = fit_npmle(archive, grid)
    nearest = grid.ravel()[np.argmin(np.abs(grid.ravel() - 0.37))]
    assert prior.atoms.shape[0] == 1
    assert prior.atoms[0, 0] == pytest.approx(nearest, abs=1e-12)
    assert prior.weights[0] == pytest.approx(1.0, abs=1e-9)


def test_npmle_two_point_recovery():
    rng = np.random.default_rng(77)
    theta = rng.choice([-1.0, 1.0], size=400)
    psi = theta + 0.05 * rng.standard_normal(400)
    archive = full_reporting_archive([[p] for p in psi], [0.0025] * 400, dimension=1)
    grid = build_grid(archive, points_per_dim=80, padding=3.0)
    prior, report = fit_npmle(archive, grid)
    atoms = prior.atoms.ravel()
    near_minus = np.abs(atoms + 1.0) <= 0.1
    near_plus = np.abs(atoms - 1.0) <= 0.1
    assert prior.weights[near_minus].sum() >= 0.45
    assert prior.weights[near_plus].sum() >= 0.45


def test_npmle_trajectory_monotone_and_simplex():
    archive = simulate_archive([0.0], np.array([[0.5]]), [0.3] * 120, seed=5)
    grid = build_grid(archive, points_per_dim=50, padding=3.0)
    prior, report = fit_npmle(archive, grid)
    trajectory = np.asarray(report.trajectory)
    assert np.all(np.diff(trajectory) >= -1e-12)
    assert np.all(prior.weights >= 0.0)
    assert prior.weights.sum() == pytest.approx(1.0, abs=1e-10)


def test_npmle_matches_dense_oracle_loglik():
    archive = simulate_archive([0.2], np.array([[0.3]]), [0.4] * 40, seed=6)
    grid = build_grid(archive, points_per_dim=25, padding=3.0)
    prior, report = fit_npmle(archive, grid)
    oracle = oracle_mixture_loglik(archive, prior.atoms, prior.weights)
    assert report.loglik == pytest.approx(oracle, abs=1e-8)


def test_npmle_underflow_advises_padding():
    archive = full_reporting_archive([[100.0]], [1e-6], dimension=1)
    grid = np.linspace(-1.0, 1.0, 11)[:, None]
    with pytest.raises(NumericalError, match="padding"):
        fit_npmle(archive, grid)


def test_npmle_independent_product_structure():
    V0 = np.diag([0.4, 0.3])
    archive = simulate_archive([0.5, -0.5], V0, [0.2] * 300, seed=8)
    prior, report = fit_npmle_independent(archive, points_per_dim=30, padding=3.0)
    mm = moment_match(prior)
    assert abs(mm.covariance[0, 1]) < 0.05
    assert np.allclose(mm.mean, [0.5, -0.5], atol=0.15)
    assert report.loglik == pytest.approx(marginal_loglik(prior, archive), abs=1e-8)


# ---------------------------------------------------------------------------
# Marginal likelihood.
# ---------------------------------------------------------------------------


def test_marginal_pointmass_equals_degenerate_gaussian():
    archive = simulate_archive([0.1], np.zeros((1, 1)), [0.5, 0.7, 0.9], seed=3)
    point = DiscretePrior(atoms=np.array([[0.25]]), weights=np.array([1.0]))
    gauss = GaussianPrior(mean=np.array([0.25]), covariance=np.zeros((1, 1)))
    assert marginal_loglik(point, archive) == pytest.approx(marginal_loglik(gauss, archive), abs=1e-10)


def test_marginal_fit_beats_uniform_weights():
    archive = simulate_archive([0.0], np.array([[0.4]]), [0.3] * 100, seed=10)
    grid = build_grid(archive, points_per_dim=30, padding=3.0)
    prior, report = fit_npmle(archive, grid)
    uniform = DiscretePrior(atoms=grid, weights=np.full(grid.shape[0], 1.0 / grid.shape[0]))
    assert marginal_loglik(prior, archive) >= marginal_loglik(uniform, archive) - 1e-9


def test_marginal_gaussian_vs_npmle_within_2pct():
    archive = simulate_archive([0.2], np.array([[0.5]]), [0.6] * 500, seed=12)
    gauss, _ = fit_gaussian_prior(archive, structure="diagonal")
    grid = build_grid(archive, points_per_dim=60, padding=3.0)
    npmle, _ = fit_npmle(archive, grid)
    lg = marginal_loglik(gauss, archive)
    ln = marginal_loglik(npmle, archive)
    assert abs(lg - ln) <= 0.02 * abs(lg)


def test_quadrature_discrete_matches_gaussian():
    archive = simulate_archive([0.3], np.array([[0.5]]), [0.8] * 50, seed=14)
    gauss = GaussianPrior(mean=np.array([0.3]), covariance=np.array([[0.5]]))
    quad = gauss_quadrature_prior(0.3, 0.5, points=161, span=7.0)
    lg = marginal_loglik(gauss, archive)
    ld = marginal_loglik(quad, archive)
    assert abs(lg - ld) <= 1e-3 * len(archive.studies)


def test_marginal_dimension_mismatch():
    archive = simulate_archive([0.0, 0.0], np.eye(2), [1.0] * 5, seed=1)
    with pytest.raises(Exception):
        marginal_loglik(GaussianPrior(mean=np.zeros(1), covariance=np.eye(1)), archive)


# ---------------------------------------------------------------------------
# Serialization and moment matching.
# ---------------------------------------------------------------------------


def test_prior_json_round_trip(tmp_path):
    gauss = GaussianPrior(mean=np.array([0.2, -0.1]), covariance=np.array([[0.5, 0.1], [0.1, 0.4]]))
    path = tmp_path / "prior.json"
    save_prior(gauss, path)
    loaded, report = load_prior(path)
    assert isinstance(loaded, GaussianPrior)
    assert report is None
    assert np.array_equal(loaded.mean, gauss.mean)
    assert np.array_equal(loaded.covariance, gauss.covariance)

    disc = DiscretePrior(atoms=np.array([[0.0, 1.0], [1.0, -1.0]]), weights=np.array([0.25, 0.75]))
    back, _ = prior_from_dict(prior_to_dict(disc))
    assert np.array_equal(back.atoms, disc.atoms)
    assert np.array_equal(back.weights, disc.weights)


def test_moment_match_discrete():
    disc = DiscretePrior(atoms=np.array([[0.0], [2.0]]), weights=np.array([0.5, 0.5]))
    mm = moment_match(disc)
    assert mm.mean[0] == pytest.approx(1.0, abs=1e-12)
    assert mm.covariance[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_discrete_prior_validation():
    with pytest.raises(Exception):
        DiscretePrior(atoms=np.array([[0.0], [0.0]]), weights=np.array([0.5, 0.5]))
    with pytest.raises(Exception):
        DiscretePrior(atoms=np.array([[0.0], [1.0]]), weights=np.array([0.6, 0.6]))
