"""Cross-study prior estimation: parametric Gaussian fits and nonparametric
discrete mixture fits over a fixed grid, both honoring partial reporting.

The marginal model for a study reporting functionals R of the shared
parameter vector is estimate ~ Normal(R @ mean, noise_cov + R @ V @ R').
The Gaussian fit maximizes the profile marginal log-likelihood over V;
the nonparametric fit runs EM over mixture weights on a fixed atom grid.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import logsumexp

from .archive import StudyArchive, StudySummary, validate_archive
from .errors import IdentificationError, NumericalError, ValidationError

LOG_2PI = math.log(2.0 * math.pi)
# Log-scale parameters are clipped here so V -> 0 is representable.
LOG_FLOOR = -30.0
# Matrix entries below this snap to exact zero after optimization.
SNAP_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class OptimizerOptions:
    """Tolerances shared by the prior-fitting routines.

    Args:
        max_iterations: EM iteration cap.
        em_gain_tol: EM stops once the per-iteration log-likelihood gain
            drops below em_gain_tol * n_studies.
        prune_tol: mixture weights below this are dropped and the rest
            renormalized.
        gradient_tol: a Gaussian fit counts as converged when the numeric
            gradient sup-norm is below gradient_tol * (1 + |loglik|).
        xatol / fatol: simplex-search termination tolerances.
        max_search_iterations: cap for the simplex search and for
            coordinate-ascent sweeps.
    """

    max_iterations: int = 10_000
    em_gain_tol: float = 1e-9
    prune_tol: float = 1e-8
    gradient_tol: float = 1e-3
    xatol: float = 1e-9
    fatol: float = 1e-12
    max_search_iterations: int = 4_000


DEFAULT_OPTIONS = OptimizerOptions()


@dataclass(frozen=True)
class GaussianPrior:
    """Gaussian cross-study prior with mean vector and PSD covariance."""

    mean: np.ndarray
    covariance: np.ndarray
    structure: str = "full"

    def __post_init__(self):
        mean = _readonly(np.atleast_1d(self.mean))
        cov = _readonly(np.atleast_2d(self.covariance))
        if self.structure not in ("full", "diagonal"):
            raise ValidationError(f"unknown structure {self.structure!r}")
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValidationError(f"covariance shape {cov.shape} does not match mean length {mean.shape[0]}")
        if not np.array_equal(cov, cov.T):
            raise ValidationError("prior covariance must be symmetric")
        if self.structure == "diagonal" and np.any(cov != np.diag(np.diag(cov))):
            raise ValidationError("diagonal structure requires exactly zero off-diagonals")
        if np.linalg.eigvalsh(cov)[0] < -1e-10 * max(1.0, float(np.abs(cov).max())):
            raise ValidationError("prior covariance must be positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dimension(self) -> int:
        return self.mean.shape[0]

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.covariance)


@dataclass(frozen=True)
class DiscretePrior:
    """Discrete cross-study prior: support atoms with probability weights."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.atleast_1d(np.asarray(self.atoms, dtype=float))
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = _readonly(np.atleast_1d(self.weights))
        if atoms.shape[0] != weights.shape[0]:
            raise ValidationError(f"{atoms.shape[0]} atoms but {weights.shape[0]} weights")
        if atoms.shape[0] < 1:
            raise ValidationError("at least one atom required")
        if np.any(weights < 0.0):
            raise ValidationError("weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > 1e-10:
            raise ValidationError(f"weights sum to {weights.sum()!r}, expected 1")
        if len(np.unique(atoms, axis=0)) != atoms.shape[0]:
            raise ValidationError("atoms must be pairwise distinct")
        object.__setattr__(self, "atoms", _readonly(atoms))
        object.__setattr__(self, "weights", weights)

    @property
    def dimension(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def covariance(self) -> np.ndarray:
        centered = self.atoms - self.mean()
        return (centered * self.weights[:, None]).T @ centered


@dataclass(frozen=True)
class FitReport:
    """Outcome of one fitting run, including the likelihood trajectory."""

    loglik: float
    iterations: int
    converged: bool
    trajectory: tuple[float, ...] = ()


def moment_match(prior: GaussianPrior | DiscretePrior) -> GaussianPrior:
    """Gaussian prior with the same first two moments as the input."""
    if isinstance(prior, GaussianPrior):
        return prior
    cov = prior.covariance()
    cov = 0.5 * (cov + cov.T)
    eigs, vecs = np.linalg.eigh(cov)
    cov = (vecs * np.clip(eigs, 0.0, None)) @ vecs.T
    return GaussianPrior(mean=prior.mean(), covariance=0.5 * (cov + cov.T))


def prior_dimension(prior: GaussianPrior | DiscretePrior) -> int:
    return prior.dimension


def _assert_identified(archive: StudyArchive) -> None:
    touched = np.zeros(archive.dimension, dtype=bool)
    for study in archive.studies:
        touched |= np.any(study.reporting_operator != 0.0, axis=0)
    if not touched.all():
        coords = np.flatnonzero(~touched)
        raise IdentificationError(
            f"coordinates {coords.tolist()} are untouched by every reporting operator",
            coordinates=coords.tolist(),
        )


# ---------------------------------------------------------------------------
# Archive layouts: vectorized fast paths for common archive shapes.
# ---------------------------------------------------------------------------


class _Layout:
    """Precomputed archive summary choosing a likelihood evaluation path.

    kind 'diag_full': every study reports all coordinates (identity
    operator) with diagonal noise; psi and s2 are (n, G) arrays, and
    iso_sigma2 holds per-study scalar variances when noise is isotropic.
    kind 'general': anything else; falls back to per-study linear algebra.
    """

    def __init__(self, archive: StudyArchive):
        self.archive = archive
        g = archive.dimension
        eye = np.eye(g)
        psi, s2 = [], []
        diag_full = True
        for study in archive.studies:
            if study.reporting_operator.shape != (g, g) or not np.array_equal(study.reporting_operator, eye):
                diag_full = False
                break
            cov = study.covariance
            if np.any(cov != np.diag(np.diag(cov))):
                diag_full = False
                break
            psi.append(study.estimate)
            s2.append(np.diag(cov))
        self.kind = "diag_full" if diag_full else "general"
        if diag_full:
            self.psi = np.asarray(psi)
            self.s2 = np.asarray(s2)
            iso = np.all(self.s2 == self.s2[:, :1], axis=1).all()
            self.iso_sigma2 = self.s2[:, 0].copy() if iso else None


def _gls_terms_general(archive: StudyArchive, V: np.ndarray):
    """Per-study information and weighted-estimate accumulators."""
    g = archive.dimension
    info = np.zeros((g, g))
    rhs = np.zeros(g)
    cached = []
    for study in archive.studies:
        R = study.reporting_operator
        M = study.covariance + R @ V @ R.T
        try:
            Minv_R = np.linalg.solve(M, R)
            Minv_psi = np.linalg.solve(M, study.estimate)
        except np.linalg.LinAlgError:
            raise NumericalError(f"study {study.study_id}: singular marginal covariance") from None
        info += R.T @ Minv_R
        rhs += R.T @ Minv_psi
        cached.append(M)
    return info, rhs, cached


def _solve_info(info: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    eigs, vecs = np.linalg.eigh(info)
    tol = 1e-12 * max(float(eigs[-1]), 1e-300)
    if eigs[0] <= tol:
        null = vecs[:, eigs <= tol]
        mass = (null ** 2).sum(axis=1)
        coords = np.flatnonzero(mass > 1e-8).tolist()
        raise IdentificationError(
            f"stacked information matrix is singular; null space touches coordinates {coords}",
            coordinates=coords,
        )
    return vecs @ ((vecs.T @ rhs) / eigs)


def gls_mean(archive: StudyArchive, V: np.ndarray) -> np.ndarray:
    """Generalized-least-squares mean under prior covariance V.

    Pools every study's reported functionals, weighting study i by the
    inverse of its marginal covariance noise_cov_i + R_i V R_i'.

    Raises:
        IdentificationError: the stacked information matrix is singular;
            the error lists the null-space coordinates.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    info, rhs, _ = _gls_terms_general(archive, V)
    return _solve_info(info, rhs)


def profile_loglik(archive: StudyArchive, V: np.ndarray) -> float:
    """Profile marginal log-likelihood of V with the GLS mean plugged in.

    Includes the -k/2 log(2 pi) constants so values are comparable
    across estimation methods.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    return _profile_loglik_layout(_Layout(archive), V)


def _profile_loglik_layout(layout: _Layout, V: np.ndarray) -> float:
    if layout.kind == "diag_full":
        offdiag = V - np.diag(np.diag(V))
        if not np.any(offdiag):
            return _profile_diag_fast(layout.psi, layout.s2, np.diag(V))
        if layout.iso_sigma2 is not None:
            return _profile_iso_full(layout.psi, layout.iso_sigma2, V)
    archive = layout.archive
    info, rhs, cached = _gls_terms_general(archive, V)
    tau = _solve_info(info, rhs)
    total = 0.0
    for study, M in zip(archive.studies, cached):
        resid = study.estimate - study.reporting_operator @ tau
        sign, logdet = np.linalg.slogdet(M)
        if sign <= 0:
            raise NumericalError(f"study {study.study_id}: marginal covariance is not positive definite")
        quad = float(resid @ np.linalg.solve(M, resid))
        total += -0.5 * (study.n_components * LOG_2PI + logdet + quad)
    return total


def _profile_diag_fast(psi: np.ndarray, s2: np.ndarray, v: np.ndarray) -> float:
    marg = s2 + v
    w = 1.0 / marg
    tau = (psi * w).sum(axis=0) / w.sum(axis=0)
    resid2 = (psi - tau) ** 2
    return float(-0.5 * (LOG_2PI * psi.size + np.log(marg).sum() + (resid2 / marg).sum()))


def _profile_iso_full(psi: np.ndarray, sigma2: np.ndarray, V: np.ndarray) -> float:
    d, U = np.linalg.eigh(V)
    z = psi @ U
    marg = sigma2[:, None] + d[None, :]
    if np.any(marg <= 0.0):
        return -np.inf
    w = 1.0 / marg
    tau_rot = (z * w).sum(axis=0) / w.sum(axis=0)
    resid2 = (z - tau_rot) ** 2
    return float(-0.5 * (LOG_2PI * psi.size + np.log(marg).sum() + (resid2 / marg).sum()))


# ---------------------------------------------------------------------------
# Gaussian prior fit.
# ---------------------------------------------------------------------------


def _pure_selection_rows(study: StudySummary):
    """Yields (coordinate, implied estimate, implied variance, row) for rows
    touching exactly one coordinate."""
    R = study.reporting_operator
    for row in range(R.shape[0]):
        nz = np.flatnonzero(R[row])
        if nz.size == 1:
            g = int(nz[0])
            w = R[row, g]
            yield g, study.estimate[row] / w, study.covariance[row, row] / w**2, row


def _moment_start(archive: StudyArchive) -> np.ndarray:
    """Method-of-moments start: spread of implied estimates minus average
    noise, clipped to PSD; coordinates without enough data start at zero."""
    g = archive.dimension
    values: list[list[float]] = [[] for _ in range(g)]
    noises: list[list[float]] = [[] for _ in range(g)]
    pair_values: dict[tuple[int, int], list[tuple[float, float, float]]] = {}
    for study in archive.studies:
        rows = list(_pure_selection_rows(study))
        for coord, x, nv, _ in rows:
            values[coord].append(x)
            noises[coord].append(nv)
        for (ca, xa, _, ra), (cb, xb, _, rb) in itertools.combinations(rows, 2):
            if ca == cb:
                continue
            key = (min(ca, cb), max(ca, cb))
            wa = study.reporting_operator[ra, ca]
            wb = study.reporting_operator[rb, cb]
            ncov = study.covariance[ra, rb] / (wa * wb)
            pair_values.setdefault(key, []).append((xa, xb, ncov) if ca < cb else (xb, xa, ncov))
    start = np.zeros((g, g))
    for coord in range(g):
        if len(values[coord]) >= 2:
            start[coord, coord] = max(0.0, float(np.var(values[coord], ddof=1)) - float(np.mean(noises[coord])))
    for (ca, cb), triples in pair_values.items():
        if len(triples) >= 2:
            xa = np.array([t[0] for t in triples])
            xb = np.array([t[1] for t in triples])
            ncov = float(np.mean([t[2] for t in triples]))
            c = float(np.cov(xa, xb, ddof=1)[0, 1]) - ncov
            start[ca, cb] = c
            start[cb, ca] = c
    eigs, vecs = np.linalg.eigh(start)
    start = (vecs * np.clip(eigs, 0.0, None)) @ vecs.T
    return 0.5 * (start + start.T)


def _snap_psd(V: np.ndarray) -> np.ndarray:
    V = np.where(np.abs(V) < SNAP_TOL, 0.0, V)
    V = 0.5 * (V + V.T)
    eigs, vecs = np.linalg.eigh(V)
    if eigs[0] < 0.0:
        V = (vecs * np.clip(eigs, 0.0, None)) @ vecs.T
        V = np.where(np.abs(V) < SNAP_TOL, 0.0, V)
        V = 0.5 * (V + V.T)
    return V


def _chol_params_to_cov(params: np.ndarray, g: int) -> np.ndarray:
    """Maps unconstrained log-Cholesky parameters to a PSD matrix."""
    C = np.zeros((g, g))
    idx = 0
    for row in range(g):
        for col in range(row):
            C[row, col] = params[idx]
            idx += 1
        C[row, row] = math.exp(max(params[idx], LOG_FLOOR))
        idx += 1
    return C @ C.T


def _cov_to_chol_params(V: np.ndarray) -> np.ndarray:
    g = V.shape[0]
    scale = max(float(np.trace(V)) / g, 1e-10)
    jitter = 1e-10 * scale
    C = np.linalg.cholesky(V + jitter * np.eye(g))
    params = []
    for row in range(g):
        for col in range(row):
            params.append(C[row, col])
        params.append(max(math.log(C[row, row]), LOG_FLOOR))
    return np.asarray(params)


def _golden_max(f, lo: float, hi: float, tol: float = 1e-9) -> tuple[float, float]:
    """Golden-section maximization on [lo, hi]; returns (argmax, max)."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    if fc > fd:
        return c, fc
    return d, fd


def _numeric_gradient(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for j in range(x.size):
        h = step * (1.0 + abs(x[j]))
        up = x.copy()
        up[j] += h
        dn = x.copy()
        dn[j] -= h
        grad[j] = (f(up) - f(dn)) / (2.0 * h)
    return grad


def fit_gaussian_prior(
    archive: StudyArchive,
    structure: str = "full",
    options: OptimizerOptions = DEFAULT_OPTIONS,
) -> tuple[GaussianPrior, FitReport]:
    """Fits a Gaussian prior by maximizing the profile log-likelihood.

    The covariance is parameterized to stay PSD during the search:
    log-Cholesky factors for full structure (simplex search), log
    variances for diagonal structure (coordinate ascent with
    golden-section line searches). Boundary fits (zero variance) are
    reached by clipping log parameters and snapping tiny entries to
    exact zero.

    Returns:
        (prior, report); report.converged is False when the search hit
        its iteration cap or the gradient check failed, in which case
        the best iterate found is still returned.
    """
    _assert_identified(archive)
    if structure not in ("full", "diagonal"):
        raise ValidationError(f"unknown structure {structure!r}")
    layout = _Layout(archive)
    g = archive.dimension
    start = _moment_start(archive)
    trajectory: list[float] = []

    if structure == "diagonal":
        V_hat, iterations, converged = _fit_diagonal(layout, np.diag(start).copy(), options, trajectory)
    else:
        V_hat, iterations, converged = _fit_full(layout, start, options, trajectory)

    V_hat = _snap_psd(V_hat)
    if structure == "diagonal":
        V_hat = np.diag(np.diag(V_hat))
    loglik = _profile_loglik_layout(layout, V_hat)
    mean = gls_mean(archive, V_hat)
    prior = GaussianPrior(mean=mean, covariance=V_hat, structure=structure)
    report = FitReport(loglik=loglik, iterations=iterations, converged=converged, trajectory=tuple(trajectory))
    return prior, report


def _fit_diagonal(layout, v_start: np.ndarray, options: OptimizerOptions, trajectory: list):
    g = v_start.shape[0]
    scale = np.maximum(v_start, 1e-6)
    hi = np.log(scale * 1e4)
    u = np.log(np.maximum(v_start, math.exp(LOG_FLOOR)))
    u = np.clip(u, LOG_FLOOR, hi)

    def loglik_of(u_vec: np.ndarray) -> float:
        return _profile_loglik_layout(layout, np.diag(np.exp(np.clip(u_vec, LOG_FLOOR, None))))

    current = loglik_of(u)
    trajectory.append(current)
    sweeps = 0
    converged = False
    max_sweeps = max(1, options.max_search_iterations // max(g, 1))
    for sweeps in range(1, max_sweeps + 1):
        before = current
        for coord in range(g):
            def line(value: float, coord=coord) -> float:
                trial = u.copy()
                trial[coord] = value
                return loglik_of(trial)

            u[coord], current = _golden_max(line, LOG_FLOOR, float(hi[coord]), tol=1e-10)
            trajectory.append(current)
        if current - before < options.fatol * (1.0 + abs(current)):
            converged = True
            break
    return np.diag(np.exp(np.clip(u, LOG_FLOOR, None))), sweeps, converged


def _fit_full(layout, V_start: np.ndarray, options: OptimizerOptions, trajectory: list):
    g = V_start.shape[0]
    x0 = _cov_to_chol_params(V_start)
    best = {"value": -np.inf}

    def objective(params: np.ndarray) -> float:
        value = _profile_loglik_layout(layout, _chol_params_to_cov(params, g))
        if value > best["value"]:
            best["value"] = value
            trajectory.append(value)
        return -value

    result = minimize(
        objective,
        x0,
        method="Nelder-Mead",
        options={
            "xatol": options.xatol,
            "fatol": options.fatol,
            "maxiter": options.max_search_iterations,
            "maxfev": 4 * options.max_search_iterations,
        },
    )
    # Restart once from the found point; a fresh simplex polishes stalls.
    result2 = minimize(
        objective,
        result.x,
        method="Nelder-Mead",
        options={
            "xatol": options.xatol,
            "fatol": options.fatol,
            "maxiter": options.max_search_iterations,
            "maxfev": 4 * options.max_search_iterations,
        },
    )
    x_hat = result2.x
    loglik = -result2.fun
    grad = _numeric_gradient(lambda p: -objective(p), x_hat)
    # Boundary coordinates (clipped log-diagonals) legitimately carry
    # nonzero gradients pointing further down; mask them out.
    mask = np.ones_like(x_hat, dtype=bool)
    idx = 0
    for row in range(g):
        idx += row
        if x_hat[idx] <= LOG_FLOOR + 1e-9:
            mask[idx] = False
        idx += 1
    gnorm = float(np.abs(grad[mask]).max()) if mask.any() else 0.0
    converged = gnorm <= options.gradient_tol * (1.0 + abs(loglik))
    iterations = int(result.nit + result2.nit)
    return _chol_params_to_cov(x_hat, g), iterations, converged


# ---------------------------------------------------------------------------
# Discrete prior fit (grid + EM).
# ---------------------------------------------------------------------------


def build_grid(archive: StudyArchive, points_per_dim: int = 40, padding: float = 3.0) -> np.ndarray:
    """Atom grid spanning the observation-implied range per coordinate.

    For dimensions up to 3 this is a tensor-product grid over
    [min implied estimate - padding * median SE,
     max implied estimate + padding * median SE] per coordinate.
    Higher dimensions switch to observation-implied support points:
    one atom per fully reported study plus completions of partially
    reported ones over small per-coordinate grids.

    Returns:
        (n_atoms, dimension) array of pairwise distinct atoms.
    """
    if points_per_dim < 2:
        raise ValidationError(f"points_per_dim must be >= 2, got {points_per_dim}")
    g = archive.dimension
    axes = [_coordinate_axis(archive, coord, points_per_dim, padding) for coord in range(g)]
    if g <= 3:
        mesh = np.meshgrid(*axes, indexing="ij")
        atoms = np.stack([m.ravel() for m in mesh], axis=1)
        return np.unique(atoms, axis=0)
    return _exemplar_atoms(archive, axes)


def _coordinate_axis(archive: StudyArchive, coord: int, points: int, padding: float) -> np.ndarray:
    implied, ses = _implied_estimates(archive, coord)
    if implied.size == 0:
        raise IdentificationError(
            f"coordinate {coord} has no reporting studies", coordinates=[coord]
        )
    spread = padding * float(np.median(ses))
    lo = float(implied.min()) - spread
    hi = float(implied.max()) + spread
    return np.linspace(lo, hi, points)


def _implied_estimates(archive: StudyArchive, coord: int) -> tuple[np.ndarray, np.ndarray]:
    """Observation-implied values for one coordinate, preferring rows that
    touch it exclusively; falls back to any touching row."""
    pure_x, pure_s = [], []
    loose_x, loose_s = [], []
    for study in archive.studies:
        R = study.reporting_operator
        for row in range(R.shape[0]):
            w = R[row, coord]
            if w == 0.0:
                continue
            x = study.estimate[row] / w
            s = math.sqrt(study.covariance[row, row]) / abs(w)
            if np.flatnonzero(R[row]).size == 1:
                pure_x.append(x)
                pure_s.append(s)
            else:
                loose_x.append(x)
                loose_s.append(s)
    if pure_x:
        return np.asarray(pure_x), np.asarray(pure_s)
    return np.asarray(loose_x), np.asarray(loose_s)


def _exemplar_atoms(archive: StudyArchive, axes: list[np.ndarray]) -> np.ndarray:
    g = len(axes)
    medians = np.array([float(np.median(ax)) for ax in axes])
    atoms = []
    per_study_cap = 729
    for study in archive.studies:
        known = np.full(g, np.nan)
        for coord, x, _, _ in _pure_selection_rows(study):
            known[coord] = x
        missing = np.flatnonzero(np.isnan(known))
        if missing.size == 0:
            atoms.append(known)
            continue
        # Complete missing coordinates over small grids, capped per study.
        points = max(2, int(round(per_study_cap ** (1.0 / missing.size))))
        sub_axes = []
        for coord in missing:
            ax = axes[coord]
            take = np.linspace(0, ax.size - 1, min(points, ax.size)).round().astype(int)
            sub_axes.append(ax[np.unique(take)])
        if int(np.prod([ax.size for ax in sub_axes])) > per_study_cap:
            filled = known.copy()
            filled[missing] = medians[missing]
            atoms.append(filled)
            continue
        for combo in itertools.product(*sub_axes):
            filled = known.copy()
            filled[missing] = combo
            atoms.append(filled)
    if not atoms:
        raise ValidationError("no atoms could be built from the archive")
    return np.unique(np.asarray(atoms), axis=0)


def _study_atom_logliks(study: StudySummary, atoms: np.ndarray) -> np.ndarray:
    """Log density of the study's estimate at each atom, under the study's
    own noise covariance."""
    R = study.reporting_operator
    resid = study.estimate[:, None] - R @ atoms.T
    cov = study.covariance
    k = study.n_components
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericalError(f"study {study.study_id}: covariance is not positive definite") from None
    z = solve_triangular(L, resid, lower=True)
    quad = (z**2).sum(axis=0)
    logdet = 2.0 * float(np.log(np.diag(L)).sum())
    return -0.5 * (k * LOG_2PI + logdet + quad)


def fit_npmle(
    archive: StudyArchive,
    grid: np.ndarray,
    options: OptimizerOptions = DEFAULT_OPTIONS,
) -> tuple[DiscretePrior, FitReport]:
    """Nonparametric maximum-likelihood mixture fit on a fixed atom grid.

    Runs EM fixed-point iterations on the mixture weights, starting
    uniform, entirely in log space. Stops when the per-iteration
    log-likelihood gain falls below em_gain_tol * n_studies or at the
    iteration cap. Atoms with final weight below prune_tol are dropped
    and the remaining weights renormalized.

    Raises:
        NumericalError: the grid misses some study so badly that every
            mixture component underflows; enlarge the grid padding.
    """
    _assert_identified(archive)
    atoms = np.atleast_1d(np.asarray(grid, dtype=float))
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    if atoms.shape[0] == 0:
        raise ValidationError("grid must contain at least one atom")
    if atoms.shape[1] != archive.dimension:
        raise ValidationError(f"grid dimension {atoms.shape[1]} does not match archive dimension {archive.dimension}")
    n = len(archive.studies)
    loglik_matrix = np.stack([_study_atom_logliks(study, atoms) for study in archive.studies])
    worst = loglik_matrix.max(axis=1)
    if np.any(worst < -700.0):
        bad = archive.studies[int(np.argmin(worst))].study_id
        raise NumericalError(
            f"mixture density underflows for study {bad}; the grid misses its estimate, increase padding"
        )
    log_weights = np.full(atoms.shape[0], -math.log(atoms.shape[0]))
    trajectory: list[float] = []
    converged = False
    previous = -np.inf
    for _ in range(options.max_iterations):
        scores = loglik_matrix + log_weights
        per_study = logsumexp(scores, axis=1)
        current = float(per_study.sum())
        trajectory.append(current)
        if current - previous < options.em_gain_tol * n and math.isfinite(previous):
            converged = True
            break
        previous = current
        resp = np.exp(scores - per_study[:, None])
        weights = resp.mean(axis=0)
        with np.errstate(divide="ignore"):
            log_weights = np.log(weights)
    keep = np.exp(log_weights) >= options.prune_tol
    if not keep.any():
        keep[int(np.argmax(log_weights))] = True
    weights = np.exp(log_weights[keep])
    weights = weights / weights.sum()
    prior = DiscretePrior(atoms=atoms[keep], weights=weights)
    report = FitReport(
        loglik=trajectory[-1],
        iterations=len(trajectory),
        converged=converged,
        trajectory=tuple(trajectory),
    )
    return prior, report


def _marginal_subarchive(archive: StudyArchive, coord: int) -> StudyArchive:
    """One-dimensional archive of all pure-selection reports of a coordinate."""
    studies = []
    for study in archive.studies:
        for c, x, nv, _ in _pure_selection_rows(study):
            if c == coord:
                studies.append(
                    StudySummary(
                        study_id=study.study_id,
                        estimate=np.array([x]),
                        covariance=np.array([[nv]]),
                        reporting_operator=np.array([[1.0]]),
                    )
                )
    if not studies:
        raise IdentificationError(
            f"coordinate {coord} has no pure-selection reports", coordinates=[coord]
        )
    return StudyArchive(studies=tuple(studies), dimension=1)


def fit_npmle_independent(
    archive: StudyArchive,
    points_per_dim: int = 40,
    padding: float = 3.0,
    options: OptimizerOptions = DEFAULT_OPTIONS,
) -> tuple[DiscretePrior, FitReport]:
    """Coordinatewise nonparametric fit combined into a product prior.

    Each coordinate is fit as a one-dimensional mixture on the studies
    reporting it; the returned prior is the product measure (tensor
    atoms, product weights, tiny weights pruned). The report's loglik
    re-evaluates the product prior on the full archive.
    """
    _assert_identified(archive)
    per_coord: list[DiscretePrior] = []
    iterations = 0
    converged = True
    for coord in range(archive.dimension):
        sub = _marginal_subarchive(archive, coord)
        grid = build_grid(sub, points_per_dim=points_per_dim, padding=padding)
        fitted, report = fit_npmle(sub, grid, options)
        per_coord.append(fitted)
        iterations += report.iterations
        converged = converged and report.converged
    mesh = np.meshgrid(*[p.atoms[:, 0] for p in per_coord], indexing="ij")
    atoms = np.stack([m.ravel() for m in mesh], axis=1)
    weights = per_coord[0].weights
    for p in per_coord[1:]:
        weights = np.outer(weights, p.weights).ravel()
    keep = weights >= options.prune_tol * weights.max()
    atoms, weights = atoms[keep], weights[keep]
    prior = DiscretePrior(atoms=atoms, weights=weights / weights.sum())
    loglik = marginal_loglik(prior, archive)
    return prior, FitReport(loglik=loglik, iterations=iterations, converged=converged, trajectory=())


def marginal_loglik(prior: GaussianPrior | DiscretePrior, archive: StudyArchive) -> float:
    """Log-likelihood of the archive under a fitted prior's marginal law."""
    if prior.dimension != archive.dimension:
        raise ValidationError(
            f"prior dimension {prior.dimension} does not match archive dimension {archive.dimension}"
        )
    if isinstance(prior, GaussianPrior):
        total = 0.0
        for study in archive.studies:
            R = study.reporting_operator
            M = study.covariance + R @ prior.covariance @ R.T
            resid = study.estimate - R @ prior.mean
            sign, logdet = np.linalg.slogdet(M)
            if sign <= 0:
                raise NumericalError(f"study {study.study_id}: marginal covariance is not positive definite")
            quad = float(resid @ np.linalg.solve(M, resid))
            total += -0.5 * (study.n_components * LOG_2PI + logdet + quad)
        return total
    log_weights = np.log(prior.weights + 0.0)
    total = 0.0
    for study in archive.studies:
        scores = _study_atom_logliks(study, prior.atoms) + log_weights
        total += float(logsumexp(scores))
    return total


# ---------------------------------------------------------------------------
# Serialization.
# ---------------------------------------------------------------------------


def prior_to_dict(prior: GaussianPrior | DiscretePrior, report: FitReport | None = None) -> dict:
    if isinstance(prior, GaussianPrior):
        doc = {
            "kind": "gaussian",
            "mean": prior.mean.tolist(),
            "cov": prior.covariance.tolist(),
            "structure": prior.structure,
        }
    else:
        doc = {
            "kind": "discrete",
            "atoms": prior.atoms.tolist(),
            "weights": prior.weights.tolist(),
        }
    if report is not None:
        # Coerce to builtins; numpy scalars are not JSON serializable.
        doc["fit"] = {
            "loglik": float(report.loglik),
            "iterations": int(report.iterations),
            "converged": bool(report.converged),
        }
    return doc


def prior_from_dict(doc: dict) -> tuple[GaussianPrior | DiscretePrior, FitReport | None]:
    kind = doc.get("kind")
    if kind == "gaussian":
        prior = GaussianPrior(
            mean=np.asarray(doc["mean"], dtype=float),
            covariance=np.asarray(doc["cov"], dtype=float),
            structure=doc.get("structure", "full"),
        )
    elif kind == "discrete":
        prior = DiscretePrior(
            atoms=np.asarray(doc["atoms"], dtype=float),
            weights=np.asarray(doc["weights"], dtype=float),
        )
    else:
        raise ValidationError(f"unknown prior kind {kind!r}")
    report = None
    if "fit" in doc:
        fit = doc["fit"]
        report = FitReport(
            loglik=float(fit["loglik"]),
            iterations=int(fit["iterations"]),
            converged=bool(fit["converged"]),
        )
    return prior, report


def save_prior(prior, path, report: FitReport | None = None) -> None:
    with open(path, "w") as handle:
        json.dump(prior_to_dict(prior, report), handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_prior(path) -> tuple[GaussianPrior | DiscretePrior, FitReport | None]:
    with open(path) as handle:
        return prior_from_dict(json.load(handle))
