"""Command-line entry point: archive ingestion, prior fitting, design
optimization, regret and rate studies, and the dominance check.

Every command writes a machine-readable report.json plus plot-ready
plot_*.csv tables into the output directory and prints a short summary.
Exit codes: 0 success, 1 validation or usage error, 2 numerical failure.
"""

import csv
import json
import sys
from importlib import metadata
from pathlib import Path

import click
import numpy as np

from .archive import load_archive, load_strata_config
from .designs import (
    Design,
    DesignProblem,
    EstimationQuadratic,
    InExperimentWelfare,
    PolicyChoice,
    design_cost,
    no_information_design,
    solve_objective1,
    solve_objective2,
    solve_objective3,
)
from .errors import NumericalError, ValidationError
from .priors import (
    GaussianPrior,
    build_grid,
    fit_gaussian_prior,
    fit_npmle,
    fit_npmle_independent,
    load_prior,
    moment_match,
    prior_to_dict,
    save_prior,
)
from .regret import (
    BinaryAdoption,
    Portfolio,
    QuadraticForm,
    RateConfig,
    RegretTemplate,
    Selection,
    Testing,
    loewner_dominance,
    propensity_lattice,
    rate_experiment,
    regret_experiment,
)

_COMPLIANCE_FLAGS = {
    "perfect": "perfect",
    "itt-voucher": "itt_voucher_budget",
    "itt-takeup": "itt_takeup_budget",
}


def _package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _parse_matrix(text: str) -> np.ndarray:
    """Matrix flag value: a CSV file path, or inline rows split on ';'.

    Args:
        text: e.g. "weights.csv" or "1,0;0,2".

    Returns:
        2-D float array.
    """
    path = Path(text)
    if path.exists():
        return np.atleast_2d(np.loadtxt(path, delimiter=",", ndmin=2))
    try:
        rows = [[float(cell) for cell in row.split(",")] for row in text.split(";")]
    except ValueError:
        raise ValidationError(f"cannot parse matrix {text!r}") from None
    widths = {len(row) for row in rows}
    if len(widths) != 1:
        raise ValidationError(f"ragged matrix rows in {text!r}")
    return np.asarray(rows, dtype=float)


def _limit_threads(threads: int | None) -> None:
    if threads is None:
        return
    if threads < 1:
        raise ValidationError("threads must be >= 1")
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(threads)
    except ImportError:
        # BLAS pools are configured at import time; without threadpoolctl
        # the flag can only influence child processes.
        import os

        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def _to_jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    return value


def emit_report(doc: dict, out_dir, tables: dict[str, list[list]] | None = None) -> None:
    """Writes report.json and the plot_*.csv tables for one command.

    Args:
        doc: machine-readable result; arrays are converted to lists.
        out_dir: target directory, created if missing.
        tables: file name -> rows (first row is the header).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as handle:
        json.dump(_to_jsonable(doc), handle, indent=2, sort_keys=True)
        handle.write("\n")
    for name, rows in (tables or {}).items():
        with open(out / name, "w", newline="") as handle:
            writer = csv.writer(handle)
            for row in rows:
                writer.writerow(row)


def _moments_table(prior) -> list[list]:
    mm = moment_match(prior)
    G = mm.dimension
    sd = np.sqrt(np.diag(mm.covariance))
    header = ["stratum", "mean", "variance"] + [f"corr_{j}" for j in range(G)]
    rows: list[list] = [header]
    for g in range(G):
        corr = []
        for j in range(G):
            denom = sd[g] * sd[j]
            corr.append(float(mm.covariance[g, j] / denom) if denom > 0.0 else 0.0)
        rows.append([g, float(mm.mean[g]), float(mm.covariance[g, g])] + corr)
    return rows


@click.group()
@click.version_option(_package_version(), prog_name="ebdesign")
@click.option("--threads", type=int, default=None, help="Cap BLAS/worker threads.")
def cli(threads):
    """Empirical-Bayes experimental design toolkit."""
    _limit_threads(threads)


@cli.command("estimate-prior")
@click.option("--archive", "archive_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dim", required=True, type=int, help="Number of strata per study.")
@click.option("--method", type=click.Choice(["gaussian", "npmle"]), default="gaussian", show_default=True)
@click.option("--structure", type=click.Choice(["full", "diagonal"]), default="full", show_default=True,
              help="Gaussian covariance structure.")
@click.option("--points", type=int, default=40, show_default=True, help="NPMLE grid points per dimension.")
@click.option("--padding", type=float, default=3.0, show_default=True, help="NPMLE grid padding in SD units.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".", show_default=True)
def estimate_prior(archive_path, dim, method, structure, points, padding, out_dir):
    """Fit a cross-study prior from an archive CSV."""
    archive = load_archive(archive_path, dimension=dim)
    if method == "gaussian":
        prior, report = fit_gaussian_prior(archive, structure=structure)
    elif dim == 1:
        grid = build_grid(archive, points_per_dim=points, padding=padding)
        prior, report = fit_npmle(archive, grid)
    else:
        prior, report = fit_npmle_independent(archive, points_per_dim=points, padding=padding)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_prior(prior, out / "prior.json", report=report)
    mm = moment_match(prior)
    doc = {
        "command": "estimate-prior",
        "archive": str(archive_path),
        "dim": dim,
        "method": method,
        "structure": structure if method == "gaussian" else None,
        "prior": prior_to_dict(prior, report),
        "moments": {"mean": mm.mean, "covariance": mm.covariance},
        "n_studies": len(archive.studies),
    }
    emit_report(doc, out, {"plot_prior_moments.csv": _moments_table(prior)})
    click.echo(f"fitted {method} prior on {len(archive.studies)} studies")
    click.echo(f"means: {np.array2string(mm.mean, precision=4)}")
    click.echo(f"variances: {np.array2string(np.diag(mm.covariance), precision=4)}")
    click.echo(f"loglik {report.loglik:.4f}  converged {report.converged}")
    click.echo(f"wrote {out / 'prior.json'}, {out / 'report.json'}, {out / 'plot_prior_moments.csv'}")


def _build_objective(objective: str, L, Lambda):
    if objective == "estimation":
        transform = None if L is None else _parse_matrix(L)
        weight = None if Lambda is None else _parse_matrix(Lambda)
        return EstimationQuadratic(transform=transform, weight=weight)
    if L is not None or Lambda is not None:
        raise ValidationError("--L/--Lambda apply to the estimation objective only")
    return InExperimentWelfare() if objective == "welfare" else PolicyChoice()


def _solve(problem: DesignProblem, objective: str) -> Design:
    if objective == "estimation":
        return solve_objective1(problem)
    if objective == "welfare":
        return solve_objective2(problem)
    return solve_objective3(problem)


@cli.command("optimize-design")
@click.option("--prior", "prior_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Prior JSON; optional with --no-information.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--objective", required=True, type=click.Choice(["estimation", "welfare", "policy"]))
@click.option("--L", "L", default=None, help="Estimand transform matrix (CSV file or inline rows).")
@click.option("--Lambda", "Lambda", default=None, help="Quadratic weight matrix (CSV file or inline rows).")
@click.option("--compliance", type=click.Choice(sorted(_COMPLIANCE_FLAGS)), default="perfect", show_default=True)
@click.option("--no-information", "no_information", is_flag=True, help="Solve the benchmark instead of the EB design.")
@click.option("--reference-variance", type=float, default=1.0, show_default=True,
              help="Policy-objective benchmark prior variance.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".", show_default=True)
def optimize_design(prior_path, config_path, objective, L, Lambda, compliance, no_information,
                    reference_variance, out_dir):
    """Solve for the optimal propensity design under a fitted prior."""
    config = load_strata_config(config_path)
    if prior_path is not None:
        prior, _ = load_prior(prior_path)
    elif no_information:
        prior = GaussianPrior(mean=np.zeros(config.n_strata), covariance=np.eye(config.n_strata))
    else:
        raise ValidationError("--prior is required unless --no-information is set")
    problem = DesignProblem(
        config=config,
        objective=_build_objective(objective, L, Lambda),
        prior=prior,
        compliance_mode=_COMPLIANCE_FLAGS[compliance],
    )
    benchmark = no_information_design(problem, reference_variance=reference_variance)
    design = benchmark if no_information else _solve(problem, objective)
    cost = design_cost(design.propensities, config, problem.compliance_mode)
    doc = {
        "command": "optimize-design",
        "objective": objective,
        "compliance": compliance,
        "no_information": no_information,
        "propensities": design.propensities,
        "objective_value": design.objective_value,
        "multiplier": design.multiplier,
        "binding": design.binding,
        "cost": cost,
        "budget": config.budget,
        "benchmark": {
            "propensities": benchmark.propensities,
            "objective_value": benchmark.objective_value,
        },
    }
    table: list[list] = [["stratum", "propensity", "benchmark_propensity"]]
    for g in range(config.n_strata):
        table.append([g, float(design.propensities[g]), float(benchmark.propensities[g])])
    emit_report(doc, out_dir, {"plot_design.csv": table})
    click.echo(f"{objective} design: {np.array2string(design.propensities, precision=4)}")
    click.echo(f"objective value {design.objective_value:.6f}  cost {cost:.4f} / budget {config.budget:.4f}")
    click.echo(f"multiplier {design.multiplier:.6f}  binding {design.binding}")


_REGRET_KINDS = ("quadratic", "adoption")


@cli.command("evaluate-regret")
@click.option("--prior", "prior_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="True prior JSON used to synthesize archives.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--estimator", type=click.Choice(["gaussian", "npmle"]), default="gaussian", show_default=True)
@click.option("--kind", type=click.Choice(_REGRET_KINDS), default="quadratic", show_default=True)
@click.option("--n", required=True, type=int, help="Archive size.")
@click.option("--seed", required=True, type=int)
@click.option("--lattice-points", type=int, default=11, show_default=True)
@click.option("--value-draws", type=int, default=0, show_default=True,
              help="0 selects exact values; positive selects Monte Carlo.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".", show_default=True)
def evaluate_regret(prior_path, config_path, estimator, kind, n, seed, lattice_points, value_draws, out_dir):
    """Run one oracle-inequality regret experiment."""
    config = load_strata_config(config_path)
    truth, _ = load_prior(prior_path)
    continuation = (
        QuadraticForm(weight=np.eye(config.n_strata))
        if kind == "quadratic"
        else BinaryAdoption(shares=config.shares)
    )
    template = RegretTemplate(
        lattice=propensity_lattice(config, lattice_points),
        kind=continuation,
        value_draws=value_draws,
    )
    res = regret_experiment(truth, template, estimator, n=n, seed=seed)
    doc = {
        "command": "evaluate-regret",
        "estimator": estimator,
        "kind": kind,
        "n": n,
        "seed": seed,
        "oracle_value": res.oracle_value,
        "eb_value_under_truth": res.eb_value_under_truth,
        "ni_value_under_truth": res.ni_value_under_truth,
        "regret": res.regret,
        "delta_bound": res.delta_bound,
        "bound_satisfied": res.bound_satisfied,
        "mc_stderr": res.mc_stderr,
        "oracle_design": res.oracle_design,
        "eb_design": res.eb_design,
        "ni_design": res.ni_design,
    }
    table: list[list] = [["role", "stratum", "propensity"]]
    for role, design in (("oracle", res.oracle_design), ("eb", res.eb_design), ("ni", res.ni_design)):
        for g in range(config.n_strata):
            table.append([role, g, float(design[g])])
    emit_report(doc, out_dir, {"plot_regret.csv": table})
    click.echo(f"regret {res.regret:.6g} (bound {res.delta_bound:.6g})  satisfied {res.bound_satisfied}")
    click.echo(f"oracle {res.oracle_value:.6f}  eb {res.eb_value_under_truth:.6f}  ni {res.ni_value_under_truth:.6f}")


def _load_rate_config(path) -> RateConfig:
    """Rate config file: flat key = value text or JSON."""
    text = Path(path).read_text()
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
            value = value.strip()
            if value.startswith("["):
                if not value.endswith("]"):
                    raise ValidationError(f"line {line_no}: unterminated array {value!r}")
                raw[key.strip()] = [float(part) for part in value[1:-1].split(",") if part.strip()]
            else:
                try:
                    raw[key.strip()] = float(value)
                except ValueError:
                    raw[key.strip()] = value
    known = {"order", "estimator", "n_grid", "replications", "seed"}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown rate config keys: {sorted(unknown)}")
    if "order" not in raw:
        raise ValidationError("rate config needs an order key")
    kwargs = {"order": str(raw["order"])}
    if "estimator" in raw:
        kwargs["estimator"] = str(raw["estimator"])
    if "n_grid" in raw:
        kwargs["n_grid"] = tuple(int(x) for x in raw["n_grid"])
    if "replications" in raw:
        kwargs["replications"] = int(raw["replications"])
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    return RateConfig(**kwargs)


@cli.command("simulate-rates")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Rate config file (order, estimator, n_grid, replications, seed).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".", show_default=True)
def simulate_rates(config_path, out_dir):
    """Measure how mean regret scales with archive size."""
    setup = _load_rate_config(config_path)
    res = rate_experiment(setup)
    doc = {
        "command": "simulate-rates",
        "order": res.order,
        "estimator": res.estimator,
        "n_grid": list(res.n_grid),
        "mean_regret": list(res.mean_regret),
        "stderr": list(res.stderr),
        "slope": res.slope,
        "slope_se": res.slope_se,
        "curvature_numeric": res.curvature_numeric,
        "curvature_analytic": res.curvature_analytic,
        "seed": setup.seed,
        "replications": setup.replications,
    }
    rates_table: list[list] = [["n", "mean_regret", "stderr"]]
    for n, mean, se in zip(res.n_grid, res.mean_regret, res.stderr):
        rates_table.append([n, mean, se])
    slopes_table: list[list] = [
        ["order", "estimator", "slope", "slope_se"],
        [res.order, res.estimator, res.slope, res.slope_se],
    ]
    emit_report(doc, out_dir, {"plot_rates.csv": rates_table, "plot_slopes.csv": slopes_table})
    click.echo(f"{res.order}-order {res.estimator}: slope {res.slope:.3f} (se {res.slope_se:.3f})")
    for n, mean, se in zip(res.n_grid, res.mean_regret, res.stderr):
        click.echo(f"  n = {n:>5d}  mean regret {mean:.6g} (se {se:.3g})")


def _dominance_kinds(dim: int):
    return [
        QuadraticForm(weight=np.eye(dim)),
        Portfolio(risk_aversion=1.0, covariance=np.eye(dim)),
        BinaryAdoption(shares=np.full(dim, 1.0 / dim)),
        Selection(),
        Testing(loss0=1.0, loss1=1.0),
    ]


@cli.command("dominance-check")
@click.option("--sigma1", required=True, help="Finer noise covariance (CSV file or inline rows).")
@click.option("--sigma2", required=True, help="Coarser noise covariance (CSV file or inline rows).")
@click.option("--prior", "prior_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Prior JSON; defaults to a standard normal.")
@click.option("--draws", type=int, default=4000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".", show_default=True)
def dominance_check(sigma1, sigma2, prior_path, draws, seed, out_dir):
    """Check that the finer experiment is worth more for every kind."""
    S1 = _parse_matrix(sigma1)
    S2 = _parse_matrix(sigma2)
    if prior_path is not None:
        prior, _ = load_prior(prior_path)
    else:
        prior = GaussianPrior(mean=np.zeros(S1.shape[0]), covariance=np.eye(S1.shape[0]))
    report = loewner_dominance(S1, S2, prior, _dominance_kinds(S1.shape[0]), draws=draws, seed=seed)
    doc = {
        "command": "dominance-check",
        "ordered": report.ordered,
        "dominance_verified": report.dominance_verified,
        "draws": draws,
        "seed": seed,
        "entries": [
            {
                "kind": e.kind_name,
                "value_fine": e.value_fine,
                "value_coarse": e.value_coarse,
                "stderr": e.stderr,
                "ok": e.ok,
            }
            for e in report.entries
        ],
    }
    table: list[list] = [["kind", "value_fine", "value_coarse", "stderr", "ok"]]
    for e in report.entries:
        table.append([e.kind_name, e.value_fine, e.value_coarse, e.stderr, e.ok])
    emit_report(doc, out_dir, {"plot_dominance.csv": table})
    if not report.ordered:
        click.echo("covariances are not Loewner ordered; no dominance claim")
    else:
        click.echo(f"ordered pair; dominance verified: {report.dominance_verified}")
        for e in report.entries:
            click.echo(f"  {e.kind_name}: fine {e.value_fine:.6f} vs coarse {e.value_coarse:.6f}  ok {e.ok}")


def main(argv=None) -> int:
    """Entry point mapping errors to exit codes 0/1/2."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.exceptions.Abort:
        return 1
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
