# app/routers/ldp_router.py
import logging

import numpy as np

from ..core.ldp import (
    flow_moment,
    integral_rate,
    laplace_principle,
    ldp_slope,
    rate_I,
    sample_pairs,
    skeleton_convergence,
    worst_case_qv,
)
from ..core.optimize import OptimizerConfig
from ..core.skeleton import FlowMap, IntegralMap, PathTarget, TerminalTarget, rate_J
from ..models.flow import SkeletonPair
from ..schemas.experiment import ExperimentKind
from ..schemas.report import InvariantCheck
from .router import ExperimentResult, ExperimentRouter, RunContext

logger = logging.getLogger(__name__)

router = ExperimentRouter(tags=["LDP"])


def _optimizer(ctx: RunContext, n_starts: int, max_iter: int) -> OptimizerConfig:
    return OptimizerConfig(gradient_tol=ctx.tolerances.gradient, n_starts=n_starts, max_iter=max_iter)


@router.experiment(ExperimentKind.RATE)
def run_rate(ctx: RunContext) -> ExperimentResult:
    S, grid, tol = ctx.uncertainty, ctx.time_grid, ctx.tolerances
    cfg = ctx.config.rate
    x0 = ctx.vector(cfg.x0, S.dim, "x0")
    if cfg.skeleton == "flow":
        skeleton_map = FlowMap(ctx.flow(), x0)
    else:
        skeleton_map = IntegralMap(S.dim, x0)
    if cfg.target == "linear_path":
        velocity = ctx.vector(cfg.velocity, skeleton_map.state_dim, "velocity")
        target = PathTarget(x0 + grid.times[:, None] * velocity)
    else:
        target = TerminalTarget(ctx.vector(cfg.value, skeleton_map.state_dim, "value"))

    result = rate_I(
        target, skeleton_map, S, grid,
        config=_optimizer(ctx, cfg.n_starts, cfg.max_iter),
        penalties=cfg.penalties,
        feasibility_tol=cfg.feasibility_tol,
        seed=ctx.seed,
        workers=ctx.workers,
    )
    ctx.output.write_csv("rate_trace.csv", ["iteration", "objective"], enumerate(result.trace))
    ctx.output.write_csv(
        "rate_starts.csv", ["start", "J", "objective", "converged"],
        [(i, *row) for i, row in enumerate(result.starts)],
    )
    ctx.output.write_dat("rate_argmin.dat", [grid.times[:-1], result.argmin.f_dot[:, 0]], comment="t f'(t)")

    # the warm start at sigma_hi^2 is feasible for the integral map and a
    # candidate for any map; I never exceeds J there
    g_hi = np.full((grid.n_steps, S.dim), S.sigma_hi2)
    reference = target.reference_path(grid, skeleton_map.x0)
    constructed = SkeletonPair.from_diagonal(grid, skeleton_map.warm_start(reference, grid, g_hi), g_hi)
    constructed_J = rate_J(constructed, S)
    scheme = tol.scheme * max(abs(constructed_J), 1e-12)
    checks = [
        InvariantCheck(
            name="rate_converged", passed=result.converged, value=result.distance, limit=cfg.feasibility_tol,
            detail="sup distance of Psi(argmin) to the target",
        ),
        InvariantCheck(
            name="rate_below_constructed", passed=result.value <= constructed_J + scheme,
            value=result.value, limit=constructed_J + scheme,
        ),
    ]
    results = {
        "skeleton": skeleton_map.name,
        "target": cfg.target,
        "rate": result.value,
        "objective": result.objective,
        "distance": result.distance,
        "iterations": result.iterations,
        "gradient_norm": result.gradient_norm,
        "converged": result.converged,
        "starts": len(result.starts),
        "constructed_J": constructed_J,
    }
    if cfg.skeleton == "integral":
        closed_form = integral_rate(target, S, grid, x0)
        deviation = abs(result.value - closed_form)
        checks.append(
            InvariantCheck(
                name="rate_closed_form", passed=deviation <= tol.scheme * max(closed_form, 1e-12),
                value=deviation, limit=tol.scheme * closed_form,
            )
        )
        results["closed_form"] = closed_form
    return ExperimentResult(results, checks)


def _reference_rate(ctx: RunContext, flow_spec, x0: np.ndarray):
    cfg = ctx.config.ldp
    if cfg.rate is not None:
        return cfg.rate
    if cfg.rate_target is None:
        return None
    S = ctx.uncertainty
    target = TerminalTarget(ctx.vector(cfg.rate_target, flow_spec.state_dim, "rate_target"))
    result = rate_I(target, FlowMap(flow_spec, x0), S, ctx.time_grid, config=_optimizer(ctx, 8, 400), seed=ctx.seed, workers=ctx.workers)
    if not result.converged:
        logger.warning("reference rate for the LDP slope did not converge (distance %.3g)", result.distance)
    return result.value


@router.experiment(ExperimentKind.LDP)
def run_ldp(ctx: RunContext) -> ExperimentResult:
    """Capacity asymptotics along eps; optionally the Laplace principle for sqrt(eps) B_T."""
    S, grid, tol = ctx.uncertainty, ctx.time_grid, ctx.tolerances
    cfg = ctx.config.ldp
    flow_spec = ctx.flow()
    x0 = ctx.vector(cfg.x0, flow_spec.state_dim, "x0")
    event = ctx.event
    policies = ctx.policies()
    rate = _reference_rate(ctx, flow_spec, x0)
    distances = flow_spec.check_uniform_convergence(cfg.eps, seed=ctx.seed)

    report = ldp_slope(event, flow_spec, S, grid, policies, cfg.eps, ctx.config.n_paths, ctx.seed, rate, x0, ctx.workers)
    capacities = report.capacities
    ctx.output.write_csv(
        "capacity.csv", ["eps", "capacity", "se", "policy", "censored"],
        [(eps, c.value, c.se, c.policy, c.censored) for eps, c in zip(cfg.eps, capacities)],
    )
    ctx.output.write_csv(
        "capacity_policies.csv", ["eps", "policy", "frequency", "se", "hits", "censored"],
        [(eps, row.policy, row.frequency, row.se, row.hits, row.censored) for eps, c in zip(cfg.eps, capacities) for row in c.per_policy],
    )
    ctx.output.write_dat(
        "capacity.dat", [[1.0 / eps for eps in cfg.eps], [np.log(c.value) for c in capacities]], comment="1/eps log c"
    )
    results = {
        "event": cfg.event,
        "flow": flow_spec.name,
        "slope": report.slope,
        "intercept": report.intercept,
        "stderr": report.stderr,
        "eps_used": list(report.used),
        "inf_rate": rate,
        "relative_deviation": report.relative_deviation,
        "coefficient_distance": list(distances),
    }
    checks = []
    if report.relative_deviation is not None:
        checks.append(
            InvariantCheck(
                name="slope_matches_rate",
                passed=report.relative_deviation <= tol.slope_relative,
                value=report.relative_deviation,
                limit=tol.slope_relative,
                detail="|slope + inf I| / inf I",
            )
        )

    if cfg.laplace is not None:
        functional = ctx.laplace_functional

        def phi(x):
            return functional(x.reshape(-1, 1, S.dim)).reshape(x.shape[:-1])

        rows = laplace_principle(
            phi, functional.bound, cfg.laplace.eps, S, grid.horizon,
            dx=cfg.laplace.dx, half_width=cfg.laplace.half_width,
        )
        ctx.output.write_csv("laplace.csv", ["eps", "lhs", "rhs", "deviation"], [(r.eps, r.lhs, r.rhs, r.deviation) for r in rows])
        deviations = [row.deviation for row in rows]  # eps decreasing
        growth = max((b - a for a, b in zip(deviations, deviations[1:])), default=0.0)
        checks.append(
            InvariantCheck(
                name="laplace_deviation_shrinks", passed=growth <= tol.scheme * max(abs(rows[-1].rhs), 1e-12),
                value=growth, limit=tol.scheme * abs(rows[-1].rhs),
            )
        )
        results["laplace"] = [{"eps": r.eps, "lhs": r.lhs, "rhs": r.rhs, "deviation": r.deviation} for r in rows]
    return ExperimentResult(results, checks)


@router.experiment(ExperimentKind.FLOW)
def run_flow(ctx: RunContext) -> ExperimentResult:
    """Euler-skeleton convergence and the empirical flow moment constant."""
    S, grid, tol = ctx.uncertainty, ctx.time_grid, ctx.tolerances
    cfg = ctx.config.flow
    flow_spec = ctx.flow()
    x0 = ctx.points(cfg.x0)
    pairs = sample_pairs(grid, S, cfg.pairs, cfg.h_radius, seed=ctx.seed)
    rows = skeleton_convergence(flow_spec, pairs, x0, cfg.n_list)
    ctx.output.write_csv("skeleton.csv", ["N", "sup_error", "rho"], [(r.N, r.sup_error, r.rho) for r in rows])
    ctx.output.write_dat("skeleton.dat", [[r.N for r in rows], [r.sup_error for r in rows]], comment="N sup_error")

    errors = [r.sup_error for r in rows]
    ratios = [a / b if b > 0 else np.inf for a, b in zip(errors, errors[1:])]
    worst = min(ratios, default=np.inf)
    checks = [
        InvariantCheck(
            name="skeleton_converges", passed=worst >= cfg.min_ratio, value=worst, limit=cfg.min_ratio,
            detail="smallest ratio of successive sup errors",
        )
    ]
    results = {
        "flow": flow_spec.name,
        "skeleton": [{"N": r.N, "sup_error": r.sup_error, "rho": r.rho} for r in rows],
        "ratios": ratios,
        "lipschitz_observed": flow_spec.check_lipschitz(seed=ctx.seed),
    }

    if cfg.moment_points and ctx.config.n_paths > 0:
        points = ctx.points(cfg.moment_points)
        policies = ctx.policies()
        report = flow_moment(flow_spec, S, grid, policies, points, ctx.config.n_paths, ctx.seed, ctx.workers)
        doubled = flow_moment(flow_spec, S, grid, policies, points, 2 * ctx.config.n_paths, ctx.seed, ctx.workers)
        change = abs(doubled.constant - report.constant) / max(report.constant, 1e-12)
        ctx.output.write_csv(
            "flow_moment.csv", ["policy", "constant", "constant_doubled"],
            [(name, c, c2) for (name, c), (_, c2) in zip(report.per_policy, doubled.per_policy)],
        )
        checks.append(InvariantCheck(name="moment_finite", passed=bool(np.isfinite(report.constant)), value=report.constant))
        checks.append(
            InvariantCheck(name="moment_stable", passed=change <= cfg.moment_stability, value=change, limit=cfg.moment_stability)
        )
        results["moment_constant"] = report.constant
        results["moment_constant_doubled"] = doubled.constant
    return ExperimentResult(results, checks)


@router.experiment(ExperimentKind.QV)
def run_qv(ctx: RunContext) -> ExperimentResult:
    """E^G of a functional of <B>: Monte Carlo over the family against the deterministic sup."""
    S, grid, tol = ctx.uncertainty, ctx.time_grid, ctx.tolerances
    cfg = ctx.config.qv
    upsilon = ctx.qv_functional
    result = worst_case_qv(
        upsilon, S, grid, ctx.policies(), ctx.config.n_paths, ctx.seed,
        config=_optimizer(ctx, 8, 400), workers=ctx.workers,
    )
    ctx.output.write_csv("qv_policies.csv", ["policy", "mean", "se"], result.per_policy)
    ctx.output.write_dat("qv_argmax.dat", [grid.times[:-1], result.det_argmax[:, 0]], comment="t g'(t)")

    gap = abs(result.mc_sup - result.det_sup)
    limit = tol.qv_agreement * max(abs(result.det_sup), 1e-12) + tol.mc_confidence * result.mc_se
    checks = [InvariantCheck(name="qv_agreement", passed=gap <= limit, value=gap, limit=limit)]
    results = {
        "functional": cfg.name,
        "mc_sup": result.mc_sup,
        "mc_se": result.mc_se,
        "mc_policy": result.mc_policy,
        "det_sup": result.det_sup,
    }
    return ExperimentResult(results, checks)
