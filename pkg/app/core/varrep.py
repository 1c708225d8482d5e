# varrep.py
"""Both sides of log E^G(exp Phi) = sup_eta E^G(Phi(B^eta) - H_T^G(eta))."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors.errors import ConfigError
from ..models.controls import ControlPolicy, DriftControl
from ..models.model import CylinderFunctional, TimeGrid, UncertaintySet
from ..schemas.report import ControlValue, DualityReport, InvariantCheck, PathwiseResidual
from .paths import h_functional, map_blocks, mean_and_se, stochastic_integral
from .pde import PdeGrid, ValueChain, extract_feedback, solve_chain, worst_case_policy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RhsEstimate:
    value: float
    se: float
    policy: str
    per_policy: Tuple[Tuple[str, float, float], ...]


def _require_bounded(functional: CylinderFunctional):
    if not functional.bounded:
        raise ConfigError(f"functional {functional.name} must be bounded for the variational representation")


def exp_chain(
    functional: CylinderFunctional, S: UncertaintySet, grid: TimeGrid, pde_grid: Optional[PdeGrid] = None
) -> ValueChain:
    _require_bounded(functional)
    pde_grid = pde_grid or PdeGrid.build(S, grid.horizon)
    return solve_chain(functional, S, grid, pde_grid, exponential=True, shift=functional.bound)


def variational_lhs(
    functional: CylinderFunctional, S: UncertaintySet, grid: TimeGrid, pde_grid: Optional[PdeGrid] = None
) -> float:
    """log E^G(exp Phi) from the exponential chain."""
    return exp_chain(functional, S, grid, pde_grid).origin_value()


def default_policy_family(
    functional: CylinderFunctional,
    S: UncertaintySet,
    grid: TimeGrid,
    pde_grid: Optional[PdeGrid] = None,
    chains: Sequence[ValueChain] = (),
) -> List[ControlPolicy]:
    """Constant extreme volatilities plus the scheme-flux argmax feedback of
    both the exponential and the linear chain."""
    pde_grid = pde_grid or PdeGrid.build(S, grid.horizon)
    family = ControlPolicy.extreme_family(S, grid.n_steps)
    chains = list(chains)
    if not any(chain.exponential for chain in chains):
        chains.append(exp_chain(functional, S, grid, pde_grid))
    if all(chain.exponential for chain in chains):
        chains.append(solve_chain(functional, S, grid, pde_grid))
    family.extend(worst_case_policy(chain) for chain in chains)
    return family


def variational_rhs(
    functional: CylinderFunctional,
    eta: DriftControl,
    S: UncertaintySet,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    policies: Optional[Sequence[ControlPolicy]] = None,
    pde_grid: Optional[PdeGrid] = None,
    workers: Optional[int] = None,
) -> RhsEstimate:
    """max over the policy family of the MC mean of Phi(B^eta) - H_T^G(eta).

    Every policy reuses the same seed, so the family is compared on common noise.
    """
    if policies is None:
        policies = default_policy_family(functional, S, grid, pde_grid)

    def block_values(bundle, shifted):
        return functional.evaluate_on(shifted.B, grid) - h_functional(eta, shifted)

    per_policy = []
    for policy in policies:
        values = np.concatenate(map_blocks(block_values, S, grid, policy, n_paths, seed, eta, workers))
        mean, se = mean_and_se(values)
        per_policy.append((policy.name, mean, se))
        logger.debug("rhs[%s | %s] = %.6g +- %.2g", eta.name, policy.name, mean, se)
    best = max(per_policy, key=lambda item: item[1])
    return RhsEstimate(best[1], best[2], best[0], tuple(per_policy))


def pathwise_identity(
    chain: ValueChain,
    policy: ControlPolicy,
    n_paths: int,
    seed: int,
    workers: Optional[int] = None,
) -> PathwiseResidual:
    """Phi(B^eta) - H_T^G(eta) - int eta dB - V_1(0, 0) per path at eta = grad log v.

    The continuous-time residual is -sum_l K^(l) <= 0; on the grid it carries
    O(sqrt(dt)) noise per path, so mean and upper quantiles are reported.
    """
    functional, S, grid = chain.functional, chain.uncertainty, chain.time_grid
    eta = extract_feedback(chain).as_drift()
    v0 = chain.origin_value()

    def block_residual(bundle, shifted):
        return (
            functional.evaluate_on(shifted.B, grid)
            - h_functional(eta, shifted)
            - stochastic_integral(eta, bundle, along=shifted)
            - v0
        )

    residual = np.concatenate(map_blocks(block_residual, S, grid, policy, n_paths, seed, eta, workers))
    mean, se = mean_and_se(residual)
    return PathwiseResidual(
        mean=mean, se=se, q95=float(np.quantile(residual, 0.95)), max=float(np.max(residual))
    )


def duality_report(
    functional: CylinderFunctional,
    S: UncertaintySet,
    grid: TimeGrid,
    control_samples: Sequence[DriftControl],
    seed: int,
    n_paths: int = 20000,
    pde_grid: Optional[PdeGrid] = None,
    scheme_tolerance: float = 0.01,
    mc_confidence: float = 3.0,
    duality_gap: float = 0.05,
    workers: Optional[int] = None,
) -> DualityReport:
    """lhs, the value at the constructed feedback and at sampled controls, with
    the weak and strong duality checks."""
    pde_grid = pde_grid or PdeGrid.build(S, grid.horizon)
    chain = exp_chain(functional, S, grid, pde_grid)
    lhs = chain.origin_value()
    feedback = extract_feedback(chain)
    eta_tilde = feedback.as_drift()
    policies = default_policy_family(functional, S, grid, pde_grid, chains=[chain])

    star = variational_rhs(functional, eta_tilde, S, grid, n_paths, seed, policies, workers=workers)
    samples = []
    for control in control_samples:
        estimate = variational_rhs(functional, control, S, grid, n_paths, seed, policies, workers=workers)
        samples.append(ControlValue(control=control.name, policy=estimate.policy, value=estimate.value, se=estimate.se))

    pathwise = pathwise_identity(chain, worst_case_policy(chain), n_paths, seed, workers)
    tol = scheme_tolerance * max(1.0, abs(lhs))
    gap = lhs - star.value

    checks = [
        InvariantCheck(
            name="weak_duality",
            passed=all(s.value <= lhs + mc_confidence * s.se + tol for s in samples),
            value=max((s.value - lhs - mc_confidence * s.se for s in samples), default=None),
            limit=tol,
            detail="max over sampled controls of rhs - lhs - confidence * se",
        ),
        InvariantCheck(
            name="rhs_star_upper",
            passed=star.value <= lhs + mc_confidence * star.se + tol,
            value=star.value - lhs,
            limit=mc_confidence * star.se + tol,
        ),
        InvariantCheck(
            name="rhs_star_dominates_samples",
            passed=all(star.value >= s.value - mc_confidence * max(s.se, star.se) - tol for s in samples),
            value=max((s.value - star.value for s in samples), default=None),
            limit=tol,
        ),
        InvariantCheck(
            name="duality_gap",
            passed=abs(gap) <= duality_gap * max(abs(lhs), 1e-12) + mc_confidence * star.se,
            value=abs(gap),
            limit=duality_gap * abs(lhs) + mc_confidence * star.se,
        ),
        InvariantCheck(
            name="pathwise_identity",
            passed=pathwise.mean <= tol + mc_confidence * pathwise.se,
            value=pathwise.mean,
            limit=tol + mc_confidence * pathwise.se,
            detail="mean of Phi(B^eta) - H - int eta dB - V_1(0,0) under the worst-case policy",
        ),
    ]
    for check in checks:
        if not check.passed:
            logger.warning("duality check %s failed: value %s, limit %s", check.name, check.value, check.limit)

    return DualityReport(
        lhs=lhs,
        rhs_star=star.value,
        rhs_star_policy=star.policy,
        rhs_star_se=star.se,
        rhs_samples=samples,
        gap=gap,
        scheme_tolerance=tol,
        mc_confidence=mc_confidence,
        feedback_bound=feedback.bound,
        pathwise=pathwise,
        checks=checks,
    )
