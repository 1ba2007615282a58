"""Dog-leg trust-region minimization of nonlinear least squares.

The step combines the damped Gauss-Newton solution with the steepest
descent direction: the Gauss-Newton step is returned unchanged whenever
it fits inside the trust radius, the scaled-gradient Cauchy point is
clipped to the radius when it already leaves the region, and otherwise
the two are interpolated out to the boundary. A generic driver iterates
the step with an adaptive radius and a pluggable retraction so the same
loop serves both Euclidean parameters and manifold-valued state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

# Relative damping of the normal equations; keeps them solvable without
# moving well-conditioned solutions at the tolerances anyone checks.
_DAMPING = 1e-8

# Radius this small means repeated rejections have stalled the search.
RHO_MIN = 1e-10


@dataclass(frozen=True)
class TrustRegionState:
    """Adaptive trust-region radius and its update policy."""

    rho: float = 0.1
    rho_max: float = 1.0
    eta_low: float = 0.25
    eta_high: float = 0.75
    shrink: float = 0.5
    grow: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.rho <= self.rho_max):
            raise ValueError(f"need 0 < rho <= rho_max, got {self.rho}, {self.rho_max}")


def trust_region_update(state, gain_ratio, at_boundary):
    """Apply the radius update rule; returns (new_state, step_accepted).

    A gain ratio below eta_low halves the radius and rejects the step; a
    ratio above eta_high grows the radius (capped) when the step pressed
    against the boundary. Steps are accepted exactly when the ratio is
    positive.
    """
    if not np.isfinite(gain_ratio):
        raise ValueError(f"gain ratio must be finite, got {gain_ratio}")
    rho = state.rho
    if gain_ratio < state.eta_low:
        rho = rho * state.shrink
    elif gain_ratio > state.eta_high and at_boundary:
        rho = min(state.grow * rho, state.rho_max)
    new_state = replace(state, rho=rho) if rho != state.rho else state
    return new_state, gain_ratio > 0.0


def gauss_newton_step(J, r):
    """Damped Gauss-Newton step -(J'J + lambda I)^-1 J'r.

    lambda = 1e-8 * trace(J'J) / dim. Raises numpy.linalg.LinAlgError when
    the damped system is still singular (e.g. an all-zero Jacobian).
    """
    J = np.asarray(J, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    dim = J.shape[1]
    JtJ = J.T @ J
    lam = _DAMPING * np.trace(JtJ) / dim
    step = np.linalg.solve(JtJ + lam * np.eye(dim), -(J.T @ r))
    if not np.isfinite(step).all():
        raise np.linalg.LinAlgError("non-finite Gauss-Newton solution")
    return step


class DoglegStep(NamedTuple):
    dx: np.ndarray
    kind: str  # "gn" | "cauchy-clipped" | "interpolated"


def dogleg_step(J, r, rho):
    """One dog-leg step for residuals r with Jacobian J and radius rho.

    The Gauss-Newton solution is returned as-is (same array) when its norm
    is within rho. Otherwise the Cauchy point h * sd with sd = -J'r and
    h = |sd|^2 / |J sd|^2 is clipped to the radius if it reaches it, and
    the segment from the Cauchy point to the Gauss-Newton point is
    intersected with the boundary if not. Singular normal equations fall
    back to clipped steepest descent.
    """
    if not rho > 0.0:
        raise ValueError(f"trust radius must be positive, got {rho}")
    J = np.asarray(J, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)

    sd = -(J.T @ r)
    try:
        gn = gauss_newton_step(J, r)
    except np.linalg.LinAlgError:
        gn = None

    if gn is not None and np.linalg.norm(gn) <= rho:
        return DoglegStep(gn, "gn")

    sd_sq = float(sd @ sd)
    if sd_sq == 0.0:
        # Flat gradient and no usable Gauss-Newton step: nothing to do.
        return DoglegStep(np.zeros_like(sd), "cauchy-clipped")
    Jsd = J @ sd
    Jsd_sq = float(Jsd @ Jsd)
    if Jsd_sq == 0.0:
        # Gradient lies in the Jacobian's null space; walk it to the rim.
        return DoglegStep(sd * (rho / np.sqrt(sd_sq)), "cauchy-clipped")

    h = sd_sq / Jsd_sq
    cauchy = h * sd
    cauchy_norm = np.linalg.norm(cauchy)
    if gn is None or cauchy_norm >= rho:
        return DoglegStep(cauchy * (rho / cauchy_norm), "cauchy-clipped")

    # Between the Cauchy point and the Gauss-Newton point: pick the point
    # on that segment lying on the trust-region boundary.
    d = gn - cauchy
    d_sq = float(d @ d)
    ad = float(cauchy @ d)
    disc = ad * ad + d_sq * (rho * rho - cauchy_norm * cauchy_norm)
    s = (-ad + np.sqrt(max(disc, 0.0))) / d_sq
    return DoglegStep(cauchy + s * d, "interpolated")


@dataclass
class OptimizeResult:
    """Outcome of :func:`minimize_dogleg`."""

    x: object
    cost: float
    iterations: int
    converged: bool
    status: str
    initial_gradient_norm: float


def minimize_dogleg(
    residual_fn: Callable,
    jacobian_fn: Callable,
    x0,
    *,
    retract: Callable | None = None,
    state: TrustRegionState | None = None,
    max_iters: int = 50,
    step_tol: float = 1e-8,
    cost_tol: float = 1e-10,
    rho_min: float = RHO_MIN,
):
    """Minimize |residual_fn(x)|^2 with dog-leg trust-region iterations.

    retract(x, dx) applies a step; the default is vector addition, and
    manifold parameterizations supply their own. Stops when the proposed
    step norm falls under step_tol, an accepted step reduces the cost by
    less than cost_tol, the radius stalls below rho_min, or max_iters
    proposals have been made.
    """
    if retract is None:
        retract = lambda x, dx: np.asarray(x, dtype=np.float64) + dx
    if state is None:
        state = TrustRegionState()

    x = x0
    r = np.asarray(residual_fn(x), dtype=np.float64)
    cost = float(r @ r)
    J = None
    first_grad = None
    status = "max_iters"
    converged = False
    iterations = 0

    for iterations in range(1, max_iters + 1):
        if J is None:
            J = np.asarray(jacobian_fn(x), dtype=np.float64)
            if first_grad is None:
                first_grad = float(np.linalg.norm(J.T @ r))
                if first_grad == 0.0:
                    status = "flat_gradient"
                    converged = True
                    iterations = 0
                    break

        dx, _kind = dogleg_step(J, r, state.rho)
        step_norm = float(np.linalg.norm(dx))
        if step_norm < step_tol:
            status = "step_tol"
            converged = True
            break

        predicted = cost - float(np.linalg.norm(r + J @ dx) ** 2)
        x_new = retract(x, dx)
        r_new = np.asarray(residual_fn(x_new), dtype=np.float64)
        cost_new = float(r_new @ r_new)
        actual = cost - cost_new
        ratio = actual / predicted if predicted > 0.0 else -1.0

        at_boundary = step_norm >= state.rho * (1.0 - 1e-9)
        state, accepted = trust_region_update(state, ratio, at_boundary)

        if accepted:
            x, r, cost = x_new, r_new, cost_new
            J = None
            if actual < cost_tol:
                status = "cost_tol"
                converged = True
                break
        if state.rho < rho_min:
            status = "rho_min"
            converged = True
            break

    return OptimizeResult(
        x=x,
        cost=cost,
        iterations=iterations,
        converged=converged,
        status=status,
        initial_gradient_norm=first_grad if first_grad is not None else 0.0,
    )
