"""Model-based ground truth: value iteration, Hewer policy iteration,
regulator equations and LQ cost evaluation.

The matrix-level functions take ``(A, B, Q, R)`` directly; the ``*_aug``
helpers feed them ``A_und``, ``B_bar`` and the state weight
``C_bar^T Q C_bar`` of an :class:`~oftrack.lti_core.AugmentedSystem`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg_kit as la
from .errors import ConvergenceError, NotSchurError, OftrackError, StabilizabilityError
from .lti_core import AugmentedSystem, Exosystem, Weights

MONOTONE_SLACK = 1e-9


@dataclass(frozen=True)
class PolicyIterate:
    j: int
    K: np.ndarray
    P: np.ndarray


@dataclass
class HewerResult:
    iterates: list[PolicyIterate]
    K_star: np.ndarray
    P_star: np.ndarray
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.iterates)


@dataclass
class RegulatorSolution:
    X: np.ndarray
    sylvester_residual: float
    output_residual: float


def _gain(A, B, R, P):
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def value_iteration_gain(A, B, Q, R, max_iter: int = 10000, margin: float = 0.0) -> np.ndarray:
    """First value-iteration gain (from ``P = 0``) whose closed loop is Schur.

    ``margin`` tightens the target to ``rho(A - B K) < 1 - margin``.

    Raises:
        StabilizabilityError: when ``max_iter`` sweeps never stabilize.
    """
    A, B, Q, R = (la.as_matrix(M) for M in (A, B, Q, R))
    P = np.zeros_like(A)
    for _ in range(max_iter):
        K = _gain(A, B, R, P)
        if la.spectral_radius(A - B @ K) < 1.0 - margin:
            return K
        AtPB = A.T @ P @ B
        P = Q + A.T @ P @ A - AtPB @ np.linalg.solve(R + B.T @ P @ B, AtPB.T)
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)):
            break
    raise StabilizabilityError(f"value iteration found no stabilizing gain in {max_iter} sweeps "
                               "(is the pair stabilizable?)")


def hewer_iterate(A, B, Q, R, K0, max_j: int = 100, tol: float = 1e-10) -> HewerResult:
    """Policy iteration: Stein solve for ``P^j`` under ``K^j``, then greedy update.

    ``P^j`` is paired with ``K^j`` (the cost of running ``K^j``). Iteration
    stops when ``||K^(j+1) - K^j||_F <= tol``; the final iterate holds the
    kernel of the returned gain.

    Raises:
        NotSchurError: when some ``A - B K^j`` is not Schur (reports ``j``).
    """
    A, B, Q, R = (la.as_matrix(M) for M in (A, B, Q, R))
    K = np.atleast_2d(np.asarray(K0, dtype=float))
    iterates = []
    converged = False
    for j in range(max_j + 1):
        try:
            P = la.solve_stein(A - B @ K, Q + K.T @ R @ K)
        except NotSchurError as exc:
            raise NotSchurError(f"Hewer iterate j={j}: {exc}") from exc
        iterates.append(PolicyIterate(j=j, K=K, P=P))
        if converged:
            break
        K_next = _gain(A, B, R, P)
        converged = np.linalg.norm(K_next - K) <= tol
        K = K_next
    return HewerResult(iterates=iterates, K_star=iterates[-1].K, P_star=iterates[-1].P, converged=converged)


def dare_residual(A, B, Q, R, P) -> float:
    """Frobenius residual of ``A^T P A - P - A^T P B (R + B^T P B)^-1 B^T P A + Q``."""
    A, B, Q, R, P = (la.as_matrix(M) for M in (A, B, Q, R, P))
    AtPB = A.T @ P @ B
    res = A.T @ P @ A - P - AtPB @ np.linalg.solve(R + B.T @ P @ B, AtPB.T) + Q
    return float(np.linalg.norm(res))


def monotone_violation(result: HewerResult) -> float:
    """Most negative eigenvalue of ``P^j - P^(j+1)`` over the run (0 if none)."""
    worst = 0.0
    for a, b in zip(result.iterates, result.iterates[1:]):
        worst = min(worst, la.min_eig_sym(a.P - b.P))
    return worst


def lq_cost(A, B, Q, R, K, e0, max_horizon: int = 1_000_000, rel_tail: float = 1e-10) -> float:
    """Sum of ``e^T (Q + K^T R K) e`` along ``e+ = (A - B K) e`` from ``e0``.

    The sum is truncated once the remaining tail, bounded through a Stein
    solution on the closed loop, falls below ``rel_tail`` of the running sum.
    """
    A, B, Q, R = (la.as_matrix(M) for M in (A, B, Q, R))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Acl = A - B @ K
    if la.spectral_radius(Acl) >= 1.0:
        raise NotSchurError(f"closed loop not Schur (spectral radius {la.spectral_radius(Acl):.6g})")
    W = Q + K.T @ R @ K
    # sum_{i>=k} |e_i|^2 = e_k^T P_bound e_k
    P_bound = la.solve_stein(Acl, np.eye(A.shape[0]))
    wmax = max(float(np.linalg.eigvalsh(0.5 * (W + W.T))[-1]), 0.0)
    e = np.asarray(e0, dtype=float).ravel()
    total = 0.0
    for _ in range(max_horizon):
        tail = wmax * float(e @ P_bound @ e)
        if tail <= rel_tail * total or tail == 0.0:
            return total
        total += float(e @ W @ e)
        e = Acl @ e
    raise ConvergenceError(f"cost sum did not settle in {max_horizon} steps")


def solve_regulator_equations(Abar, barG, barC, exo: Exosystem, tol: float = 1e-8) -> RegulatorSolution:
    """Joint least-squares solve of ``Abar X + G_bar R = X S`` and ``C_bar X = R``.

    Residuals are measured relative to ``max(1, ||X||)``.

    Raises:
        OftrackError: when either residual exceeds ``tol``.
    """
    Abar, barG, barC = (la.as_matrix(M) for M in (Abar, barG, barC))
    S, R = exo.S, exo.R
    n, q = Abar.shape[0], S.shape[0]
    sylv = np.kron(np.eye(q), Abar) - np.kron(S.T, np.eye(n))
    outp = np.kron(np.eye(q), barC)
    lhs = np.vstack([sylv, outp])
    rhs = np.concatenate([-la.vec(barG @ R), la.vec(R)])
    X = la.unvec(np.linalg.lstsq(lhs, rhs, rcond=None)[0], n, q)
    scale = max(1.0, float(np.linalg.norm(X)))
    r1 = float(np.linalg.norm(Abar @ X + barG @ R - X @ S)) / scale
    r2 = float(np.linalg.norm(barC @ X - R)) / scale
    if max(r1, r2) > tol:
        raise OftrackError(f"regulator equations have no common solution (residuals {r1:.3g}, {r2:.3g})")
    return RegulatorSolution(X=X, sylvester_residual=r1, output_residual=r2)


def initial_stabilizing_gain(aug: AugmentedSystem, weights: Weights, margin: float = 0.0) -> np.ndarray:
    return value_iteration_gain(aug.underA, aug.barB, aug.state_weight(weights), weights.Rbar, margin=margin)


def hewer_aug(aug: AugmentedSystem, weights: Weights, K0=None, max_j: int = 100, tol: float = 1e-10) -> HewerResult:
    if K0 is None:
        K0 = initial_stabilizing_gain(aug, weights)
    return hewer_iterate(aug.underA, aug.barB, aug.state_weight(weights), weights.Rbar, K0, max_j=max_j, tol=tol)


def evaluate_cost(aug: AugmentedSystem, weights: Weights, K, e0) -> float:
    return lq_cost(aug.underA, aug.barB, aug.state_weight(weights), weights.Rbar, K, e0)


@dataclass
class OracleSolution:
    """Bundle of model-based quantities reported by the CLI and used in tests."""

    K0: np.ndarray
    hewer: HewerResult
    dare_residual: float
    regulator: RegulatorSolution
    extras: dict = field(default_factory=dict)

    @property
    def K_star(self) -> np.ndarray:
        return self.hewer.K_star

    @property
    def P_star(self) -> np.ndarray:
        return self.hewer.P_star


def solve_oracle(aug: AugmentedSystem, weights: Weights, exo: Exosystem, K0=None) -> OracleSolution:
    if K0 is None:
        K0 = initial_stabilizing_gain(aug, weights)
    res = hewer_aug(aug, weights, K0)
    if not res.converged:
        raise ConvergenceError(f"Hewer iteration did not converge in {res.iterations} iterates")
    Qs = aug.state_weight(weights)
    dres = dare_residual(aug.underA, aug.barB, Qs, weights.Rbar, res.P_star)
    reg = solve_regulator_equations(aug.closed_loop(res.K_star), aug.barG, aug.barC, exo)
    return OracleSolution(K0=np.atleast_2d(K0), hewer=res, dare_residual=dres, regulator=reg)
