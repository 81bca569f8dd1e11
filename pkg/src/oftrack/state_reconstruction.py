"""Input/output filter banks and the parameterization matrix M_bar.

Each filter is the companion pair ``(A_zeta, b)`` of a monic Schur polynomial
``d(z) = z^n + d_1 z^(n-1) + ... + d_n``, so filter state ``p`` (0-based)
carries ``z^p / d(z)`` applied to its input channel. Stacking input, output
and reference filters gives ``zeta_bar``; when an observer
``A_und - L C_bar`` has characteristic polynomial ``d`` the augmented state
satisfies ``r(k) = M_bar zeta_bar(k) + (A_und - L C_bar)^k r(0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg_kit as la
from .errors import PlacementError
from .lti_core import AugmentedSystem

CAYLEY_HAMILTON_TOL = 1e-8


@dataclass(frozen=True)
class FilterSpec:
    """Monic filter polynomial given by ``d = [d_1, ..., d_n]``."""

    d: np.ndarray

    def __post_init__(self):
        d = np.array(self.d, dtype=float).ravel()
        if d.size < 1:
            raise ValueError("filter order must be >= 1")
        object.__setattr__(self, "d", d)
        rho = float(np.max(np.abs(self.roots))) if d.any() else 0.0
        if rho >= 1.0:
            raise ValueError(f"filter polynomial is not Schur (root radius {rho:.6g})")

    @classmethod
    def deadbeat(cls, n: int) -> "FilterSpec":
        return cls(np.zeros(n))

    @classmethod
    def from_radius(cls, n: int, radius: float) -> "FilterSpec":
        """``d(z) = z^n + radius^n``: n distinct roots evenly spread on ``|z| = radius``.

        ``radius = 0`` gives the deadbeat filter.
        """
        if not 0.0 <= radius < 1.0:
            raise ValueError(f"radius must lie in [0, 1), got {radius}")
        d = np.zeros(n)
        d[-1] = radius**n
        return cls(d)

    @property
    def n(self) -> int:
        return self.d.size

    @property
    def poly(self) -> np.ndarray:
        return np.concatenate([[1.0], self.d])

    @property
    def roots(self) -> np.ndarray:
        return np.roots(self.poly)

    @property
    def A_zeta(self) -> np.ndarray:
        return la.companion(self.poly)

    @property
    def b(self) -> np.ndarray:
        e = np.zeros(self.n)
        e[-1] = 1.0
        return e


class FilterBank:
    """Zero-initialized filters for the logged input, the output and the reference channel.

    ``zeta`` is ``[zeta_u; zeta_y; zeta_theta]`` with channel-major blocks of
    length ``n`` (the layout of ``u kron b``).
    """

    def __init__(self, spec: FilterSpec, r_m: int, r_p: int):
        self.spec = spec
        self.r_m = r_m
        self.r_p = r_p
        self.k = 0
        self._A_t = spec.A_zeta.T
        self._state = np.zeros((r_m + 2 * r_p, spec.n))

    @property
    def dim(self) -> int:
        return self._state.size

    @property
    def zeta(self) -> np.ndarray:
        return self._state.ravel().copy()

    @property
    def zeta_u(self) -> np.ndarray:
        return self._state[: self.r_m].ravel().copy()

    @property
    def zeta_y(self) -> np.ndarray:
        return self._state[self.r_m: self.r_m + self.r_p].ravel().copy()

    @property
    def zeta_theta(self) -> np.ndarray:
        return self._state[self.r_m + self.r_p:].ravel().copy()

    def step(self, u, y, theta) -> "FilterBank":
        u = np.asarray(u, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        theta = np.asarray(theta, dtype=float).ravel()
        if u.size != self.r_m or y.size != self.r_p or theta.size != self.r_p:
            raise ValueError(f"expected input sizes ({self.r_m}, {self.r_p}, {self.r_p}), "
                             f"got ({u.size}, {y.size}, {theta.size})")
        drive = np.concatenate([u, y, theta])
        self._state = self._state @ self._A_t
        self._state[:, -1] += drive
        self.k += 1
        return self

    def copy(self) -> "FilterBank":
        other = FilterBank(self.spec, self.r_m, self.r_p)
        other._state = self._state.copy()
        other.k = self.k
        return other


@dataclass(frozen=True)
class Parameterization:
    Mbar: np.ndarray
    L_obs: np.ndarray
    resolvent_coeffs: tuple


def cayley_hamilton_residual(A_o: np.ndarray, spec: FilterSpec) -> float:
    """``||d(A_o)|| / max(1, ||A_o||^n)``; zero iff ``d`` annihilates ``A_o``."""
    val = la.poly_of_matrix(spec.poly, A_o)
    return float(np.linalg.norm(val)) / max(1.0, np.linalg.norm(A_o, 2) ** spec.n)


def _poly_residual_ext(poly: np.ndarray, A: np.ndarray, L: np.ndarray, C: np.ndarray) -> np.ndarray:
    """``d(A - L C)`` by Horner's rule in extended precision, rounded to double."""
    ld = np.longdouble
    A_o = A.astype(ld) - L.astype(ld) @ C.astype(ld)
    n = A.shape[0]
    out = np.zeros((n, n), dtype=ld)
    for c in poly:
        out = out @ A_o + ld(c) * np.eye(n, dtype=ld)
    return out.astype(float)


def polish_gain(A: np.ndarray, C: np.ndarray, L: np.ndarray, poly: np.ndarray, steps: int = 3) -> np.ndarray:
    """Newton steps on ``d(A - L C) = 0`` with the residual formed in extended precision.

    The Jacobian of ``L -> vec d(A - L C)`` is
    ``-sum_k c_k sum_i (X^(k-1-i)^T kron X^i) (C^T kron I)`` at ``X = A - L C``;
    steps are least-squares solves against it. The iterate with the
    smallest residual is returned.
    """
    n = A.shape[0]
    deg = len(poly) - 1
    best, best_res = L, np.linalg.norm(_poly_residual_ext(poly, A, L, C))
    for _ in range(steps):
        X = A - L @ C
        powers = [np.eye(n)]
        for _ in range(deg):
            powers.append(powers[-1] @ X)
        G = np.zeros((n * n, n * n))
        for j, c in enumerate(poly[:-1]):
            k = deg - j
            for i in range(k):
                G += c * np.kron(powers[k - 1 - i].T, powers[i])
        J = -G @ np.kron(C.T, np.eye(n))
        E = _poly_residual_ext(poly, A, L, C)
        L = L + la.unvec(np.linalg.lstsq(J, -la.vec(E), rcond=None)[0], n, C.shape[0])
        res = np.linalg.norm(_poly_residual_ext(poly, A, L, C))
        if res < best_res:
            best, best_res = L, res
    return best


def observer_gain(aug: AugmentedSystem, spec: FilterSpec, rng_seed, retries: int = 10,
                  cond_limit: float = 1e12, polish: int = 3) -> np.ndarray:
    """Gain ``L`` giving ``A_und - L C_bar`` the characteristic polynomial of the filters.

    Sylvester placement on the dual pair: with the target ``Lam = A_zeta^T``
    and a random ``Gr``, solve ``A_und^T X - X Lam = C_bar^T Gr``; then
    ``(A_und^T - C_bar^T Gr X^-1) X = X Lam`` and ``L = (Gr X^-1)^T``.
    Draws ``Gr`` again when ``X`` is badly conditioned.

    The reconstruction ``r = M_bar zeta`` is only as exact as
    ``d(A_und - L C_bar) = 0``. The Sylvester gain can miss that by 1e-10
    on deadbeat targets, so ``polish`` Newton steps (:func:`polish_gain`)
    bring it to round-off.

    Raises:
        PlacementError: unobservable pair, or no acceptable draw in ``retries``.
    """
    n = aug.n_z
    if spec.n != n:
        raise ValueError(f"filter order {spec.n} must equal n_z={n}")
    if la.svd_rank(la.observability_matrix(aug.underA, aug.barC)) < n:
        raise PlacementError("(A_und, C_bar) is not observable; eigenvalues cannot be assigned")
    rng = np.random.default_rng(rng_seed)
    Lam = spec.A_zeta.T
    best = np.inf
    for _ in range(retries):
        Gr = rng.standard_normal((aug.r_p, n))
        try:
            X = la.solve_sylvester(aug.underA.T, -Lam, aug.barC.T @ Gr)
        except np.linalg.LinAlgError as exc:
            raise PlacementError(f"A_und shares an eigenvalue with the filter polynomial: {exc}") from exc
        cond = np.linalg.cond(X)
        best = min(best, cond)
        if not np.isfinite(cond) or cond > cond_limit:
            continue
        L = np.linalg.solve(X.T, Gr.T)
        if polish:
            L = polish_gain(aug.underA, aug.barC, L, spec.poly, polish)
        if cayley_hamilton_residual(aug.underA - L @ aug.barC, spec) <= CAYLEY_HAMILTON_TOL:
            return L
    raise PlacementError(f"eigenvalue placement failed after {retries} draws (best cond(X) = {best:.3g})")


def resolvent_coefficients(A_o: np.ndarray, spec: FilterSpec) -> list[np.ndarray]:
    """``B_0 = I``, ``B_(i+1) = B_i A_o + d_(i+1) I`` so that
    ``adj(zI - A_o) = sum_i B_i z^(n-1-i)`` when ``det(zI - A_o) = d(z)``."""
    n = A_o.shape[0]
    coeffs = [np.eye(n)]
    for i in range(n - 1):
        coeffs.append(coeffs[-1] @ A_o + spec.d[i] * np.eye(n))
    return coeffs


def _blocks(coeffs: list[np.ndarray], cols: np.ndarray) -> np.ndarray:
    n = len(coeffs)
    out = []
    for j in range(cols.shape[1]):
        c = cols[:, j]
        # filter state p carries z^p/d(z), which pairs with B_(n-1-p)
        out.append(np.column_stack([coeffs[n - 1 - p] @ c for p in range(n)]))
    if not out:
        return np.zeros((coeffs[0].shape[0], 0))
    return np.hstack(out)


def parameterization_matrix(aug: AugmentedSystem, spec: FilterSpec, L_obs: np.ndarray) -> Parameterization:
    L_obs = la.as_matrix(L_obs, "L_obs")
    A_o = aug.underA - L_obs @ aug.barC
    coeffs = resolvent_coefficients(A_o, spec)
    Mbar = np.hstack([_blocks(coeffs, aug.barB), _blocks(coeffs, L_obs), _blocks(coeffs, aug.barG)])
    return Parameterization(Mbar=Mbar, L_obs=L_obs, resolvent_coeffs=tuple(coeffs))


def lemma4_rank_check(aug: AugmentedSystem, L_obs: np.ndarray, Mbar: np.ndarray) -> tuple[int, int, bool]:
    """Compare ``rank(M_bar)`` with the rank of the stacked controllability matrices."""
    L_obs = la.as_matrix(L_obs, "L_obs")
    stacked = np.hstack([
        la.controllability_matrix(aug.underA, aug.barB),
        la.controllability_matrix(aug.underA, L_obs),
        la.controllability_matrix(aug.underA, aug.barG),
    ])
    rank_m = la.svd_rank(Mbar)
    rank_c = la.svd_rank(stacked)
    return rank_m, rank_c, rank_m == rank_c


def faddeev_identity_residual(A_o: np.ndarray, spec: FilterSpec) -> float:
    """Coefficient mismatch of ``(sum_i B_i z^(n-1-i)) (zI - A_o)`` against ``d(z) I``."""
    coeffs = resolvent_coefficients(A_o, spec)
    n = A_o.shape[0]
    I = np.eye(n)
    # coefficient of z^(n-i) for i = 0..n
    worst = float(np.linalg.norm(coeffs[0] - I))
    for i in range(1, n):
        worst = max(worst, float(np.linalg.norm(coeffs[i] - coeffs[i - 1] @ A_o - spec.d[i - 1] * I)))
    worst = max(worst, float(np.linalg.norm(-coeffs[n - 1] @ A_o - spec.d[n - 1] * I)))
    return worst / max(1.0, np.linalg.norm(A_o, 2) ** n)
