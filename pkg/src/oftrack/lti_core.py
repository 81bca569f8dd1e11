"""Plant/exosystem data model, internal model synthesis and the augmented system.

The augmented state is ``r = [x; z]`` where ``z`` is the internal-model state
driven by ``-G y + G theta``. With the logged input ``ubar`` (the plant sees
``ubar - T z``) the composite dynamics are::

    r(k+1) = A_und r(k) + B_bar ubar(k) + G_bar theta(k),   y(k) = C_bar r(k)

    A_und = [[A, -B T], [-G C, F]],  B_bar = [B; 0],  C_bar = [C, 0],  G_bar = [0; G]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import linalg_kit as la
from .errors import ConfigError, OftrackError

PD_TOL = 1e-12
UNIT_CIRCLE_SLACK = 1e-9
ANNIHILATION_TOL = 1e-9


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Plant:
    """The (unknown to the learner) plant ``x+ = A x + B u``, ``y = C x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = la.as_matrix(self.A, "A")
        B = la.as_matrix(self.B, "B")
        C = la.as_matrix(self.C, "C")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ConfigError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ConfigError(f"B must have {n} rows, got {B.shape}")
        if C.ndim == 2 and C.shape[1] != n:
            if C.shape == (n, 1):
                C = C.T
            else:
                raise ConfigError(f"C must have {n} columns, got {C.shape}")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "B", _frozen(B))
        object.__setattr__(self, "C", _frozen(C))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class Exosystem:
    """Reference generator ``xd+ = S xd``, ``yd = R xd``.

    ``minimal_poly`` holds the monic coefficients, highest degree first,
    e.g. ``[1, -1]`` for a constant reference.
    """

    S: np.ndarray
    R: np.ndarray
    minimal_poly: np.ndarray

    def __post_init__(self):
        S = la.as_matrix(self.S, "S")
        R = la.as_matrix(self.R, "R")
        q = S.shape[0]
        if S.shape != (q, q):
            raise ConfigError(f"S must be square, got {S.shape}")
        if R.shape[1] != q:
            if R.shape == (q, 1):
                R = R.T
            else:
                raise ConfigError(f"R must have {q} columns, got {R.shape}")
        poly = np.array(self.minimal_poly, dtype=float).ravel()
        if poly.size < 2:
            raise ConfigError("minimal_poly must have degree >= 1")
        if poly[0] != 1.0:
            raise ConfigError(f"minimal_poly must be monic, leading coefficient is {poly[0]}")
        object.__setattr__(self, "S", _frozen(S))
        object.__setattr__(self, "R", _frozen(R))
        object.__setattr__(self, "minimal_poly", _frozen(poly))

    @property
    def q(self) -> int:
        return self.S.shape[0]

    @property
    def degree(self) -> int:
        return self.minimal_poly.size - 1


@dataclass(frozen=True)
class Weights:
    Q: np.ndarray
    Rbar: np.ndarray

    def __post_init__(self):
        Q = la.as_matrix(self.Q, "Q")
        Rbar = la.as_matrix(self.Rbar, "Rbar")
        for name, M in (("Q", Q), ("Rbar", Rbar)):
            if M.shape[0] != M.shape[1]:
                raise ConfigError(f"{name} must be square, got {M.shape}")
            if not np.allclose(M, M.T, atol=1e-12):
                raise ConfigError(f"{name} must be symmetric")
            if la.min_eig_sym(M) <= PD_TOL:
                raise ConfigError(f"{name} must be positive definite (min eigenvalue {la.min_eig_sym(M):.3g})")
        object.__setattr__(self, "Q", _frozen(Q))
        object.__setattr__(self, "Rbar", _frozen(Rbar))


@dataclass(frozen=True)
class InternalModel:
    """``r_p``-copy internal model: block-diagonal companion realization."""

    F: np.ndarray
    G: np.ndarray
    r_p: int
    degree: int


@dataclass(frozen=True)
class AugmentedSystem:
    underA: np.ndarray
    barB: np.ndarray
    barC: np.ndarray
    barG: np.ndarray
    T: np.ndarray

    @property
    def n_z(self) -> int:
        return self.underA.shape[0]

    @property
    def r_m(self) -> int:
        return self.barB.shape[1]

    @property
    def r_p(self) -> int:
        return self.barC.shape[0]

    def closed_loop(self, K: np.ndarray) -> np.ndarray:
        return self.underA - self.barB @ np.atleast_2d(K)

    def state_weight(self, weights: Weights) -> np.ndarray:
        """``C_bar^T Q C_bar``, the state weight equivalent to ``y^T Q y``."""
        return self.barC.T @ weights.Q @ self.barC


@dataclass
class AssumptionReport:
    flags: dict[str, bool] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(self.flags.values())

    def as_dict(self) -> dict:
        return {"flags": dict(self.flags), "diagnostics": list(self.diagnostics), "all_passed": self.all_passed}


def _relative_annihilation(poly, S: np.ndarray) -> float:
    val = la.poly_of_matrix(poly, S)
    scale = max(1.0, float(np.max(np.abs(poly))) * max(1.0, np.linalg.norm(S, 2)) ** (len(poly) - 1))
    return float(np.linalg.norm(val)) / scale


def check_assumptions(plant: Plant, exo: Exosystem) -> AssumptionReport:
    """Evaluate the four standing assumptions on plant and reference model.

    Flags: ``ctrb_obsv`` (controllable and observable plant),
    ``exo_unstable`` (all eigenvalues of S on/outside the unit circle),
    ``minimal_poly`` (the supplied polynomial annihilates S) and
    ``no_zero_at_exo_modes`` (the Rosenbrock rank condition at each
    eigenvalue of S).
    """
    if exo.R.shape[0] != plant.p:
        raise ConfigError(f"R has {exo.R.shape[0]} rows but the plant has {plant.p} outputs")
    rep = AssumptionReport()
    n, p = plant.n, plant.p

    rc = la.svd_rank(la.controllability_matrix(plant.A, plant.B))
    ro = la.svd_rank(la.observability_matrix(plant.A, plant.C))
    rep.flags["ctrb_obsv"] = rc == n and ro == n
    if rc != n:
        rep.diagnostics.append(f"(A, B) not controllable: rank {rc} < {n}")
    if ro != n:
        rep.diagnostics.append(f"(A, C) not observable: rank {ro} < {n}")

    eigS = la.eigenvalues(exo.S)
    inside = [lam for lam in eigS if abs(lam) < 1.0 - UNIT_CIRCLE_SLACK]
    rep.flags["exo_unstable"] = not inside
    for lam in inside:
        rep.diagnostics.append(f"eigenvalue {complex(lam):.6g} of S lies inside the unit circle (|.|={abs(lam):.6g})")

    resid = _relative_annihilation(exo.minimal_poly, exo.S)
    rep.flags["minimal_poly"] = resid <= ANNIHILATION_TOL
    if resid > ANNIHILATION_TOL:
        rep.diagnostics.append(f"minimal_poly does not annihilate S (relative residual {resid:.3g})")

    ok4 = True
    for lam in eigS:
        rose = np.block([
            [plant.A - lam * np.eye(n), plant.B.astype(complex)],
            [plant.C.astype(complex), np.zeros((p, plant.m), dtype=complex)],
        ])
        rk = la.complex_rank(rose)
        if rk != n + p:
            ok4 = False
            rep.diagnostics.append(
                f"rank [[A - lam I, B], [C, 0]] = {rk} < {n + p} at lam = {complex(lam):.6g}")
    rep.flags["no_zero_at_exo_modes"] = ok4
    return rep


def build_internal_model(exo: Exosystem, r_p: int) -> InternalModel:
    poly = np.asarray(exo.minimal_poly, dtype=float)
    if poly[0] != 1.0:
        raise ConfigError("minimal polynomial must be monic")
    if r_p < 1:
        raise ConfigError("r_p must be >= 1")
    block = la.companion(poly)
    d = block.shape[0]
    g = np.zeros((d, 1))
    g[-1, 0] = 1.0
    F = np.kron(np.eye(r_p), block)
    G = np.kron(np.eye(r_p), g)
    return InternalModel(F=_frozen(F), G=_frozen(G), r_p=r_p, degree=d)


def is_observable(A: np.ndarray, C: np.ndarray) -> bool:
    return la.svd_rank(la.observability_matrix(A, C)) == np.asarray(A).shape[0]


def choose_feedforward_T(model: InternalModel, r_m: int, rng_seed, retries: int = 10) -> np.ndarray:
    """Draw ``T`` uniformly on [-1, 1] until ``(F, T)`` is observable."""
    if model.r_p < r_m:
        raise ConfigError(f"need r_p >= r_m, got r_p={model.r_p}, r_m={r_m}")
    rng = np.random.default_rng(rng_seed)
    for _ in range(retries):
        T = rng.uniform(-1.0, 1.0, size=(r_m, model.F.shape[0]))
        if is_observable(model.F, T):
            return _frozen(T)
    raise OftrackError(f"(F, T) not observable after {retries} draws (seed {rng_seed})")


def build_augmented(plant: Plant, model: InternalModel, T) -> AugmentedSystem:
    T = la.as_matrix(T, "T")
    nzm = model.F.shape[0]
    if T.shape != (plant.m, nzm):
        if T.shape == (nzm, plant.m) and plant.m == 1:
            T = T.T
        else:
            raise ConfigError(f"T must be {plant.m}x{nzm}, got {T.shape}")
    if model.G.shape[1] != plant.p:
        raise ConfigError(f"internal model has {model.G.shape[1]} copies, plant has {plant.p} outputs")
    underA = np.block([[plant.A, -plant.B @ T], [-model.G @ plant.C, model.F]])
    barB = np.vstack([plant.B, np.zeros((nzm, plant.m))])
    barC = np.hstack([plant.C, np.zeros((plant.p, nzm))])
    barG = np.vstack([np.zeros((plant.n, plant.p)), model.G])
    return AugmentedSystem(underA=_frozen(underA), barB=_frozen(barB), barC=_frozen(barC),
                           barG=_frozen(barG), T=_frozen(T))


def augmented_report(aug: AugmentedSystem, exo: Exosystem | None = None) -> AssumptionReport:
    """PBH stabilizability of (A_und, B_bar) and detectability of (A_und, C_bar).

    Tests run at every eigenvalue of ``A_und`` on or outside the unit circle,
    plus the eigenvalues of ``S`` when an exosystem is given. Full
    controllability/observability ranks are reported alongside.
    """
    rep = AssumptionReport()
    n = aug.n_z
    lams = [lam for lam in la.eigenvalues(aug.underA) if abs(lam) >= 1.0 - UNIT_CIRCLE_SLACK]
    if exo is not None:
        lams.extend(la.eigenvalues(exo.S))
    stab = detect = True
    for lam in lams:
        rb = la.pbh_rank_test(aug.underA, aug.barB, lam)
        if rb < n:
            stab = False
            rep.diagnostics.append(f"(A_und, B_bar) loses rank at lam = {complex(lam):.6g}: {rb} < {n}")
        rc = la.pbh_rank_test(aug.underA.T, aug.barC.T, lam)
        if rc < n:
            detect = False
            rep.diagnostics.append(f"(A_und, C_bar) loses rank at lam = {complex(lam):.6g}: {rc} < {n}")
    rep.flags["stabilizable"] = stab
    rep.flags["detectable"] = detect
    rep.flags["controllable"] = la.svd_rank(la.controllability_matrix(aug.underA, aug.barB)) == n
    rep.flags["observable"] = la.svd_rank(la.observability_matrix(aug.underA, aug.barC)) == n
    return rep


@dataclass
class Trajectory:
    k: np.ndarray
    x: np.ndarray
    y: np.ndarray
    xd: np.ndarray
    yd: np.ndarray
    ye: np.ndarray
    u: np.ndarray
    truncated: bool = False
    diagnostic: str = ""


def simulate(plant: Plant, exo: Exosystem, input_provider: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
             x0, xd0, horizon: int, blowup: float = 1e8) -> Trajectory:
    """Open recursion of plant and exosystem over ``horizon`` steps.

    ``input_provider(k, y, yd)`` returns ``u(k)``; it may keep its own state.
    Rows ``0..horizon-1`` are recorded. A non-finite or exploding state
    stops the run early with ``truncated=True``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x = np.asarray(x0, dtype=float).ravel().copy()
    xd = np.asarray(xd0, dtype=float).ravel().copy()
    rec = {key: [] for key in ("x", "y", "xd", "yd", "u")}
    diag = ""
    for k in range(horizon):
        y = plant.C @ x
        yd = exo.R @ xd
        u = np.asarray(input_provider(k, y, yd), dtype=float).ravel()
        rec["x"].append(x)
        rec["y"].append(y)
        rec["xd"].append(xd)
        rec["yd"].append(yd)
        rec["u"].append(u)
        x = plant.A @ x + plant.B @ u
        xd = exo.S @ xd
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > blowup:
            diag = f"state diverged after step {k} (|x| = {np.linalg.norm(x):.3g})"
            break
    arrs = {key: np.array(val) for key, val in rec.items()}
    return Trajectory(k=np.arange(len(arrs["x"])), ye=arrs["y"] - arrs["yd"], truncated=bool(diag),
                      diagnostic=diag, **arrs)


@dataclass(frozen=True)
class TrackingSetup:
    """Everything fixed before learning: plant, reference, weights, internal model, T and A_und."""

    plant: Plant
    exo: Exosystem
    weights: Weights
    model: InternalModel
    aug: AugmentedSystem


def build_setup(plant: Plant, exo: Exosystem, weights: Weights, rng_seed, T=None) -> TrackingSetup:
    if weights.Q.shape[0] != plant.p or weights.Rbar.shape[0] != plant.m:
        raise ConfigError(f"weights must be Q {plant.p}x{plant.p} and Rbar {plant.m}x{plant.m}")
    if exo.R.shape[0] != plant.p:
        raise ConfigError(f"R has {exo.R.shape[0]} rows but the plant has {plant.p} outputs")
    model = build_internal_model(exo, plant.p)
    if T is None:
        T = choose_feedforward_T(model, plant.m, rng_seed)
    aug = build_augmented(plant, model, T)
    return TrackingSetup(plant=plant, exo=exo, weights=weights, model=model, aug=aug)
