"""Model-free output-feedback learner.

Data are collected once under an exploratory behavior policy and reused for
every policy-iteration step. For a target gain ``K_o`` (acting on the filter
vector ``zeta``) each logged sample gives one linear equation in the unknown
kernels::

    zeta'^T L_P zeta' - zeta^T L_P zeta
      - 2 zeta^T L_1 (u + K_o zeta) - u^T L_2 u + (K_o zeta)^T L_2 (K_o zeta)
      - 2 zeta^T L_3 th - 2 th^T L_4 u - th^T L_5 th
      = -y^T Q y - (K_o zeta)^T R (K_o zeta)

where ``u`` is the logged input (plant input minus the ``-T z`` feedforward)
and ``th`` is the signal driving the internal model. Solving for the kernels
and setting ``K_o <- (R + L_2)^-1 L_1^T`` is one policy-iteration step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import linalg_kit as la
from .errors import ConvergenceError, InstabilityError, PolicyUpdateError, RankConditionError
from .lti_core import TrackingSetup, Weights
from .state_reconstruction import FilterBank, FilterSpec, Parameterization

log = logging.getLogger(__name__)

BLOWUP = 1e8
KERNEL_NAMES = ("L_P", "L_1", "L_2", "L_3", "L_4", "L_5")


@dataclass(frozen=True)
class ExcitationSpec:
    """Sum of sinusoids with random frequencies and phases plus uniform noise, per channel."""

    n_sines: int = 12
    amp: float = 1.0
    freq_range: tuple[float, float] = (0.05, 3.0)
    noise_amp: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.amp < 0 or self.noise_amp < 0:
            raise ValueError("amp and noise_amp must be non-negative")
        lo, hi = self.freq_range
        if not 0 <= lo < hi:
            raise ValueError(f"bad frequency range {self.freq_range}")

    def signal(self, channels: int, length: int, stream: int) -> np.ndarray:
        """``(length, channels)`` samples; ``stream`` separates independent draws for one seed."""
        rng = np.random.default_rng([self.seed, stream])
        k = np.arange(length)[:, None]
        out = np.empty((length, channels))
        for ch in range(channels):
            freqs = np.sort(rng.uniform(*self.freq_range, size=self.n_sines))
            phases = rng.uniform(0.0, 2 * np.pi, size=self.n_sines)
            noise = rng.uniform(-self.noise_amp, self.noise_amp, size=length)
            out[:, ch] = self.amp * np.sin(k * freqs + phases).sum(axis=1) + noise
        return out


XI_STREAM = 0
THETA_STREAM = 1


@dataclass
class LoopState:
    """Mutable loop state shared by data collection and deployment."""

    x: np.ndarray
    zbar: np.ndarray
    xd: np.ndarray
    bank: FilterBank
    k: int = 0

    @classmethod
    def initial(cls, setup: TrackingSetup, spec: FilterSpec, x0=None, xd0=None) -> "LoopState":
        p = setup.plant
        x = np.zeros(p.n) if x0 is None else np.asarray(x0, dtype=float).ravel().copy()
        xd = np.zeros(setup.exo.q) if xd0 is None else np.asarray(xd0, dtype=float).ravel().copy()
        if x.size != p.n or xd.size != setup.exo.q:
            raise ValueError("initial state dimensions do not match the plant/exosystem")
        return cls(x=x, zbar=np.zeros(setup.model.F.shape[0]), xd=xd, bank=FilterBank(spec, p.m, p.p))

    @property
    def r(self) -> np.ndarray:
        return np.concatenate([self.x, self.zbar])

    def copy(self) -> "LoopState":
        return LoopState(self.x.copy(), self.zbar.copy(), self.xd.copy(), self.bank.copy(), self.k)

    def advance(self, setup: TrackingSetup, ubar: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Apply ``ubar - T zbar`` to the plant and step everything once; returns ``y(k)``."""
        plant, model = setup.plant, setup.model
        y = plant.C @ self.x
        u = ubar - setup.aug.T @ self.zbar
        self.x = plant.A @ self.x + plant.B @ u
        self.zbar = model.F @ self.zbar + model.G @ (theta - y)
        self.xd = setup.exo.S @ self.xd
        self.bank.step(ubar, y, theta)
        self.k += 1
        if not np.all(np.isfinite(self.x)) or np.linalg.norm(self.r) > BLOWUP:
            raise InstabilityError(f"state norm exceeded {BLOWUP:.0e} at k={self.k}")
        return y


@dataclass
class DataLog:
    """Samples ``k0..kf``: zeta(k), zeta(k+1), logged input, reference channel and output."""

    k: np.ndarray
    zeta: np.ndarray
    zeta_next: np.ndarray
    ubar: np.ndarray
    theta: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.k.size

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.zeta.shape[1], self.ubar.shape[1], self.theta.shape[1]

    def subset(self, idx) -> "DataLog":
        return DataLog(*(getattr(self, name)[idx] for name in ("k", "zeta", "zeta_next", "ubar", "theta", "y")))

    def halves(self) -> tuple["DataLog", "DataLog"]:
        mid = len(self) // 2
        return self.subset(slice(0, mid)), self.subset(slice(mid, None))


@dataclass
class BehaviorResult:
    log: DataLog
    state: LoopState
    # augmented states r(k), r(k+1) for logged samples; for oracle checks only
    r: np.ndarray
    r_next: np.ndarray


def run_behavior(setup: TrackingSetup, state: LoopState, excitation: ExcitationSpec, K_o0,
                 k0: int, kf: int, theta_source: str = "exploration") -> BehaviorResult:
    """Drive the plant with ``ubar = -K_o0 zeta + xi`` from ``state.k`` through ``kf``.

    The internal-model channel ``theta`` is an independent excitation or the
    reference output. Samples with ``k >= k0`` are logged. ``state`` is
    advanced in place so deployment can continue from it.
    """
    if not 0 <= k0 < kf:
        raise ValueError(f"need 0 <= k0 < kf, got k0={k0}, kf={kf}")
    if theta_source not in ("exploration", "reference"):
        raise ValueError(f"theta_source must be 'exploration' or 'reference', got {theta_source!r}")
    p = setup.plant
    K_o0 = np.atleast_2d(np.asarray(K_o0, dtype=float))
    if K_o0.shape != (p.m, state.bank.dim):
        raise ValueError(f"K_o0 must be {p.m}x{state.bank.dim}, got {K_o0.shape}")
    start = state.k
    xi = excitation.signal(p.m, kf + 1, XI_STREAM)
    th_exc = excitation.signal(p.p, kf + 1, THETA_STREAM) if theta_source == "exploration" else None

    rec = {name: [] for name in ("k", "zeta", "zeta_next", "ubar", "theta", "y", "r", "r_next")}
    for k in range(start, kf + 1):
        zeta = state.bank.zeta
        r = state.r
        ubar = -K_o0 @ zeta + xi[k]
        theta = th_exc[k] if th_exc is not None else setup.exo.R @ state.xd
        y = state.advance(setup, ubar, theta)
        if k >= k0:
            rec["k"].append(k)
            rec["zeta"].append(zeta)
            rec["zeta_next"].append(state.bank.zeta)
            rec["ubar"].append(ubar)
            rec["theta"].append(np.asarray(theta, dtype=float))
            rec["y"].append(y)
            rec["r"].append(r)
            rec["r_next"].append(state.r)
    arr = {name: np.array(val, dtype=float) for name, val in rec.items()}
    data = DataLog(k=arr["k"].astype(int), zeta=arr["zeta"], zeta_next=arr["zeta_next"],
                   ubar=arr["ubar"], theta=arr["theta"], y=arr["y"])
    return BehaviorResult(log=data, state=state, r=arr["r"], r_next=arr["r_next"])


def column_layout(n_zeta: int, r_m: int, r_p: int) -> dict[str, slice]:
    sizes = (
        n_zeta * (n_zeta + 1) // 2,
        n_zeta * r_m,
        r_m * (r_m + 1) // 2,
        n_zeta * r_p,
        r_p * r_m,
        r_p * (r_p + 1) // 2,
    )
    layout, start = {}, 0
    for name, size in zip(KERNEL_NAMES, sizes):
        layout[name] = slice(start, start + size)
        start += size
    return layout


def unknown_count(n_zeta: int, r_m: int, r_p: int) -> int:
    return column_layout(n_zeta, r_m, r_p)["L_5"].stop


@dataclass
class RegressorSystem:
    rho: np.ndarray
    nu: np.ndarray
    column_layout: dict[str, slice]
    log: DataLog
    K_o: np.ndarray


def assemble_regressors(data: DataLog, K_o, weights: Weights) -> RegressorSystem:
    """Stack one Bellman equation per logged sample for the target gain ``K_o``."""
    n_zeta, r_m, r_p = data.dims
    K_o = np.atleast_2d(np.asarray(K_o, dtype=float))
    if K_o.shape != (r_m, n_zeta):
        raise ValueError(f"K_o must be {r_m}x{n_zeta}, got {K_o.shape}")
    layout = column_layout(n_zeta, r_m, r_p)
    if len(data) < layout["L_5"].stop:
        raise RankConditionError(f"{len(data)} samples cannot determine {layout['L_5'].stop} unknowns")
    Z, Zn, U, TH, Y = data.zeta, data.zeta_next, data.ubar, data.theta, data.y
    KZ = Z @ K_o.T
    rho = np.hstack([
        la.vecv_rows(Zn) - la.vecv_rows(Z),
        -2.0 * la.kron_rows(U + KZ, Z),
        -la.vecv_rows(U) + la.vecv_rows(KZ),
        -2.0 * la.kron_rows(TH, Z),
        -2.0 * la.kron_rows(U, TH),
        -la.vecv_rows(TH),
    ])
    nu = -np.einsum("ki,ij,kj->k", Y, weights.Q, Y) - np.einsum("ki,ij,kj->k", KZ, weights.Rbar, KZ)
    return RegressorSystem(rho=rho, nu=nu, column_layout=layout, log=data, K_o=K_o)


def data_block_matrix(data: DataLog) -> np.ndarray:
    """``[vecv(zeta), u kron zeta, vecv(u), th kron zeta, u kron th, vecv(th)]`` rows."""
    Z, U, TH = data.zeta, data.ubar, data.theta
    return np.hstack([
        la.vecv_rows(Z), la.kron_rows(U, Z), la.vecv_rows(U),
        la.kron_rows(TH, Z), la.kron_rows(U, TH), la.vecv_rows(TH),
    ])


@dataclass(frozen=True)
class RankCheck:
    rank: int
    required: int

    @property
    def ok(self) -> bool:
        return self.rank == self.required


def check_rank_condition(source, tol: float = la.RANK_TOL) -> RankCheck:
    """Rank of the data-block matrix against the number of unknown kernel entries.

    Accepts a :class:`DataLog` or a :class:`RegressorSystem`.
    """
    data = source.log if isinstance(source, RegressorSystem) else source
    required = unknown_count(*data.dims)
    if len(data) == 0:
        return RankCheck(0, required)
    return RankCheck(la.svd_rank(data_block_matrix(data), tol), required)


@dataclass
class LearnedKernels:
    L_P: np.ndarray
    L_1: np.ndarray
    L_2: np.ndarray
    L_3: np.ndarray
    L_4: np.ndarray
    L_5: np.ndarray
    K_o: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @classmethod
    def from_vector(cls, v: np.ndarray, layout: dict[str, slice], dims: tuple[int, int, int], **kw) -> "LearnedKernels":
        n, m, p = dims
        return cls(
            L_P=la.unvecs(v[layout["L_P"]], n),
            L_1=la.unvec(v[layout["L_1"]], n, m),
            L_2=la.unvecs(v[layout["L_2"]], m),
            L_3=la.unvec(v[layout["L_3"]], n, p),
            L_4=la.unvec(v[layout["L_4"]], p, m),
            L_5=la.unvecs(v[layout["L_5"]], p),
            **kw,
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            la.vecs(self.L_P), la.vec(self.L_1), la.vecs(self.L_2),
            la.vec(self.L_3), la.vec(self.L_4), la.vecs(self.L_5),
        ])

    def unique_part(self) -> np.ndarray:
        """``L_1 .. L_5`` stacked; these are identifiable even when ``L_P`` is not."""
        return np.concatenate([la.vec(self.L_1), la.vecs(self.L_2), la.vec(self.L_3),
                               la.vec(self.L_4), la.vecs(self.L_5)])


def _require_rank(reg: RegressorSystem) -> RankCheck:
    chk = check_rank_condition(reg)
    if not chk.ok:
        raise RankConditionError(f"data rank {chk.rank} below the {chk.required} unknowns; "
                                 "collect more or richer data")
    return chk


def solve_kernels_direct(reg: RegressorSystem, check: bool = True) -> LearnedKernels:
    """Minimum-norm least-squares kernels."""
    if check:
        _require_rank(reg)
    v = la.solve_linear_least_squares(reg.rho, reg.nu)
    return LearnedKernels.from_vector(v, reg.column_layout, reg.log.dims, info={"solver": "direct"})


def solve_kernels_gradient(reg: RegressorSystem, eps_fraction: float = 0.5, max_s: int | None = None,
                           tol: float = 1e-7, accelerate: bool = True, check: bool = True) -> LearnedKernels:
    """Gradient iteration ``v <- v - eps rho^T (rho v - nu)`` from ``v = 0``.

    ``eps = eps_fraction * 2 / lambda_max(rho^T rho)``; fractions outside
    (0, 1) leave the contraction region and are rejected. The iteration stops
    once the certified bound ``|v(s+1) - v(s)| / (eps mu_min)`` on the
    distance to the least-squares solution drops below
    ``tol * max(1, |v|)``, where ``mu_min`` is the smallest nonzero
    eigenvalue of ``rho^T rho``.

    With ``accelerate`` the same affine map is composed with itself
    (``s = 1, 2, 4, ...``) so ill-conditioned systems need only ``log2(s)``
    matrix products; the stopping test then runs at powers of two.
    ``max_s`` defaults to ``2**50`` when accelerated and ``10**6`` otherwise.

    The normal-equation data and the iterates are kept in extended precision
    (``numpy.longdouble``). ``rho^T rho`` is often conditioned around 1e10 on
    filtered data, which puts the attainable accuracy of a double-precision
    iteration near 1e-6.

    Raises:
        ValueError: step-size fraction outside (0, 1).
        ConvergenceError: ``max_s`` reached first.
    """
    if not 0.0 < eps_fraction < 1.0:
        raise ValueError(f"eps_fraction must lie in (0, 1) to keep the iteration contractive, got {eps_fraction}")
    if check:
        _require_rank(reg)
    if max_s is None:
        max_s = 2**50 if accelerate else 10**6
    rho = reg.rho.astype(np.longdouble)
    H = rho.T @ rho
    g = rho.T @ reg.nu.astype(np.longdouble)
    mu = np.linalg.eigvalsh(H.astype(float))
    mu_max = float(mu[-1])
    if mu_max <= 0.0:
        return LearnedKernels.from_vector(np.zeros(H.shape[0]), reg.column_layout, reg.log.dims,
                                          info={"solver": "gradient", "steps": 0})
    floor = (la.RANK_TOL * max(reg.rho.shape)) ** 2 * mu_max
    mu_min = float(mu[mu > floor][0])
    eps = eps_fraction * 2.0 / mu_max

    def certified(v):
        step = float(np.linalg.norm((eps * (H @ v - g)).astype(float)))
        err = step / (eps * mu_min)
        return err, step, err <= tol * max(1.0, float(np.linalg.norm(v.astype(float))))

    M = np.eye(H.shape[0], dtype=np.longdouble) - eps * H
    c = eps * g
    if accelerate:
        Ms, v, s = M, c.copy(), 1
        while True:
            err, step, done = certified(v)
            if done:
                break
            if s >= max_s:
                raise ConvergenceError(f"gradient iteration not converged after {s} steps (bound {err:.3g})")
            v = Ms @ v + v
            Ms = Ms @ Ms
            s *= 2
    else:
        v, s = np.zeros_like(g), 0
        while True:
            err, step, done = certified(v)
            if done:
                break
            if s >= max_s:
                raise ConvergenceError(f"gradient iteration not converged after {s} steps (bound {err:.3g})")
            v = M @ v + c
            s += 1
    info = {"solver": "gradient", "steps": s, "eps": eps, "step_norm": step, "error_bound": err,
            "condition": mu_max / mu_min}
    return LearnedKernels.from_vector(v.astype(float), reg.column_layout, reg.log.dims, info=info)


def policy_update(kernels: LearnedKernels, Rbar) -> np.ndarray:
    """``K_o <- (R + L_2)^-1 L_1^T``."""
    Rbar = la.as_matrix(Rbar, "Rbar")
    lhs = Rbar + kernels.L_2
    if la.min_eig_sym(lhs) <= 0.0:
        raise PolicyUpdateError(f"R + L_2 is not positive definite (min eigenvalue {la.min_eig_sym(lhs):.3g})")
    return np.linalg.solve(lhs, kernels.L_1.T)


@dataclass
class IterationRecord:
    j: int
    K_o: np.ndarray
    K_o_next: np.ndarray
    gain_delta: float
    kernels: LearnedKernels


@dataclass
class LearningResult:
    K_o_star: np.ndarray
    trace: list[IterationRecord]
    behavior: BehaviorResult
    converged: bool

    @property
    def log(self) -> DataLog:
        return self.behavior.log


def solve_kernels(reg: RegressorSystem, solver: str = "direct", **solver_kw) -> LearnedKernels:
    if solver == "direct":
        return solve_kernels_direct(reg, check=solver_kw.get("check", True))
    if solver == "gradient":
        return solve_kernels_gradient(reg, **solver_kw)
    raise ValueError(f"unknown solver {solver!r}")


def iterate_policy(data: DataLog, K_o0, weights: Weights, solver: str = "direct", eps_stop: float = 1e-6,
                   max_iter: int = 50, solver_kw: dict | None = None) -> tuple[np.ndarray, list[IterationRecord], bool]:
    """Off-policy iteration on one fixed data log."""
    solver_kw = dict(solver_kw or {})
    chk = check_rank_condition(data)
    if not chk.ok:
        raise RankConditionError(f"data rank {chk.rank} below the {chk.required} unknowns")
    solver_kw["check"] = False
    K_o = np.atleast_2d(np.asarray(K_o0, dtype=float))
    trace = []
    for j in range(max_iter):
        reg = assemble_regressors(data, K_o, weights)
        kernels = solve_kernels(reg, solver, **solver_kw)
        K_next = policy_update(kernels, weights.Rbar)
        kernels.K_o = K_next
        delta = float(np.linalg.norm(K_next - K_o))
        trace.append(IterationRecord(j=j, K_o=K_o, K_o_next=K_next, gain_delta=delta, kernels=kernels))
        log.debug("policy iteration %d: |dK_o| = %.3e", j, delta)
        K_o = K_next
        if delta <= eps_stop:
            return K_o, trace, True
    return K_o, trace, False


def learn(setup: TrackingSetup, spec: FilterSpec, excitation: ExcitationSpec, K_o0, k0: int, kf: int,
          x0=None, xd0=None, theta_source: str = "exploration", solver: str = "direct",
          solver_kw: dict | None = None, eps_stop: float = 1e-6, max_iter: int = 50,
          strict: bool = True) -> LearningResult:
    """Pre-collect over ``[0, k0)``, log ``[k0, kf]``, then iterate policies on that log.

    Raises:
        RankConditionError: data not rich enough.
        InstabilityError: behavior loop diverged.
        ConvergenceError: no convergence in ``max_iter`` (only when ``strict``).
    """
    state = LoopState.initial(setup, spec, x0, xd0)
    behavior = run_behavior(setup, state, excitation, K_o0, k0, kf, theta_source)
    K_o, trace, ok = iterate_policy(behavior.log, K_o0, setup.weights, solver, eps_stop, max_iter, solver_kw)
    if not ok and strict:
        raise ConvergenceError(f"policy iteration did not converge in {max_iter} iterations "
                               f"(last |dK_o| = {trace[-1].gain_delta:.3g})")
    return LearningResult(K_o_star=K_o, trace=trace, behavior=behavior, converged=ok)


@dataclass
class DeployResult:
    k: np.ndarray
    y: np.ndarray
    yd: np.ndarray
    ye: np.ndarray
    u: np.ndarray
    state: LoopState

    def trailing_max(self, window: int) -> float:
        return float(np.max(np.abs(self.ye[-window:])))

    @property
    def initial_error(self) -> float:
        return float(np.max(np.abs(self.ye[0])))


def deploy(setup: TrackingSetup, state: LoopState, K_o, horizon: int) -> DeployResult:
    """Run ``u = -K_o zeta - T zbar`` with the reference output driving the internal model.

    Continues from ``state`` (no reset of plant, filter or internal-model states).
    """
    K_o = np.atleast_2d(np.asarray(K_o, dtype=float))
    rec = {name: [] for name in ("k", "y", "yd", "u")}
    for _ in range(horizon):
        yd = setup.exo.R @ state.xd
        ubar = -K_o @ state.bank.zeta
        u = ubar - setup.aug.T @ state.zbar
        k = state.k
        y = state.advance(setup, ubar, yd)
        rec["k"].append(k)
        rec["y"].append(y)
        rec["yd"].append(yd)
        rec["u"].append(u)
    arr = {name: np.array(val, dtype=float) for name, val in rec.items()}
    return DeployResult(k=arr["k"].astype(int), y=arr["y"], yd=arr["yd"], ye=arr["y"] - arr["yd"], u=arr["u"],
                        state=state)


def oracle_kernels(setup: TrackingSetup, param: Parameterization, K, weights: Weights | None = None) -> LearnedKernels:
    """Model-based kernels for the state gain ``K``: ``P`` solves the Stein equation of ``K``."""
    aug = setup.aug
    weights = weights or setup.weights
    K = np.atleast_2d(np.asarray(K, dtype=float))
    P = la.solve_stein(aug.closed_loop(K), aug.state_weight(weights) + K.T @ weights.Rbar @ K)
    M = param.Mbar
    AtP = aug.underA.T @ P
    return LearnedKernels(
        L_P=M.T @ P @ M,
        L_1=M.T @ AtP @ aug.barB,
        L_2=aug.barB.T @ P @ aug.barB,
        L_3=M.T @ AtP @ aug.barG,
        L_4=aug.barG.T @ P @ aug.barB,
        L_5=aug.barG.T @ P @ aug.barG,
        info={"P": P},
    )


def state_gain_from_output_gain(K_o, Mbar) -> np.ndarray:
    """Recover ``K`` from ``K_o = K M_bar`` (``M_bar`` full row rank)."""
    return np.linalg.lstsq(np.asarray(Mbar).T, np.atleast_2d(K_o).T, rcond=None)[0].T
