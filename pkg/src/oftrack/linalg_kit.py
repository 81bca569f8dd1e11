"""Dense linear-algebra helpers used throughout the package.

Everything here operates on small dense ``numpy`` arrays (state dimensions up
to a few dozen). Vectorization follows the column-major ``vec`` convention,
and the half-vectorizations ``vecs``/``vecv`` are paired so that
``vecv(x) @ vecs(W) == x @ W @ x`` for symmetric ``W``.
"""

from __future__ import annotations

import numpy as np

from .errors import NotSchurError

RANK_TOL = 1e-10


def as_matrix(value, name: str = "matrix") -> np.ndarray:
    """Coerce scalars, vectors and nested lists into a finite 2-D float array.

    A bare scalar becomes 1x1 and a flat list becomes a single column.
    """
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ValueError(f"{name} must be at most 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def vec(M: np.ndarray) -> np.ndarray:
    """Stack the columns of ``M`` into one vector."""
    return np.asarray(M, dtype=float).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape(rows, cols, order="F")


def vecs(W: np.ndarray) -> np.ndarray:
    """Half-vectorize a symmetric matrix, doubling the off-diagonal entries.

    Returns ``[W11, 2 W12, ..., 2 W1n, W22, 2 W23, ..., Wnn]``.
    """
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"vecs needs a square matrix, got shape {W.shape}")
    W = 0.5 * (W + W.T)
    n = W.shape[0]
    rows, cols = np.triu_indices(n)
    return np.where(rows == cols, 1.0, 2.0) * W[rows, cols]


def unvecs(v: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`vecs`."""
    v = np.asarray(v, dtype=float)
    if v.size != n * (n + 1) // 2:
        raise ValueError(f"length {v.size} does not match n={n}")
    rows, cols = np.triu_indices(n)
    W = np.zeros((n, n))
    W[rows, cols] = np.where(rows == cols, 1.0, 0.5) * v
    return W + np.triu(W, 1).T


def vecv(t: np.ndarray) -> np.ndarray:
    """Quadratic monomials ``[t1^2, t1 t2, ..., t1 tn, t2^2, ..., tn^2]``."""
    t = np.asarray(t, dtype=float).ravel()
    rows, cols = np.triu_indices(t.size)
    return t[rows] * t[cols]


def vecv_rows(T: np.ndarray) -> np.ndarray:
    """Apply :func:`vecv` to every row of a 2-D array."""
    T = np.asarray(T, dtype=float)
    rows, cols = np.triu_indices(T.shape[1])
    return T[:, rows] * T[:, cols]


def kron_rows(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: row k is ``kron(X[k], Y[k])``."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    return (X[:, :, None] * Y[:, None, :]).reshape(X.shape[0], -1)


def singular_values(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros(0)
    return np.linalg.svd(M, compute_uv=False)


def svd_rank(M: np.ndarray, tol: float = RANK_TOL) -> int:
    """Numerical rank: singular values above ``tol * max(rows, cols) * sigma_max``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    s = singular_values(M)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * max(M.shape) * s[0]))


def eigenvalues(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"eigenvalues needs a square matrix, got shape {M.shape}")
    return np.linalg.eigvals(M)


def spectral_radius(M: np.ndarray) -> float:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(eigenvalues(M))))


def is_schur(M: np.ndarray) -> bool:
    return spectral_radius(M) < 1.0


def min_eig_sym(M: np.ndarray) -> float:
    M = np.asarray(M, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def solve_stein(Acl: np.ndarray, Qrhs: np.ndarray, refine: int = 2) -> np.ndarray:
    """Solve ``P - Acl^T P Acl = Qrhs`` for symmetric ``P``.

    Uses the Kronecker form ``(I - Acl^T kron Acl^T) vec(P) = vec(Qrhs)``,
    which is adequate for the state sizes this package deals with, followed
    by ``refine`` steps of iterative refinement with the residual formed in
    extended precision. Refinement matters for policy iteration: successive
    kernels differ by tiny amounts near convergence, and without it their
    computed difference is dominated by the ``cond * eps`` forward error.

    Raises:
        NotSchurError: if ``Acl`` has spectral radius >= 1.
    """
    Acl = as_matrix(Acl, "Acl")
    Qrhs = as_matrix(Qrhs, "Qrhs")
    n = Acl.shape[0]
    if Acl.shape != (n, n) or Qrhs.shape != (n, n):
        raise ValueError(f"shape mismatch: Acl {Acl.shape}, Qrhs {Qrhs.shape}")
    rho = spectral_radius(Acl)
    if rho >= 1.0:
        raise NotSchurError(f"Stein equation needs a Schur matrix; spectral radius is {rho:.6g}")
    lhs = np.eye(n * n) - np.kron(Acl.T, Acl.T)
    Qs = 0.5 * (Qrhs + Qrhs.T)
    P = unvec(np.linalg.solve(lhs, vec(Qs)), n, n)
    A_ext, Q_ext = Acl.astype(np.longdouble), Qs.astype(np.longdouble)
    for _ in range(refine):
        P_ext = P.astype(np.longdouble)
        resid = (Q_ext - P_ext + A_ext.T @ P_ext @ A_ext).astype(float)
        P = P + unvec(np.linalg.solve(lhs, vec(resid)), n, n)
    return 0.5 * (P + P.T)


def solve_sylvester(A: np.ndarray, B: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Solve ``A X + X B = C`` through its Kronecker form.

    Raises ``numpy.linalg.LinAlgError`` when ``A`` and ``-B`` share an
    eigenvalue (the Kronecker operator is then singular).
    """
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    C = as_matrix(C, "C")
    n, m = A.shape[0], B.shape[0]
    if C.shape != (n, m):
        raise ValueError(f"C must be {n}x{m}, got {C.shape}")
    op = np.kron(np.eye(m), A) + np.kron(B.T, np.eye(n))
    s = singular_values(op)
    if s[-1] <= 1e-13 * s[0]:
        raise np.linalg.LinAlgError("Sylvester operator is singular (shared spectrum)")
    return unvec(np.linalg.solve(op, vec(C)), n, m)


def solve_linear_least_squares(Amat: np.ndarray, bvec: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Minimum-norm least-squares solution with the :func:`svd_rank` cutoff."""
    Amat = np.atleast_2d(np.asarray(Amat, dtype=float))
    bvec = np.asarray(bvec, dtype=float).ravel()
    if Amat.shape[0] != bvec.size:
        raise ValueError(f"rows {Amat.shape[0]} != len(b) {bvec.size}")
    U, s, Vt = np.linalg.svd(Amat, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(Amat.shape[1])
    keep = s > tol * max(Amat.shape) * s[0]
    coeffs = (U[:, keep].T @ bvec) / s[keep]
    return Vt[keep].T @ coeffs


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``[B, A B, ..., A^(n-1) B]``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def observability_matrix(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    return controllability_matrix(np.asarray(A).T, np.asarray(C).T).T


def real_embedding(M: np.ndarray) -> np.ndarray:
    """Map complex ``M`` to ``[[Re, -Im], [Im, Re]]``; real rank is twice the complex rank."""
    M = np.asarray(M, dtype=complex)
    return np.block([[M.real, -M.imag], [M.imag, M.real]])


def complex_rank(M: np.ndarray, tol: float = RANK_TOL) -> int:
    return svd_rank(real_embedding(M), tol) // 2


def pbh_rank_test(A: np.ndarray, Bcols: np.ndarray, lam: complex, tol: float = RANK_TOL) -> int:
    """Complex rank of ``[A - lam I, Bcols]``.

    Pass ``Bcols = C.T`` (and ``A.T``) for the dual observability test.
    """
    A = np.asarray(A, dtype=float)
    Bcols = np.asarray(Bcols, dtype=float)
    if Bcols.ndim == 1:
        Bcols = Bcols.reshape(-1, 1)
    if Bcols.shape[0] != A.shape[0]:
        raise ValueError("A and Bcols must have the same number of rows")
    M = np.hstack([A - lam * np.eye(A.shape[0]), Bcols.astype(complex)])
    return complex_rank(M, tol)


def poly_of_matrix(coeffs, M: np.ndarray) -> np.ndarray:
    """Evaluate a polynomial (highest degree first) at a square matrix by Horner."""
    M = np.asarray(M, dtype=float)
    out = np.zeros_like(M)
    for c in coeffs:
        out = out @ M + c * np.eye(M.shape[0])
    return out


def companion(coeffs) -> np.ndarray:
    """Companion matrix of a monic polynomial ``z^d + a1 z^(d-1) + ... + ad``.

    ``coeffs`` is ``[1, a1, ..., ad]``; the last row is ``[-ad, ..., -a1]`` and
    the superdiagonal is ones, so ``(zI - C)^-1 e_d = [1, z, ..., z^(d-1)] / p(z)``.
    """
    coeffs = np.asarray(coeffs, dtype=float).ravel()
    if coeffs.size < 2 or coeffs[0] != 1.0:
        raise ValueError(f"companion needs a monic polynomial of degree >= 1, got {coeffs}")
    d = coeffs.size - 1
    C = np.zeros((d, d))
    C[:-1, 1:] = np.eye(d - 1)
    C[-1, :] = -coeffs[:0:-1]
    return C
