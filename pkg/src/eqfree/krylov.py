"""Matrix-free Krylov machinery around a black-box timestepper.

Everything here touches the operator only through products ``v -> A v``:
finite-difference Jacobian-vector products, restarted GMRES, a
Newton-Krylov solver for fixed points ``u = S(u)``, and Arnoldi iteration
with Ritz extraction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from . import textio

logger = logging.getLogger(__name__)

EPS = np.finfo(float).eps
REORTH_THRESHOLD = 0.7


class SolverError(RuntimeError):
    pass


def as_operator(A, n: int | None = None) -> LinearOperator:
    """Wrap a matrix, a scipy LinearOperator or a callable ``v -> A v``."""
    if callable(A) and not isinstance(A, (LinearOperator, np.ndarray)):
        if n is None:
            raise ValueError("the dimension n is required when A is a plain callable")
        return LinearOperator((n, n), matvec=lambda v: np.asarray(A(np.ravel(v)), dtype=float), dtype=float)
    return aslinearoperator(A)


def default_eps(u) -> float:
    return math.sqrt(EPS) * (1.0 + np.linalg.norm(u))


def jvp(stepper: Callable, u, v, eps: float | None = None, s_u=None, central: bool = False) -> np.ndarray:
    """Directional derivative of ``stepper`` at ``u`` along ``v``.

    One-sided difference along the normalized direction, rescaled by ``|v|``.
    ``s_u`` may carry a precomputed ``stepper(u)`` to save a call.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ValueError("jvp direction must be nonzero")
    if eps is None:
        eps = default_eps(u)
    vhat = v / nv
    plus = np.asarray(stepper(u + eps * vhat), dtype=float)
    if central:
        minus = np.asarray(stepper(u - eps * vhat), dtype=float)
        out = (plus - minus) * (nv / (2 * eps))
    else:
        base = np.asarray(stepper(u) if s_u is None else s_u, dtype=float)
        out = (plus - base) * (nv / eps)
    if not np.all(np.isfinite(out)):
        raise SolverError(f"stepper produced non-finite values in a JVP at |u|={np.linalg.norm(u):.3g}")
    return out


def jacobian_operator(stepper: Callable, u, eps: float | None = None, central: bool = False) -> LinearOperator:
    """LinearOperator ``v -> J v`` for the stepper's Jacobian at ``u``."""
    u = np.asarray(u, dtype=float)
    s_u = None if central else np.asarray(stepper(u), dtype=float)

    def matvec(v):
        v = np.ravel(v)
        if not np.any(v):
            return np.zeros_like(u)
        return jvp(stepper, u, v, eps=eps, s_u=s_u, central=central)

    return LinearOperator((u.size, u.size), matvec=matvec, dtype=float)


def _orthogonalize(V, w, j):
    """Modified Gram-Schmidt of ``w`` against ``V[:, :j+1]``, one conditional re-pass."""
    h = np.zeros(j + 2)
    norm0 = np.linalg.norm(w)
    for i in range(j + 1):
        h[i] = V[:, i] @ w
        w = w - h[i] * V[:, i]
    if np.linalg.norm(w) < REORTH_THRESHOLD * norm0:
        for i in range(j + 1):
            c = V[:, i] @ w
            h[i] += c
            w = w - c * V[:, i]
    h[j + 1] = np.linalg.norm(w)
    return w, h


# --------------------------------------------------------------------------
# GMRES


@dataclass
class GmresReport:
    x: np.ndarray
    residual_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    restarts: int = 0
    final_residual: float = float("nan")

    def to_csv(self, path):
        return textio.write_csv(path, ["iteration", "residual"], enumerate(self.residual_history))


def gmres(A, b, x0=None, tol: float = 1e-10, restart: int = 50, maxiter: int = 200) -> GmresReport:
    """Restarted GMRES; ``maxiter`` bounds the total number of operator applications.

    Convergence means ``|b - A x| <= tol |b|`` for the recomputed true
    residual. Stagnation yields ``converged=False`` rather than an exception.
    """
    b = np.asarray(b, dtype=float).ravel()
    n = b.size
    op = as_operator(A, n)
    if op.shape != (n, n):
        raise ValueError(f"operator shape {op.shape} does not match rhs length {n}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float).ravel()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return GmresReport(np.zeros(n), [0.0], 0, True)
    target = tol * bnorm
    r = b - op.matvec(x)
    beta = np.linalg.norm(r)
    history = [beta]
    report = GmresReport(x, history)
    if beta <= target:
        report.converged = True
        report.final_residual = beta
        return report
    restart = max(1, min(restart, n))
    total = 0
    while total < maxiter:
        V = np.zeros((n, restart + 1))
        H = np.zeros((restart + 1, restart))
        cs = np.zeros(restart)
        sn = np.zeros(restart)
        g = np.zeros(restart + 1)
        g[0] = beta
        V[:, 0] = r / beta
        k = 0
        breakdown = False
        for j in range(restart):
            if total >= maxiter:
                break
            w, h = _orthogonalize(V, op.matvec(V[:, j]), j)
            total += 1
            H[: j + 2, j] = h
            # apply previous rotations to the new column
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = math.hypot(H[j, j], H[j + 1, j])
            cs[j], sn[j] = (1.0, 0.0) if denom == 0 else (H[j, j] / denom, H[j + 1, j] / denom)
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            k = j + 1
            history.append(abs(g[j + 1]))
            if h[j + 1] <= 1e-14 * max(1.0, np.linalg.norm(h)):
                breakdown = True  # happy breakdown: Krylov space is invariant
                break
            V[:, j + 1] = w / h[j + 1]
            if abs(g[j + 1]) <= target:
                break
        if k == 0:
            break
        y = np.linalg.solve(np.triu(H[:k, :k]), g[:k]) if np.all(np.diag(H[:k, :k])) else np.linalg.lstsq(
            np.triu(H[:k, :k]), g[:k], rcond=None
        )[0]
        x = x + V[:, :k] @ y
        r = b - op.matvec(x)
        new_beta = np.linalg.norm(r)
        report.restarts += 1
        if new_beta <= target:
            report.converged = True
            beta = new_beta
            break
        if breakdown or new_beta >= beta * (1 - 1e-12):
            logger.debug("gmres stagnated at relative residual %.3e", new_beta / bnorm)
            beta = new_beta
            break
        beta = new_beta
    report.x = x
    report.iterations = total
    report.final_residual = beta
    return report


# --------------------------------------------------------------------------
# Newton-Krylov


@dataclass
class NewtonReport:
    u: np.ndarray
    residual_history: list
    converged: bool
    iterations: int
    message: str = ""
    gmres_iterations: list = field(default_factory=list)

    @property
    def residual(self) -> float:
        return self.residual_history[-1]

    def to_csv(self, path):
        return textio.write_csv(path, ["iteration", "residual"], enumerate(self.residual_history))


def newton_krylov_fixed_point(
    stepper: Callable,
    u0,
    tol_res: float = 1e-12,
    tol_step: float = 1e-15,
    max_newton: int = 50,
    gmres_tol: float = 1e-10,
    restart: int = 50,
    maxiter: int = 200,
    eps: float | None = None,
) -> NewtonReport:
    """Find ``u`` with ``psi(u) = u - stepper(u) = 0``.

    Each Newton direction solves ``(I - J) d = -psi`` with GMRES on
    finite-difference JVPs, followed by Armijo backtracking on ``|psi|``.
    """
    u = np.array(u0, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("initial guess contains non-finite values")
    s_u = np.asarray(stepper(u), dtype=float)
    psi = u - s_u
    rnorm = np.linalg.norm(psi)
    history = [rnorm]
    inner = []
    for it in range(max_newton):
        if rnorm <= tol_res:
            return NewtonReport(u, history, True, it, "converged", inner)
        J = jacobian_operator(stepper, u, eps=eps)
        J_psi = LinearOperator((u.size, u.size), matvec=lambda v, J=J: np.ravel(v) - J.matvec(v), dtype=float)
        # inexact Newton forcing term, tightened as the residual shrinks
        eta = max(gmres_tol, min(1e-3, rnorm))
        lin = gmres(J_psi, -psi, tol=eta, restart=restart, maxiter=maxiter)
        inner.append(lin.iterations)
        d = lin.x
        t = 1.0
        accepted = False
        for _ in range(9):
            trial = u + t * d
            s_trial = np.asarray(stepper(trial), dtype=float)
            psi_trial = trial - s_trial
            r_trial = np.linalg.norm(psi_trial)
            if np.isfinite(r_trial) and r_trial <= (1 - 1e-4 * t) * rnorm:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return NewtonReport(u, history, rnorm <= tol_res, it, "line search failed", inner)
        step = t * np.linalg.norm(d)
        u, s_u, psi, rnorm = trial, s_trial, psi_trial, r_trial
        history.append(rnorm)
        if rnorm > tol_res and step <= tol_step * (1 + np.linalg.norm(u)):
            return NewtonReport(u, history, False, it + 1, "step below tol_step", inner)
    converged = rnorm <= tol_res
    return NewtonReport(u, history, converged, max_newton, "converged" if converged else "max_newton exceeded", inner)


# --------------------------------------------------------------------------
# Arnoldi


@dataclass
class ArnoldiResult:
    Q: np.ndarray  # (n, k+1) orthonormal, or (n, k) after exact breakdown
    H: np.ndarray  # (k+1, k) upper Hessenberg, or (k, k) after exact breakdown
    ritz_values: np.ndarray
    ritz_vectors: np.ndarray  # (n, k), unit 2-norm columns
    ritz_residuals: np.ndarray
    exact: bool = False

    @property
    def k(self) -> int:
        return self.H.shape[1]


def arnoldi(A, v0, m_k: int) -> ArnoldiResult:
    """``m_k`` Arnoldi steps from ``v0`` with Ritz extraction.

    Ritz values are sorted by decreasing modulus (conjugate pairs stay
    adjacent). An invariant subspace found early ends the iteration with
    ``exact=True``.
    """
    v0 = np.asarray(v0, dtype=float).ravel()
    n = v0.size
    op = as_operator(A, n)
    if not np.any(v0):
        raise ValueError("starting vector must be nonzero")
    if not 1 <= m_k <= n:
        raise ValueError(f"need 1 <= m_k <= n, got m_k={m_k}, n={n}")
    Q = np.zeros((n, m_k + 1))
    H = np.zeros((m_k + 1, m_k))
    Q[:, 0] = v0 / np.linalg.norm(v0)
    exact = False
    k = m_k
    for j in range(m_k):
        w = np.asarray(op.matvec(Q[:, j]), dtype=float).ravel()
        scale = np.linalg.norm(w)
        w, h = _orthogonalize(Q, w, j)
        H[: j + 2, j] = h
        if h[j + 1] <= 1e-12 * max(scale, np.abs(h[: j + 1]).max(initial=0.0), EPS):
            H[j + 1, j] = 0.0
            exact = True
            k = j + 1
            break
        Q[:, j + 1] = w / h[j + 1]
    if exact:
        Q = Q[:, :k]
        H = H[:k, :k]
        Hsq = H
        beta = 0.0
    else:
        Hsq = H[:k, :k]
        beta = H[k, k - 1]
    vals, vecs = np.linalg.eig(Hsq)
    order = np.lexsort((-vals.imag, -np.abs(vals)))
    vals, vecs = vals[order], vecs[:, order]
    residuals = np.abs(beta * vecs[-1, :])
    ritz = Q[:, :k] @ vecs
    ritz /= np.linalg.norm(ritz, axis=0)
    return ArnoldiResult(Q, H, vals, ritz, residuals, exact)


def arnoldi_relation_error(A, result: ArnoldiResult) -> float:
    """``|A Q_k - Q H| / |H|`` evaluated with fresh operator applications."""
    op = as_operator(A, result.Q.shape[0])
    k = result.k
    AQ = np.column_stack([op.matvec(result.Q[:, j]) for j in range(k)])
    return float(np.linalg.norm(AQ - result.Q @ result.H) / max(np.linalg.norm(result.H), EPS))
