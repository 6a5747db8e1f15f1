"""Discrete-time state feedback for the reduced model ``y+ = F y + D z``, ``z = -K y``."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from . import textio

logger = logging.getLogger(__name__)


class ControlDesignError(RuntimeError):
    pass


class NotStabilizableError(ControlDesignError):
    def __init__(self, eigenvalue, message):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class UncontrollablePoleError(ControlDesignError):
    pass


def _as2d(a) -> np.ndarray:
    return np.atleast_2d(np.asarray(a, dtype=float))


@dataclass
class LqrSpec:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.Q = _as2d(self.Q)
        self.R = _as2d(self.R)
        for name, M in (("Q", self.Q), ("R", self.R)):
            if M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square")
            if np.abs(M - M.T).max() > 1e-14 * max(1.0, np.abs(M).max()):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -1e-14 * max(1.0, np.abs(self.Q).max()):
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be positive definite")

    @classmethod
    def scaled_identity(cls, n_state: int, n_input: int, q: float, r: float) -> "LqrSpec":
        return cls(q * np.eye(n_state), r * np.eye(n_input))


@dataclass
class ControllerGain:
    K: np.ndarray
    method: str  # "dlqr" | "pole_placement"
    spec: dict
    closed_loop_eigs: np.ndarray
    P: np.ndarray | None = None
    seed: int | None = None
    info: dict = field(default_factory=dict)

    @property
    def spectral_radius(self) -> float:
        return float(np.abs(self.closed_loop_eigs).max())

    def save(self, path):
        payload = {
            "K": self.K,
            "method": self.method,
            "spec": self.spec,
            "closed_loop_eigs": {"re": self.closed_loop_eigs.real, "im": self.closed_loop_eigs.imag},
            "seed": self.seed,
            "info": self.info,
        }
        if self.P is not None:
            payload["P"] = self.P
        return textio.write_document(path, "controller_gain", payload)

    @classmethod
    def load(cls, path) -> "ControllerGain":
        doc = textio.read_document(path, "controller_gain")
        eigs = np.array(doc["closed_loop_eigs"]["re"]) + 1j * np.array(doc["closed_loop_eigs"]["im"])
        return cls(
            _as2d(doc["K"]),
            doc["method"],
            doc["spec"],
            eigs,
            None if doc.get("P") is None else _as2d(doc["P"]),
            doc.get("seed"),
            doc.get("info", {}),
        )


def closed_loop_eigs(F, D, K) -> np.ndarray:
    """Eigenvalues of ``F - D K`` sorted by decreasing modulus."""
    F, D, K = _as2d(F), _as2d(D), _as2d(K)
    vals = np.linalg.eigvals(F - D @ K)
    return vals[np.lexsort((-vals.imag, -np.abs(vals)))]


def _rank_deficient(M, tol=1e-10) -> bool:
    s = np.linalg.svd(M, compute_uv=False)
    return s[-1] <= tol * max(s[0], 1.0)


def check_stabilizable(F, D) -> None:
    """PBH test on every eigenvalue of ``F`` outside the open unit disc."""
    F, D = _as2d(F), _as2d(D)
    n = F.shape[0]
    for lam in np.linalg.eigvals(F):
        if abs(lam) >= 1 and _rank_deficient(np.hstack([lam * np.eye(n) - F, D])):
            raise NotStabilizableError(lam, f"eigenvalue {lam:.6g} of F is unstable and uncontrollable")


def riccati_map(P, F, D, Q, R) -> np.ndarray:
    """One value-iteration step ``F'PF - F'PD (R + D'PD)^{-1} D'PF + Q`` (symmetrized)."""
    PF = P @ F
    G = np.linalg.solve(R + D.T @ P @ D, D.T @ PF)
    out = F.T @ PF - PF.T @ D @ G + Q
    return 0.5 * (out + out.T)


def dare_residual(P, F, D, Q, R) -> float:
    """``|P - Riccati(P)|_max / (1 + |P|_max)``."""
    return float(np.abs(P - riccati_map(P, F, D, Q, R)).max() / (1.0 + np.abs(P).max()))


def _dare_doubling(F, D, Q, R, tol, maxiter=100):
    n = F.shape[0]
    A = F.copy()
    G = D @ np.linalg.solve(R, D.T)
    Hk = Q.copy()
    eye = np.eye(n)
    for _ in range(maxiter):
        W = np.linalg.inv(eye + G @ Hk)
        A_next = A @ W @ A
        G_next = G + A @ W @ G @ A.T
        H_next = Hk + A.T @ Hk @ W @ A
        done = np.abs(H_next - Hk).max() <= tol * (1 + np.abs(H_next).max())
        A, G, Hk = A_next, 0.5 * (G_next + G_next.T), 0.5 * (H_next + H_next.T)
        if done:
            return Hk
    raise ControlDesignError("doubling iteration for the DARE did not converge")


def solve_dare(F, D, spec: LqrSpec, tol: float = 1e-14, maxiter: int = 10_000) -> np.ndarray:
    """Stabilizing solution of the discrete algebraic Riccati equation.

    Value iteration from ``P_0 = Q`` until the max-norm update falls below
    ``tol (1 + |P|_max)``; falls back to the structured doubling algorithm
    when ``maxiter`` sweeps are not enough.
    """
    F, D = _as2d(F), _as2d(D)
    Q, R = spec.Q, spec.R
    if F.shape[0] != F.shape[1] or D.shape[0] != F.shape[0] or Q.shape != F.shape or R.shape[0] != D.shape[1]:
        raise ValueError("inconsistent shapes for F, D, Q, R")
    check_stabilizable(F, D)
    P = Q.copy()
    for it in range(maxiter):
        P_next = riccati_map(P, F, D, Q, R)
        if not np.all(np.isfinite(P_next)) or np.abs(P_next).max() > 1e12:
            raise ControlDesignError(f"Riccati iteration diverged after {it} steps")
        delta = np.abs(P_next - P).max()
        P = P_next
        if delta <= tol * (1 + np.abs(P).max()):
            break
    else:
        logger.info("value iteration not converged in %d steps; switching to doubling", maxiter)
        P = _dare_doubling(F, D, Q, R, tol)
    return P


def dlqr_gain(F, D, spec: LqrSpec, tol: float = 1e-14) -> ControllerGain:
    F, D = _as2d(F), _as2d(D)
    P = solve_dare(F, D, spec, tol=tol)
    K = np.linalg.solve(spec.R + D.T @ P @ D, D.T @ P @ F)
    eigs = closed_loop_eigs(F, D, K)
    if np.abs(eigs).max() >= 1:
        raise ControlDesignError(f"dLQR closed loop is not stable (spectral radius {np.abs(eigs).max():.6g})")
    return ControllerGain(
        K,
        "dlqr",
        {"Q": spec.Q, "R": spec.R},
        eigs,
        P=P,
        info={"dare_residual": dare_residual(P, F, D, spec.Q, spec.R)},
    )


def _real_block_diag(poles) -> np.ndarray:
    blocks = []
    i = 0
    while i < len(poles):
        p = poles[i]
        if p.imag != 0:
            blocks.append(np.array([[p.real, p.imag], [-p.imag, p.real]]))
            i += 2
        else:
            blocks.append(np.array([[p.real]]))
            i += 1
    return linalg.block_diag(*blocks)


def _normalize_poles(poles, F) -> np.ndarray:
    poles = np.asarray(poles, dtype=complex).ravel()
    if not np.allclose(np.sort_complex(poles), np.sort_complex(np.conj(poles)), atol=1e-12):
        raise ValueError("target poles must be closed under conjugation")
    # order as (real..., a+bi, a-bi, ...) so conjugates are adjacent
    real = np.sort(poles[np.abs(poles.imag) <= 1e-14].real).astype(complex)
    upper = poles[poles.imag > 1e-14]
    ordered = list(real)
    for p in sorted(upper, key=lambda c: (c.real, c.imag)):
        ordered += [p, np.conj(p)]
    poles = np.array(ordered)
    eigF = np.linalg.eigvals(F)
    for i in range(len(poles)):
        clash = np.min(np.abs(poles[i] - eigF)) < 1e-10 or np.any(np.abs(poles[i] - poles[:i]) < 1e-10)
        if clash:
            shift = 1e-8 if poles[i].imag == 0 else 1e-8 * (1 + 0j)
            warnings.warn(f"target pole {poles[i]} collides; perturbing by {shift}", stacklevel=3)
            poles[i] = poles[i] + shift
            if poles[i].imag != 0 and i + 1 < len(poles):
                poles[i + 1] = np.conj(poles[i])
    return poles


def pole_place(F, D, poles, rng_seed: int = 0, max_attempts: int = 10, cond_limit: float = 1e8) -> ControllerGain:
    """Assign the spectrum of ``F - D K`` by a Sylvester parametrization.

    With ``L`` a real block-diagonal matrix carrying the targets and ``G`` a
    random ``k x n`` matrix, solve ``F X - X L = D G`` and take
    ``K = G X^{-1}``, so that ``(F - D K) X = X L``.

    ``X`` holds the closed-loop eigenvectors, so of the ``max_attempts``
    draws the one with the best-conditioned (column-normalized) ``X`` is
    kept. This gives the least pole sensitivity and, in practice, a
    moderate gain.
    """
    F, D = _as2d(F), _as2d(D)
    n, k = D.shape
    poles = _normalize_poles(poles, F)
    if len(poles) != n:
        raise ValueError(f"need {n} target poles, got {len(poles)}")
    for p in poles:
        if _rank_deficient(np.hstack([p * np.eye(n) - F, D])):
            raise UncontrollablePoleError(f"(F, D) is not controllable at the target pole {p:.6g}")
    # an uncontrollable mode of F survives any feedback, so it must be one of the targets
    for lam in np.linalg.eigvals(F):
        if _rank_deficient(np.hstack([lam * np.eye(n) - F, D])) and np.min(np.abs(poles - lam)) > 1e-8:
            raise UncontrollablePoleError(f"eigenvalue {lam:.6g} of F is uncontrollable and not among the targets")
    L = _real_block_diag(poles)
    rng = np.random.default_rng(rng_seed)
    conds = []
    best = None
    for attempt in range(max_attempts):
        G = rng.standard_normal((k, n))
        X = linalg.solve_sylvester(F, -L, D @ G)
        if not np.all(np.isfinite(X)):
            conds.append(float("inf"))
            continue
        c = float(np.linalg.cond(X / np.linalg.norm(X, axis=0)))
        conds.append(c)
        if c <= cond_limit and (best is None or c < best[0]):
            best = (c, attempt, G, X)
    if best is None:
        raise ControlDesignError(f"pole placement ill-conditioned in all {max_attempts} attempts; cond(X) = {conds}")
    c, attempt, G, X = best
    K = np.linalg.solve(X.T, G.T).T
    eigs = closed_loop_eigs(F, D, K)
    return ControllerGain(
        K,
        "pole_placement",
        {"poles_re": poles.real, "poles_im": poles.imag},
        eigs,
        seed=rng_seed,
        info={
            "attempts": max_attempts,
            "chosen_attempt": attempt,
            "cond_X": c,
            "placement_error": placement_error(eigs, poles),
        },
    )


def placement_error(eigs, targets) -> float:
    """Multiset distance: max over optimally matched pairs of |eig - target|."""
    eigs = np.asarray(eigs, dtype=complex)
    targets = np.asarray(targets, dtype=complex)
    cost = np.abs(eigs[:, None] - targets[None, :])
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].max())
