"""Reduced open-loop model around a coarse fixed point.

Given a timestepper ``S`` with fixed point ``u_ss``, build

    y_n = V^T (u_n - u_ss),    y_{n+1} = F y_n + D z_n,

where ``V`` spans the leading (slow) eigendirections of the Jacobian of
``S`` found by Arnoldi, ``F = V^T J V`` and ``D`` maps actuator amplitudes
into slow coordinates through the actuator derivative matrix ``H``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import textio
from .krylov import ArnoldiResult, arnoldi, jacobian_operator, jvp
from .plant import ActuatorSet, PlantConfig, controlled_fd_step, fd_timestepper

logger = logging.getLogger(__name__)

D_MODES = ("consistent", "paper_vf")


@dataclass
class SlowBasis:
    V: np.ndarray
    ritz_values: np.ndarray  # the Ritz values whose vectors built V
    arnoldi: ArnoldiResult
    M_slow: int
    expanded: bool = False


def slow_basis(stepper, u_ss, M_slow: int, m_k: int, v0=None, seed: int = 0, eps=None) -> SlowBasis:
    """Orthonormal basis of the ``M_slow`` leading Ritz directions of ``J = dS/du`` at ``u_ss``.

    A complex pair contributes its real and imaginary parts. If the cutoff
    splits a pair, ``M_slow`` grows by one.
    """
    u_ss = np.asarray(u_ss, dtype=float)
    if not 1 <= M_slow <= m_k:
        raise ValueError(f"need 1 <= M_slow <= m_k, got M_slow={M_slow}, m_k={m_k}")
    if v0 is None:
        v0 = np.random.default_rng(seed).standard_normal(u_ss.size)
    J = jacobian_operator(stepper, u_ss, eps=eps)
    res = arnoldi(J, v0, m_k)
    return _basis_from_ritz(res, M_slow)


def _basis_from_ritz(res: ArnoldiResult, M_slow: int) -> SlowBasis:
    vals, vecs = res.ritz_values, res.ritz_vectors
    if M_slow > len(vals):
        raise ValueError(f"only {len(vals)} Ritz pairs available, {M_slow} requested")
    expanded = False
    if M_slow < len(vals) and vals[M_slow - 1].imag != 0 and np.isclose(vals[M_slow], np.conj(vals[M_slow - 1])):
        M_slow += 1
        expanded = True
        warnings.warn(f"complex pair straddles the slow cutoff; using M_slow={M_slow}", stacklevel=3)
    cols = []
    i = 0
    while i < M_slow:
        v = vecs[:, i]
        if vals[i].imag != 0:
            cols += [v.real, v.imag]
            i += 2
        else:
            cols.append(v.real)
            i += 1
    V, _ = np.linalg.qr(np.column_stack(cols))
    bad = res.ritz_residuals[:M_slow] > 1e-4
    if np.any(bad):
        warnings.warn(
            f"Ritz residuals {res.ritz_residuals[:M_slow][bad]} exceed 1e-4; the slow subspace is inaccurate",
            stacklevel=3,
        )
    return SlowBasis(V, vals[:M_slow], res, M_slow, expanded)


def reduced_F(stepper, u_ss, V, eps=None) -> np.ndarray:
    """``F = V^T J V`` with one JVP per basis column."""
    u_ss = np.asarray(u_ss, dtype=float)
    s_u = np.asarray(stepper(u_ss), dtype=float)
    JV = np.column_stack([jvp(stepper, u_ss, V[:, j], eps=eps, s_u=s_u) for j in range(V.shape[1])])
    return V.T @ JV


def actuator_jacobian_H(plant_kind: str, u_ss, act: ActuatorSet, cfg: PlantConfig | None = None, eps: float = 1e-5):
    """Derivative of one controlled outer step with respect to each actuator amplitude.

    For the FD plant this is a forward difference of the controlled step; for
    the surrogate the actuation is additive (``S(u) + B z``) so ``H = B``.
    """
    if plant_kind == "surrogate":
        return act.B
    if plant_kind != "fd":
        raise ValueError(f"unknown plant kind {plant_kind!r}")
    if cfg is None:
        raise ValueError("the FD plant needs its PlantConfig")
    if not eps > 0 or eps < 1e-300:
        raise ValueError(f"actuator perturbation eps={eps} underflows")
    u_ss = np.asarray(u_ss, dtype=float)
    base = fd_timestepper(u_ss, cfg)
    H = np.empty((u_ss.size, act.k))
    for i in range(act.k):
        z = np.zeros(act.k)
        z[i] = eps
        H[:, i] = (controlled_fd_step(u_ss, z, act, cfg) - base) / eps
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("non-finite actuator derivative")
    return H


def real_eigenvectors(F) -> np.ndarray:
    """Eigenvector matrix of ``F`` in real form (Re/Im columns for complex pairs), ordered by |eigenvalue|."""
    vals, vecs = np.linalg.eig(F)
    order = np.lexsort((-vals.imag, -np.abs(vals)))
    vals, vecs = vals[order], vecs[:, order]
    cols = []
    i = 0
    while i < len(vals):
        if vals[i].imag != 0:
            cols += [vecs[:, i].real, vecs[:, i].imag]
            i += 2
        else:
            cols.append(vecs[:, i].real)
            i += 1
    return np.column_stack(cols)


def reduced_D(V, H, F=None, mode: str = "consistent") -> np.ndarray:
    """Actuator influence on slow coordinates.

    ``consistent``: ``(V^T V)^{-1} V^T H``, the input map of ``y = V^T (u - u_ss)``.
    ``paper_vf``: the same, left-multiplied by the real eigenvector matrix of ``F``.
    """
    if mode not in D_MODES:
        raise ValueError(f"mode must be one of {D_MODES}")
    D = np.linalg.solve(V.T @ V, V.T @ H)
    if mode == "consistent":
        return D
    if F is None:
        raise ValueError("paper_vf mode needs F")
    VF = real_eigenvectors(F)
    if np.linalg.cond(VF) > 1e12:
        warnings.warn("eigenvector matrix of F is (nearly) singular; falling back to consistent D", stacklevel=2)
        return D
    return VF @ D


@dataclass
class ReducedModel:
    u_ss: np.ndarray
    V: np.ndarray
    F: np.ndarray
    H: np.ndarray
    D: np.ndarray
    d_mode: str = "consistent"
    provenance: dict = field(default_factory=dict)

    @property
    def M_slow(self) -> int:
        return self.V.shape[1]

    def save(self, path):
        return textio.write_document(
            path,
            "reduced_model",
            {
                "u_ss": self.u_ss,
                "V_M": self.V,
                "F": self.F,
                "H": self.H,
                "D": self.D,
                "d_mode": self.d_mode,
                "provenance": self.provenance,
            },
        )

    @classmethod
    def load(cls, path) -> "ReducedModel":
        doc = textio.read_document(path, "reduced_model")
        try:
            return cls(
                np.array(doc["u_ss"], dtype=float),
                np.array(doc["V_M"], dtype=float),
                np.array(doc["F"], dtype=float),
                np.array(doc["H"], dtype=float),
                np.array(doc["D"], dtype=float),
                doc["d_mode"],
                doc.get("provenance", {}),
            )
        except KeyError as exc:
            raise textio.ArtifactFormatError(f"{path}: missing field {exc}") from exc


def project(u, model: ReducedModel) -> np.ndarray:
    """Slow coordinates ``V^T (u - u_ss)``; works on a single field or a batch."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != model.u_ss.size:
        raise ValueError(f"field has {u.shape[-1]} nodes, the reduced model {model.u_ss.size}")
    return (u - model.u_ss) @ model.V


def build_reduced_model(
    stepper,
    u_ss,
    H,
    M_slow: int = 5,
    m_k: int = 40,
    d_mode: str = "consistent",
    seed: int = 0,
    provenance: dict | None = None,
) -> tuple[ReducedModel, SlowBasis]:
    basis = slow_basis(stepper, u_ss, M_slow, m_k, seed=seed)
    F = reduced_F(stepper, u_ss, basis.V)
    D = reduced_D(basis.V, H, F, d_mode)
    prov = dict(provenance or {})
    prov.update(
        {
            "m_k": m_k,
            "M_slow_requested": M_slow,
            "M_slow": basis.M_slow,
            "arnoldi_seed": seed,
            "ritz_values_re": basis.arnoldi.ritz_values.real,
            "ritz_values_im": basis.arnoldi.ritz_values.imag,
        }
    )
    return ReducedModel(np.asarray(u_ss, dtype=float), basis.V, F, np.asarray(H, dtype=float), D, d_mode, prov), basis
