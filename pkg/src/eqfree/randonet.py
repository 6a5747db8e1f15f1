"""Random-embedding branch/trunk operator network (RandONet).

The trunk embeds output locations with fixed random sigmoids, the branch
embeds sampled input functions with random Fourier features, and the only
trained quantity is the output matrix ``W`` in

    S[u](x_j) ~= sum_k sum_i T_k(x_j) W[k, i] B_i(u).

Fitting ``W`` is a bilinear least-squares problem solved by two decoupled
(regularized) pseudo-inverses, ``W = T^+ Y B^+``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit

from . import textio
from .plant import Grid, SnapshotDataset


class TrainingError(RuntimeError):
    pass


@dataclass
class TrunkParams:
    alpha: np.ndarray  # (N,) slopes, U[-a_U, a_U]
    beta: np.ndarray  # (N,) biases, beta = -alpha * center
    centers: np.ndarray  # (N,) inflection points inside the domain
    a_U: float

    @property
    def N(self) -> int:
        return len(self.alpha)


@dataclass
class BranchParams:
    alpha: np.ndarray  # (M_br, m) Gaussian weights with std eps_rff
    beta: np.ndarray  # (M_br,) phases in [0, 2 pi)
    eps_rff: float

    @property
    def M_br(self) -> int:
        return len(self.beta)


@dataclass(frozen=True)
class RegularizationSpec:
    """Tikhonov weight relative to the feature-matrix scale.

    Each least-squares solve minimizes ``|A X - Y|^2 + (mu |A|_F)^2 |X|^2``;
    ``mu = 0`` gives the plain (minimum-norm) pseudo-inverse.
    """

    mu: float = 1e-10

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be non-negative")


def init_embeddings(m: int, N: int, M_br: int, a_U: float, eps_rff: float, domain=(0.0, 1.0), seed: int = 0):
    """Draw the frozen trunk and branch parameters."""
    if min(m, N, M_br) < 1:
        raise ValueError("m, N and M_br must all be >= 1")
    if a_U < 0 or eps_rff <= 0:
        raise ValueError("need a_U >= 0 and eps_rff > 0")
    rng = np.random.default_rng(seed)
    alpha_tr = rng.uniform(-a_U, a_U, N)
    centers = rng.uniform(domain[0], domain[1], N)
    trunk = TrunkParams(alpha_tr, -alpha_tr * centers, centers, float(a_U))
    alpha_br = rng.normal(0.0, eps_rff, (M_br, m))
    beta_br = rng.uniform(0.0, 2 * np.pi, M_br)
    branch = BranchParams(alpha_br, beta_br, float(eps_rff))
    return trunk, branch


def featurize_trunk(trunk: TrunkParams, xs) -> np.ndarray:
    """Sigmoid trunk features, shape ``(len(xs), N)``."""
    xs = np.asarray(xs, dtype=float).reshape(-1)
    return expit(np.outer(xs, trunk.alpha) + trunk.beta)


def featurize_branch(branch: BranchParams, U) -> np.ndarray:
    """Random Fourier features of input functions; ``U`` is ``(s, m)``, result ``(M_br, s)``."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[1] != branch.alpha.shape[1]:
        raise ValueError(f"inputs have {U.shape[1]} sensors, branch expects {branch.alpha.shape[1]}")
    return np.sqrt(2.0 / branch.M_br) * np.cos(branch.alpha @ U.T + branch.beta[:, None])


def tikhonov_lstsq(A, Y, mu: float) -> np.ndarray:
    """Solve ``min |A X - Y|^2 + (mu |A|_F)^2 |X|^2`` by thin QR of the stacked matrix."""
    A = np.asarray(A, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if mu == 0:
        return linalg.lstsq(A, Y, lapack_driver="gelsd")[0]
    r, c = A.shape
    scale = np.linalg.norm(A)
    if scale == 0:
        raise TrainingError("feature matrix is identically zero (rank collapse)")
    stacked = np.vstack([A, (mu * scale) * np.eye(c)])
    Q, R = linalg.qr(stacked, mode="economic", check_finite=False)
    rhs = Q[:r].T @ Y
    return linalg.solve_triangular(R, rhs, check_finite=False)


@dataclass
class RandONetModel:
    trunk: TrunkParams
    branch: BranchParams
    W: np.ndarray  # (N, M_br)
    grid: Grid
    dt_report: float
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.shape != (self.trunk.N, self.branch.M_br):
            raise ValueError(f"W has shape {self.W.shape}, expected {(self.trunk.N, self.branch.M_br)}")
        self._T = featurize_trunk(self.trunk, self.grid.nodes)
        self._TW = self._T @ self.W

    @property
    def T(self) -> np.ndarray:
        return self._T

    def __call__(self, u):
        return predict(self, u)

    def to_dict(self) -> dict:
        return {
            "grid": asdict(self.grid),
            "dt_report": self.dt_report,
            "trunk": {
                "N": self.trunk.N,
                "a_U": self.trunk.a_U,
                "alpha": self.trunk.alpha,
                "beta": self.trunk.beta,
                "centers": self.trunk.centers,
            },
            "branch": {
                "M_br": self.branch.M_br,
                "eps_rff": self.branch.eps_rff,
                "alpha": self.branch.alpha,
                "beta": self.branch.beta,
            },
            "W": self.W,
            "training_meta": self.training_meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RandONetModel":
        t, b = doc["trunk"], doc["branch"]
        trunk = TrunkParams(
            np.array(t["alpha"], dtype=float),
            np.array(t["beta"], dtype=float),
            np.array(t["centers"], dtype=float),
            float(t["a_U"]),
        )
        m = doc["grid"]["m"]
        branch = BranchParams(
            np.array(b["alpha"], dtype=float).reshape(int(b["M_br"]), m),
            np.array(b["beta"], dtype=float),
            float(b["eps_rff"]),
        )
        if trunk.N != int(t["N"]):
            raise ValueError("trunk size does not match its arrays")
        return cls(
            trunk,
            branch,
            np.array(doc["W"], dtype=float),
            Grid(**doc["grid"]),
            float(doc["dt_report"]),
            doc.get("training_meta", {}),
        )


def regularized_objective(W, T, B, Y, mu: float) -> float:
    """Objective minimized exactly by the decoupled Tikhonov solution.

    With ``a = mu |T|_F`` and ``b = mu |B|_F`` the product of the two
    regularized pseudo-inverses is the minimizer of
    ``|T W B - Y|^2 + b^2 |T W|^2 + a^2 |W B|^2 + a^2 b^2 |W|^2``.
    """
    a = mu * np.linalg.norm(T)
    b = mu * np.linalg.norm(B)
    TW = T @ W
    WB = W @ B
    return float(
        np.sum((TW @ B - Y) ** 2) + b**2 * np.sum(TW**2) + a**2 * np.sum(WB**2) + (a * b) ** 2 * np.sum(W**2)
    )


def fit_output_weights(T, B, Y, reg: RegularizationSpec) -> np.ndarray:
    """``W = T^+ Y B^+`` with both pseudo-inverses Tikhonov-regularized."""
    # Y B^+ solves  B^T Z^T = Y^T  in the least-squares sense
    Z = tikhonov_lstsq(B.T, Y.T, reg.mu).T
    return tikhonov_lstsq(T, Z, reg.mu)


def train_bilinear_lsq(
    dataset: SnapshotDataset, trunk: TrunkParams, branch: BranchParams, reg: RegularizationSpec | None = None
) -> RandONetModel:
    reg = reg or RegularizationSpec()
    X, Y = dataset.inputs, dataset.targets
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("dataset contains non-finite values")
    if X.shape[1] != branch.alpha.shape[1]:
        raise ValueError("dataset grid does not match the branch sensor count")
    T = featurize_trunk(trunk, dataset.grid.nodes)
    B = featurize_branch(branch, X)
    for name, F in (("trunk", T), ("branch", B)):
        if not np.any(F):
            raise TrainingError(f"{name} features are all zero; cond=inf")
    # a per-pair weight scales that pair's column on both sides of T W B = Y
    w = dataset.weights
    weighted = not np.all(w == 1.0)
    W = fit_output_weights(T, B * w if weighted else B, (Y * w[:, None]).T if weighted else Y.T, reg)
    if not np.all(np.isfinite(W)):
        raise TrainingError(
            f"non-finite output weights (cond(T)={np.linalg.cond(T):.3g}); increase the regularization"
        )
    fit = T @ W @ B
    residual = float(np.linalg.norm((fit - Y.T) * w) / np.linalg.norm(Y.T * w))
    meta = {
        "regularization_mu": reg.mu,
        "solver": "tikhonov-qr" if reg.mu > 0 else "gelsd-pinv",
        "input_normalization": "none",
        "n_samples": len(X),
        "fit_residual": residual,
        "weighted_pairs": int(np.count_nonzero(w != 1.0)),
        "dataset_seed": dataset.seed,
    }
    return RandONetModel(trunk, branch, W, dataset.grid, dataset.dt_report, meta)


def predict(model: RandONetModel, u) -> np.ndarray:
    """One surrogate step; accepts one field ``(m,)`` or a batch ``(s, m)``."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != model.grid.m:
        raise ValueError(f"field has {u.shape[-1]} nodes but the model expects {model.grid.m}")
    out = (model._TW @ featurize_branch(model.branch, u.reshape(-1, model.grid.m))).T
    out[:, 0] = 0.0
    out[:, -1] = 0.0
    return out.reshape(u.shape)


def relative_errors(model: RandONetModel, inputs, targets) -> np.ndarray:
    pred = predict(model, inputs)
    return np.linalg.norm(pred - targets, axis=1) / np.linalg.norm(targets, axis=1)


def save_model(model: RandONetModel, path):
    return textio.write_document(path, "randonet_model", model.to_dict())


def load_model(path) -> RandONetModel:
    doc = textio.read_document(path, "randonet_model")
    try:
        return RandONetModel.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise textio.ArtifactFormatError(f"{path}: malformed model ({exc})") from exc
