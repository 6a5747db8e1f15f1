"""Finite-difference plant for the controlled parabolic Bratu equation.

    u_t = u_xx + lam * exp(u) + b(x) . z(t),   x in [x_lo, x_hi],   u = 0 on the boundary

Space is discretized by the 3-point second difference on an equispaced grid,
time by forward Euler substeps of length ``dt_inner`` grouped into outer
steps of length ``dt_report``. All field-valued functions accept either a
single field of shape ``(m,)`` or a batch of shape ``(s, m)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from . import textio

logger = logging.getLogger(__name__)

#: tangency point of cosh(t) = c*t, i.e. the root of t*tanh(t) = 1
THETA_FOLD = optimize.brentq(lambda t: t * math.tanh(t) - 1.0, 0.5, 2.0, xtol=1e-15, rtol=1e-15)
#: saddle-node value of lam where the two steady branches merge (~3.513830719)
LAMBDA_CRITICAL = 8.0 * THETA_FOLD**2 / math.cosh(THETA_FOLD) ** 2


class PlantError(ValueError):
    """Invalid plant input: non-finite state, grid mismatch, unstable step size."""


class NoSteadyStateError(PlantError):
    pass


@dataclass(frozen=True)
class Grid:
    m: int = 51
    x_lo: float = 0.0
    x_hi: float = 1.0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 3:
            raise PlantError(f"grid needs at least 3 nodes, got m={self.m}")
        if not self.x_hi > self.x_lo:
            raise PlantError(f"empty domain [{self.x_lo}, {self.x_hi}]")

    @property
    def h(self) -> float:
        return (self.x_hi - self.x_lo) / (self.m - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.m)


@dataclass(frozen=True)
class PlantConfig:
    lam: float = 2.0
    dt_report: float = 1e-3
    dt_inner: float = 1e-4
    grid: Grid = field(default_factory=Grid)

    def __post_init__(self):
        if not self.lam > 0:
            raise PlantError(f"lambda must be positive, got {self.lam}")
        if not 0 < self.dt_inner <= self.dt_report:
            raise PlantError("need 0 < dt_inner <= dt_report")
        ratio = self.dt_report / self.dt_inner
        if abs(ratio - round(ratio)) > 1e-9:
            raise PlantError(f"dt_report/dt_inner = {ratio} is not an integer")
        check_stability(self.dt_inner, self.grid)

    @property
    def substeps(self) -> int:
        return int(round(self.dt_report / self.dt_inner))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlantConfig":
        d = dict(d)
        d["grid"] = Grid(**d.get("grid", {}))
        return cls(**d)


def check_stability(dt_inner: float, grid: Grid) -> None:
    bound = grid.h**2 / 2
    if dt_inner > bound * (1 + 1e-12):
        raise PlantError(
            f"explicit Euler unstable: dt_inner={dt_inner:g} exceeds h^2/2={bound:g} (h={grid.h:g})"
        )


@dataclass(frozen=True)
class ActuatorSet:
    """Gaussian actuators b_i(x) = exp(-(x - c_i)^2 / (2 sigma^2)) sampled on a grid.

    Boundary rows of ``B`` are zero so actuation never touches the Dirichlet
    nodes.
    """

    centers: tuple = (0.25, 0.5, 0.75)
    sigma: float = 0.05
    grid: Grid = field(default_factory=Grid)

    def __post_init__(self):
        if not self.sigma > 0:
            raise PlantError(f"actuator width must be positive, got {self.sigma}")
        object.__setattr__(self, "centers", tuple(float(c) for c in self.centers))

    @property
    def k(self) -> int:
        return len(self.centers)

    @property
    def B(self) -> np.ndarray:
        x = self.grid.nodes[:, None]
        c = np.asarray(self.centers)[None, :]
        B = np.exp(-((x - c) ** 2) / (2 * self.sigma**2))
        B[0, :] = 0.0
        B[-1, :] = 0.0
        return B


def _check_field(u, grid: Grid) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != grid.m:
        raise PlantError(f"field has {u.shape[-1]} nodes but the grid has {grid.m}")
    if not np.all(np.isfinite(u)):
        raise PlantError("field contains non-finite values")
    return u


def bratu_rhs(u, lam: float, grid: Grid) -> np.ndarray:
    """Discrete right-hand side u_xx + lam*exp(u); zero at the boundary nodes."""
    u = _check_field(u, grid)
    if not lam > 0:
        raise PlantError(f"lambda must be positive, got {lam}")
    out = np.zeros_like(u)
    inner = u[..., 1:-1]
    out[..., 1:-1] = (u[..., :-2] - 2.0 * inner + u[..., 2:]) / grid.h**2 + lam * np.exp(inner)
    return out


def _euler(u, cfg: PlantConfig, forcing) -> np.ndarray:
    out = u + cfg.dt_inner * (bratu_rhs(u, cfg.lam, cfg.grid) + forcing)
    out[..., 0] = 0.0
    out[..., -1] = 0.0
    return out


def fd_step(u, cfg: PlantConfig, forcing=None) -> np.ndarray:
    """One forward-Euler substep of length ``cfg.dt_inner``."""
    check_stability(cfg.dt_inner, cfg.grid)
    u = _check_field(u, cfg.grid)
    if forcing is None:
        forcing = 0.0
    else:
        forcing = _check_field(forcing, cfg.grid)
    return _euler(u, cfg, forcing)


def fd_timestepper(u, cfg: PlantConfig) -> np.ndarray:
    """Uncontrolled reference solution operator over one outer step ``dt_report``."""
    check_stability(cfg.dt_inner, cfg.grid)
    u = _check_field(u, cfg.grid)
    for _ in range(cfg.substeps):
        u = _euler(u, cfg, 0.0)
    return u


def controlled_fd_step(u, z, act: ActuatorSet, cfg: PlantConfig) -> np.ndarray:
    """Outer step with forcing ``B @ z`` held constant over every substep (zero-order hold)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != act.k:
        raise PlantError(f"control has {z.shape[-1]} entries but there are {act.k} actuators")
    if not np.all(np.isfinite(z)):
        raise PlantError("control contains non-finite values")
    if act.grid != cfg.grid:
        raise PlantError("actuators and plant live on different grids")
    check_stability(cfg.dt_inner, cfg.grid)
    u = _check_field(u, cfg.grid)
    forcing = z @ act.B.T
    for _ in range(cfg.substeps):
        u = _euler(u, cfg, forcing)
    return u


def analytic_steady_state(lam: float, branch: str, grid: Grid) -> tuple[float, np.ndarray]:
    """Closed-form steady state u(x) = 2 ln(cosh t / cosh(t (1 - 2x))).

    ``t`` solves cosh t = 4 t / sqrt(2 lam); ``branch='lower'`` picks the
    smaller root, ``'upper'`` the larger one. The closed form is written for
    the unit interval and is evaluated in the normalized coordinate.
    """
    if branch not in ("lower", "upper"):
        raise ValueError(f"branch must be 'lower' or 'upper', got {branch!r}")
    if not 0 < lam < LAMBDA_CRITICAL:
        raise NoSteadyStateError(
            f"no steady state for lambda={lam}: need 0 < lambda < {LAMBDA_CRITICAL:.9f}"
        )
    slope = 4.0 / math.sqrt(2.0 * lam)

    def g(t):
        return math.cosh(t) - slope * t

    lo, hi = (1e-6, THETA_FOLD) if branch == "lower" else (THETA_FOLD, 10.0)
    if g(lo) * g(hi) > 0:
        raise RuntimeError(f"bisection bracket [{lo}, {hi}] does not contain a root")
    theta = optimize.bisect(g, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    s = (grid.nodes - grid.x_lo) / (grid.x_hi - grid.x_lo)
    u = 2.0 * np.log(math.cosh(theta) / np.cosh(theta * (1.0 - 2.0 * s)))
    u[0] = 0.0
    u[-1] = 0.0
    return theta, u


def initial_perturbation(u_ss, grid: Grid) -> np.ndarray:
    """u_ss * (1.2 + 0.4 sin(10 pi x) + 0.4 exp(x))."""
    u_ss = _check_field(u_ss, grid)
    x = grid.nodes
    u0 = u_ss * (1.2 + 0.4 * np.sin(10 * np.pi * x) + 0.4 * np.exp(x))
    u0[..., 0] = 0.0
    u0[..., -1] = 0.0
    return u0


def field_to_csv(path, u, grid: Grid):
    u = _check_field(u, grid)
    return textio.write_csv(path, ["x", "u"], zip(grid.nodes, u))


def field_from_csv(path) -> tuple[np.ndarray, np.ndarray]:
    header, data = textio.read_csv(path)
    if header != ["x", "u"]:
        raise textio.ArtifactFormatError(f"{path}: expected header x,u, got {','.join(header)}")
    return data[:, 0], data[:, 1]


# --------------------------------------------------------------------------
# training data


@dataclass(frozen=True)
class DataGenSpec:
    """Sampling recipe for uncontrolled snapshot pairs.

    Initial conditions are ``a * u_upper(x) + sum_j c_j sin(j pi x)`` with
    ``a ~ U[amp_lo, amp_hi]`` and ``c_j ~ U[-coef_scale, coef_scale] / j``.
    Trajectories whose sup-norm leaves ``retain_bound`` are heading for
    finite-time blow-up; they are truncated at that point, flagged, and
    replacement trajectories are drawn until ``n_trajectories`` complete ones
    exist.

    On top of the trajectory pairs, ``augment_pairs`` extra inputs are made
    by adding ``sum_j d_j sin(j pi x)`` over every interior mode, with
    ``d_j ~ N(0, augment_amplitude^2) / j``, to randomly chosen trajectory
    states. Burn-in strips high-frequency content from the trajectories, so
    without these pairs the operator never sees off-manifold directions and
    its Jacobian there is unconstrained.

    Finally ``neighborhood_pairs`` single-step pairs sample a wide region
    around the upper steady state, ``u_upper + s w`` with ``s ~ U[0,
    neighborhood_scale]`` and ``w`` a multiplicative modal perturbation of
    ``u_upper`` plus a few localized Gaussian bumps. Most of these states
    escape within a few steps, so trajectories cannot cover them; feedback
    transients pass through exactly this region. They enter the fit with
    weight ``neighborhood_weight`` so that they shape the operator far from
    equilibrium without costing accuracy near it.

    ``local_pairs`` more pairs (full weight) sit close to the upper steady
    state: ``u_upper + s w`` with ``log10 s ~ U[log10 local_scale_lo,
    log10 local_scale_hi]`` and ``w`` a random sine series (``1/j`` decay)
    scaled to unit sup-norm. They pin down the fixed point and the Jacobian
    there.
    """

    n_trajectories: int = 200
    steps: int = 100
    burn_in: int = 10
    amp_lo: float = 0.0
    amp_hi: float = 1.3
    n_modes: int = 8
    coef_scale: float = 0.5
    retain_bound: float = 6.0
    overflow_guard: float = 1e3
    augment_pairs: int = 10000
    augment_amplitude: float = 0.01
    neighborhood_pairs: int = 10000
    neighborhood_modes: int = 16
    neighborhood_scale: float = 1.0
    neighborhood_bumps: int = 3
    neighborhood_bump_width: float = 0.05
    neighborhood_bump_amplitude: float = 3.0
    neighborhood_bound: float = 8.0
    neighborhood_weight: float = 1e-4
    local_pairs: int = 5000
    local_scale_lo: float = 1e-4
    local_scale_hi: float = 1e-1
    max_attempts: int = 2000
    verify_pairs: int = 16

    def __post_init__(self):
        if self.n_trajectories < 1 or self.steps < 1 or self.burn_in < 0:
            raise ValueError("need n_trajectories >= 1, steps >= 1, burn_in >= 0")
        if max(self.retain_bound, self.neighborhood_bound) > self.overflow_guard:
            raise ValueError("retain_bound and neighborhood_bound must not exceed overflow_guard")
        if not 0 < self.local_scale_lo <= self.local_scale_hi:
            raise ValueError("need 0 < local_scale_lo <= local_scale_hi")
        if min(self.neighborhood_pairs, self.augment_pairs, self.local_pairs) < 0:
            raise ValueError("pair counts must be non-negative")
        if not 0 < self.neighborhood_weight <= 1:
            raise ValueError("neighborhood_weight must lie in (0, 1]")


@dataclass
class SnapshotDataset:
    inputs: np.ndarray
    targets: np.ndarray
    dt_report: float
    grid: Grid
    seed: int
    provenance: dict = field(default_factory=dict)
    weights: np.ndarray | None = None  # per-pair least-squares weights; ones if None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if self.inputs.shape != self.targets.shape or len(self.inputs) < 1:
            raise ValueError("inputs and targets must be equally many (and at least one) fields")
        if self.weights is None:
            self.weights = np.ones(len(self.inputs))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.shape != (len(self.inputs),) or np.any(self.weights <= 0):
            raise ValueError("weights must be positive, one per pair")
        if self.inputs.shape[1] != self.grid.m:
            raise ValueError("dataset fields do not match the grid")

    def __len__(self):
        return len(self.inputs)

    def save(self, path):
        return textio.write_document(
            path,
            "snapshot_dataset",
            {
                "grid": asdict(self.grid),
                "dt_report": self.dt_report,
                "seed": self.seed,
                "provenance": self.provenance,
                "inputs": self.inputs,
                "targets": self.targets,
                "weights": self.weights,
            },
        )

    @classmethod
    def load(cls, path) -> "SnapshotDataset":
        doc = textio.read_document(path, "snapshot_dataset")
        try:
            return cls(
                inputs=np.array(doc["inputs"], dtype=float),
                targets=np.array(doc["targets"], dtype=float),
                dt_report=float(doc["dt_report"]),
                grid=Grid(**doc["grid"]),
                seed=int(doc["seed"]),
                provenance=doc.get("provenance", {}),
                weights=doc.get("weights"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise textio.ArtifactFormatError(f"{path}: malformed dataset ({exc})") from exc


def _draw_initial_condition(rng, u_upper, x, gen: DataGenSpec) -> np.ndarray:
    a = rng.uniform(gen.amp_lo, gen.amp_hi)
    j = np.arange(1, gen.n_modes + 1)
    c = rng.uniform(-gen.coef_scale, gen.coef_scale, gen.n_modes) / j
    u0 = a * u_upper + c @ np.sin(np.outer(j, np.pi * (x - x[0]) / (x[-1] - x[0])))
    u0[0] = 0.0
    u0[-1] = 0.0
    return u0


def _run_trajectories(U, cfg: PlantConfig, gen: DataGenSpec):
    """Advance a batch of initial conditions; returns per-trajectory pair lists and status."""
    s = len(U)
    alive = np.ones(s, dtype=bool)
    status = ["complete"] * s
    pairs = [[] for _ in range(s)]
    total = gen.burn_in + gen.steps
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(total):
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            V = U[idx].copy()
            for _ in range(cfg.substeps):
                V = V + cfg.dt_inner * _raw_rhs(V, cfg)
                V[:, 0] = 0.0
                V[:, -1] = 0.0
            sup = np.abs(V).max(axis=1)
            for local, t in enumerate(idx):
                if not np.isfinite(sup[local]) or sup[local] > gen.overflow_guard:
                    alive[t] = False
                    status[t] = "diverged"
                elif sup[local] > gen.retain_bound:
                    alive[t] = False
                    status[t] = "escaped"
                elif n >= gen.burn_in:
                    pairs[t].append((U[t].copy(), V[local]))
            U[idx] = np.where(np.isfinite(V), V, 0.0)
    return pairs, status


def _raw_rhs(u, cfg: PlantConfig):
    # unchecked variant for data generation, where escaping rows are expected
    out = np.zeros_like(u)
    out[..., 1:-1] = (u[..., :-2] - 2.0 * u[..., 1:-1] + u[..., 2:]) / cfg.grid.h**2 + cfg.lam * np.exp(
        u[..., 1:-1]
    )
    return out


def _augment(states, cfg: PlantConfig, gen: DataGenSpec, seed: int):
    rng = np.random.default_rng([seed, 2**31 - 2])
    m = cfg.grid.m
    x = cfg.grid.nodes
    j = np.arange(1, m - 1)
    modes = np.sin(np.outer(j, np.pi * (x - x[0]) / (x[-1] - x[0])))
    pick = rng.choice(len(states), size=gen.augment_pairs, replace=len(states) < gen.augment_pairs)
    coef = rng.standard_normal((gen.augment_pairs, j.size)) * gen.augment_amplitude / j
    U = states[pick] + coef @ modes
    U[:, 0] = 0.0
    U[:, -1] = 0.0
    V = fd_timestepper(U, cfg)
    keep = (np.abs(U).max(axis=1) <= gen.retain_bound) & (np.abs(V).max(axis=1) <= gen.retain_bound)
    return U[keep], V[keep]


def _step_unchecked(U, cfg: PlantConfig):
    V = U.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.substeps):
            V = V + cfg.dt_inner * _raw_rhs(V, cfg)
            V[:, 0] = 0.0
            V[:, -1] = 0.0
    return V


def _neighborhood(u_upper, cfg: PlantConfig, gen: DataGenSpec, seed: int):
    rng = np.random.default_rng([seed, 2**31 - 3])
    n = gen.neighborhood_pairs
    x = cfg.grid.nodes
    xi = (x - x[0]) / (x[-1] - x[0])
    j = np.arange(1, gen.neighborhood_modes + 1)
    modes = np.sin(np.outer(j, np.pi * xi))
    s = rng.uniform(0.0, gen.neighborhood_scale, (n, 1))
    offset = rng.uniform(-1, 1, (n, 1)) + rng.uniform(-1, 1, (n, 1)) * (2 * xi - 1)
    w = u_upper * (offset + (rng.uniform(-1, 1, (n, j.size)) / np.sqrt(j)) @ modes)
    centers = rng.uniform(0.1, 0.9, (n, gen.neighborhood_bumps))
    amps = rng.uniform(-1, 1, (n, gen.neighborhood_bumps)) * gen.neighborhood_bump_amplitude
    bumps = np.exp(-((xi[None, None, :] - centers[..., None]) ** 2) / (2 * gen.neighborhood_bump_width**2))
    w = w + np.einsum("nb,nbx->nx", amps, bumps)
    U = u_upper + s * w
    U[:, 0] = 0.0
    U[:, -1] = 0.0
    V = _step_unchecked(U, cfg)
    keep = (np.abs(U).max(axis=1) <= gen.neighborhood_bound) & np.all(np.isfinite(V), axis=1)
    keep &= np.abs(np.where(np.isfinite(V), V, np.inf)).max(axis=1) <= gen.neighborhood_bound
    return U[keep], V[keep]


def _local(u_upper, cfg: PlantConfig, gen: DataGenSpec, seed: int):
    rng = np.random.default_rng([seed, 2**31 - 4])
    x = cfg.grid.nodes
    j = np.arange(1, cfg.grid.m - 1)
    modes = np.sin(np.outer(j, np.pi * (x - x[0]) / (x[-1] - x[0])))
    s = 10.0 ** rng.uniform(np.log10(gen.local_scale_lo), np.log10(gen.local_scale_hi), (gen.local_pairs, 1))
    w = (rng.standard_normal((gen.local_pairs, j.size)) / j) @ modes
    w /= np.abs(w).max(axis=1, keepdims=True)
    U = u_upper + s * w
    U[:, 0] = 0.0
    U[:, -1] = 0.0
    return U, fd_timestepper(U, cfg)


def generate_training_pairs(
    cfg: PlantConfig, gen: DataGenSpec, seed: int, initial_conditions=None, batch: int = 64
) -> SnapshotDataset:
    """Snapshot pairs ``(u_n, u_{n+1})`` from uncontrolled FD trajectories.

    Trajectory ``i`` draws its initial condition from its own generator seeded
    with ``(seed, i)``, so the result does not depend on ``batch``. Pairs are
    assembled in trajectory order. Passing ``initial_conditions`` replaces the
    random family by the given fields (one trajectory each, no replacement).
    """
    _, u_upper = analytic_steady_state(cfg.lam, "upper", cfg.grid)
    x = cfg.grid.nodes
    if initial_conditions is not None:
        given = _check_field(np.atleast_2d(initial_conditions), cfg.grid)
        gen = DataGenSpec(**{**asdict(gen), "n_trajectories": len(given), "max_attempts": len(given)})
    inputs, targets, flags = [], [], []
    complete = 0
    next_index = 0
    while complete < gen.n_trajectories:
        if initial_conditions is not None and next_index >= len(given):
            break
        if next_index >= gen.max_attempts:
            raise RuntimeError(
                f"only {complete} of {gen.n_trajectories} trajectories stayed bounded "
                f"after {gen.max_attempts} attempts"
            )
        ids = range(next_index, min(next_index + batch, gen.max_attempts))
        if initial_conditions is not None:
            U = given[list(ids)].copy()
        else:
            U = np.array([_draw_initial_condition(np.random.default_rng([seed, i]), u_upper, x, gen) for i in ids])
        pairs, status = _run_trajectories(U, cfg, gen)
        for i, p, st in zip(ids, pairs, status):
            if complete >= gen.n_trajectories:
                break
            next_index = i + 1
            if st == "complete" or initial_conditions is not None:
                complete += st == "complete"
            else:
                flags.append({"trajectory": i, "status": st, "pairs_kept": len(p)})
            for a, b in p:
                inputs.append(a)
                targets.append(b)
    if not inputs:
        raise RuntimeError("data generation produced no pairs")
    inputs = np.array(inputs)
    targets = np.array(targets)
    n_trajectory_pairs = len(inputs)
    if gen.augment_pairs > 0 and initial_conditions is None:
        aug_in, aug_out = _augment(inputs, cfg, gen, seed)
        inputs = np.vstack([inputs, aug_in])
        targets = np.vstack([targets, aug_out])
    n_local = 0
    if gen.local_pairs > 0 and initial_conditions is None:
        loc_in, loc_out = _local(u_upper, cfg, gen, seed)
        n_local = len(loc_in)
        inputs = np.vstack([inputs, loc_in])
        targets = np.vstack([targets, loc_out])
    weights = np.ones(len(inputs))
    n_neighborhood = 0
    if gen.neighborhood_pairs > 0 and initial_conditions is None:
        nb_in, nb_out = _neighborhood(u_upper, cfg, gen, seed)
        n_neighborhood = len(nb_in)
        inputs = np.vstack([inputs, nb_in])
        targets = np.vstack([targets, nb_out])
        weights = np.concatenate([weights, np.full(n_neighborhood, gen.neighborhood_weight)])
    # every retained pair must be a genuine plant step; spot-check some
    rng = np.random.default_rng([seed, 2**31 - 1])
    check = rng.choice(len(inputs), size=min(gen.verify_pairs, len(inputs)), replace=False)
    for q in check:
        if not np.allclose(fd_timestepper(inputs[q], cfg), targets[q], rtol=0, atol=1e-13):
            raise RuntimeError(f"pair {q} is not reproduced by the FD timestepper")
    if flags:
        logger.info("%d trajectories truncated (escaped/diverged)", len(flags))
    provenance = {
        "plant": cfg.to_dict(),
        "datagen": asdict(gen),
        "initial_conditions": "given" if initial_conditions is not None else "random_family",
        "seed": seed,
        "trajectories_attempted": next_index,
        "trajectory_pairs": n_trajectory_pairs,
        "augmented_pairs": len(inputs) - n_trajectory_pairs - n_neighborhood - n_local,
        "local_pairs": n_local,
        "neighborhood_pairs": n_neighborhood,
        "truncated": flags,
    }
    return SnapshotDataset(inputs, targets, cfg.dt_report, cfg.grid, seed, provenance, weights)
