"""End-to-end pipeline: data -> surrogate -> fixed point -> spectrum -> reduced model -> gains -> closed loop.

Every stage reads its inputs from, and writes its artifacts to, one output
directory, so each can be rerun on its own from the files of the previous
stage.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import plant as pl
from . import textio
from .control import ControllerGain, LqrSpec, dlqr_gain, pole_place
from .krylov import arnoldi, jacobian_operator, newton_krylov_fixed_point
from .randonet import (
    RandONetModel,
    RegularizationSpec,
    init_embeddings,
    load_model,
    predict,
    relative_errors,
    save_model,
    train_bilinear_lsq,
)
from .reduction import ReducedModel, actuator_jacobian_H, build_reduced_model, project

logger = logging.getLogger(__name__)

PLANTS = ("fd", "surrogate")
METHODS = ("dlqr", "pp")


class StageError(RuntimeError):
    """A numerical failure inside a named pipeline stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# raised by the numerical kernels; anything else (bad config, missing files) passes through
NUMERICAL_ERRORS = (RuntimeError, FloatingPointError, np.linalg.LinAlgError, pl.PlantError)


def run_stage(name: str, fn, *args, **kwargs) -> dict:
    """Call a stage, re-raising numerical failures as :class:`StageError` tagged with ``name``."""
    try:
        result = fn(*args, **kwargs)
    except StageError:
        raise
    except NUMERICAL_ERRORS as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    logger.info("%s", result)
    return result


# --------------------------------------------------------------------------
# configuration


@dataclass
class ActuatorConfig:
    centers: list = field(default_factory=lambda: [0.25, 0.5, 0.75])
    sigma: float = 0.05


@dataclass
class ModelConfig:
    N: int = 200
    M_br: int = 3000
    a_U: float = 25.0
    eps_rff: float = 0.05
    mu: float = 1e-10
    seed: int = 1
    train_fraction: float = 0.9
    split_seed: int = 2


@dataclass
class KrylovConfig:
    gmres_tol: float = 1e-10
    restart: int = 50
    maxiter: int = 200
    newton_tol_fd: float = 1e-12
    newton_tol_surrogate: float = 1e-9
    tol_step: float = 1e-15
    max_newton: int = 50
    guess_scale: float = 1.05
    m_k: int = 40
    arnoldi_seed: int = 0


@dataclass
class ReductionConfig:
    M_slow: int = 5
    d_mode: str = "consistent"
    actuator_eps: float = 1e-5


@dataclass
class ControllerConfig:
    q: float = 0.5
    r_dt2_factor: float = 10.0  # R = r_dt2_factor * dt^2 * I
    poles: list = field(default_factory=lambda: [0.30, 0.425, 0.55, 0.675, 0.80])
    pp_seed: int = 0


@dataclass
class SimConfig:
    steps: int = 5000
    snapshot_every: int = 10
    initial_condition: str = "perturbed"  # "perturbed" | "steady"
    overflow_guard: float = 1e3


@dataclass
class PipelineConfig:
    plant: pl.PlantConfig = field(default_factory=pl.PlantConfig)
    actuators: ActuatorConfig = field(default_factory=ActuatorConfig)
    datagen: pl.DataGenSpec = field(default_factory=pl.DataGenSpec)
    data_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    krylov: KrylovConfig = field(default_factory=KrylovConfig)
    reduction: ReductionConfig = field(default_factory=ReductionConfig)
    controllers: ControllerConfig = field(default_factory=ControllerConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    output_dir: str = "runs/default"

    @property
    def act(self) -> pl.ActuatorSet:
        return pl.ActuatorSet(tuple(self.actuators.centers), self.actuators.sigma, self.plant.grid)

    def lqr_spec(self, M_slow: int) -> LqrSpec:
        k = len(self.actuators.centers)
        r = self.controllers.r_dt2_factor * self.plant.dt_report**2
        return LqrSpec.scaled_identity(M_slow, k, self.controllers.q, r)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d)


def _build(tp, d):
    if not is_dataclass(tp):
        return d
    if not isinstance(d, dict):
        raise ValueError(f"expected a mapping for {tp.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in fields(tp)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown {tp.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = tp()
    for name, f in known.items():
        if name not in d:
            continue
        current = getattr(defaults, name)
        kwargs[name] = _build(type(current), d[name]) if is_dataclass(current) else d[name]
    return tp(**kwargs)


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for key in keys[:-1]:
        d = d.setdefault(key, {})
    d[keys[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a JSON config (missing keys take defaults) and apply dotted-key overrides."""
    raw = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        raw.pop("schema_version", None)
        raw.pop("kind", None)
    for key, value in (overrides or {}).items():
        _set_path(raw, key, value)
    return PipelineConfig.from_dict(raw)


def save_resolved_config(cfg: PipelineConfig, out: Path) -> Path:
    return textio.write_document(out / "resolved.cfg", "pipeline_config", cfg.to_dict())


# --------------------------------------------------------------------------
# closed-loop simulation


@dataclass
class ClosedLoopTrace:
    times: np.ndarray
    l2_error: np.ndarray
    controls: np.ndarray  # (steps+1, k)
    bz_absmax: np.ndarray
    snapshots: np.ndarray  # (n_snap, m)
    snapshot_times: np.ndarray
    plant_kind: str
    controller: str
    diverged: bool = False

    def to_csv(self, path):
        k = self.controls.shape[1]
        header = ["t", "l2_error"] + [f"z_{i + 1}" for i in range(k)] + ["bz_absmax"]
        rows = np.column_stack([self.times, self.l2_error, self.controls, self.bz_absmax])
        return textio.write_csv(path, header, rows)

    def snapshots_to_csv(self, path, grid: pl.Grid):
        header = ["t"] + [f"u_{j}" for j in range(grid.m)]
        return textio.write_csv(path, header, np.column_stack([self.snapshot_times, self.snapshots]))

    @property
    def final_error(self) -> float:
        return float(self.l2_error[-1])


def _plant_step(plant_kind, plant, act, u, z):
    if plant_kind == "fd":
        return pl.controlled_fd_step(u, z, act, plant)
    if plant_kind == "surrogate":
        out = predict(plant, u) + act.B @ z
        out[0] = 0.0
        out[-1] = 0.0
        return out
    raise ValueError(f"unknown plant kind {plant_kind!r}")


def run_closed_loop(
    plant_kind: str,
    plant,
    act: pl.ActuatorSet,
    reduced: ReducedModel,
    gain: ControllerGain | None,
    u0,
    steps: int,
    snapshot_every: int = 10,
    overflow_guard: float = 1e3,
    allow_mismatch: bool = False,
    controller: str | None = None,
) -> ClosedLoopTrace:
    """Lift ``z = -K V^T (u - u_ss)`` onto the full plant and iterate.

    ``plant`` is a :class:`PlantConfig` for ``plant_kind='fd'`` and a trained
    :class:`RandONetModel` for ``'surrogate'``. ``gain=None`` runs open loop.
    """
    built_for = reduced.provenance.get("plant")
    if built_for is not None and built_for != plant_kind and not allow_mismatch:
        raise ValueError(
            f"reduced model was built on the {built_for!r} plant; pass allow_mismatch=True to run it on {plant_kind!r}"
        )
    u = np.array(u0, dtype=float)
    k = act.k
    K = np.zeros((k, reduced.M_slow)) if gain is None else gain.K
    B = act.B
    times, errs, ctrl, bz = [], [], [], []
    snaps, snap_t = [], []
    diverged = False
    for n in range(steps + 1):
        y = project(u, reduced)
        z = -K @ y
        times.append(n * reduced.provenance.get("dt_report", 1.0))
        errs.append(np.linalg.norm(u - reduced.u_ss))
        ctrl.append(z)
        bz.append(np.abs(B @ z).max())
        if snapshot_every and n % snapshot_every == 0:
            snaps.append(u.copy())
            snap_t.append(times[-1])
        if n == steps:
            break
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                u = _plant_step(plant_kind, plant, act, u, z)
        except (pl.PlantError, FloatingPointError):
            diverged = True
            break
        if not np.all(np.isfinite(u)) or np.abs(u).max() > overflow_guard:
            diverged = True
            break
    name = controller or ("open" if gain is None else gain.method)
    return ClosedLoopTrace(
        np.array(times),
        np.array(errs),
        np.array(ctrl).reshape(len(ctrl), k),
        np.array(bz),
        np.array(snaps).reshape(len(snaps), u.size),
        np.array(snap_t),
        plant_kind,
        name,
        diverged,
    )


def run_open_loop(plant_kind, plant, act, reduced, u0, steps, **kw) -> ClosedLoopTrace:
    return run_closed_loop(plant_kind, plant, act, reduced, None, u0, steps, **kw)


# --------------------------------------------------------------------------
# stages


def ensure_output_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{stage}: missing input artifact {path}")
    return path


def stage_gen_data(cfg: PipelineConfig) -> dict:
    out = ensure_output_dir(cfg)
    ds = pl.generate_training_pairs(cfg.plant, cfg.datagen, cfg.data_seed)
    ds.save(out / "dataset.json")
    return {
        "stage": "gen-data",
        "pairs": len(ds),
        "max_abs_u": float(np.abs(ds.inputs).max()),
        "truncated": len(ds.provenance["truncated"]),
    }


def split_indices(n: int, fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def stage_train(cfg: PipelineConfig) -> dict:
    out = ensure_output_dir(cfg)
    ds = pl.SnapshotDataset.load(_require(out / "dataset.json", "train"))
    mc = cfg.model
    tr, te = split_indices(len(ds), mc.train_fraction, mc.split_seed)
    train_ds = pl.SnapshotDataset(
        ds.inputs[tr], ds.targets[tr], ds.dt_report, ds.grid, ds.seed, ds.provenance, ds.weights[tr]
    )
    trunk, branch = init_embeddings(
        ds.grid.m, mc.N, mc.M_br, mc.a_U, mc.eps_rff, (ds.grid.x_lo, ds.grid.x_hi), mc.seed
    )
    t0 = time.perf_counter()
    model = train_bilinear_lsq(train_ds, trunk, branch, RegularizationSpec(mc.mu))
    elapsed = time.perf_counter() - t0
    held = relative_errors(model, ds.inputs[te], ds.targets[te]) if len(te) else np.array([np.nan])
    model.training_meta.update(
        {
            "N": mc.N,
            "M_br": mc.M_br,
            "a_U": mc.a_U,
            "eps_rff": mc.eps_rff,
            "embedding_seed": mc.seed,
            "split_seed": mc.split_seed,
            "n_train": int(len(tr)),
            "n_heldout": int(len(te)),
            "heldout_median_rel_l2": float(np.median(held)),
            "heldout_max_rel_l2": float(np.max(held)),
            "heldout_median_rel_l2_unit_weight": float(np.median(held[ds.weights[te] == 1.0]))
            if np.any(ds.weights[te] == 1.0)
            else float("nan"),
        }
    )
    save_model(model, out / "model.json")
    return {
        "stage": "train",
        "fit_residual": model.training_meta["fit_residual"],
        "heldout_median": model.training_meta["heldout_median_rel_l2"],
        "seconds": round(elapsed, 2),
    }


def load_plant(cfg: PipelineConfig, plant_kind: str, out: Path | None = None):
    """The stepper object for a plant kind: PlantConfig (fd) or trained model (surrogate)."""
    if plant_kind == "fd":
        return cfg.plant
    if plant_kind == "surrogate":
        out = out or ensure_output_dir(cfg)
        return load_model(_require(out / "model.json", "surrogate plant"))
    raise ValueError(f"plant must be one of {PLANTS}, got {plant_kind!r}")


def stepper_for(plant_kind: str, plant):
    if plant_kind == "fd":
        return lambda u: pl.fd_timestepper(u, plant)
    return lambda u: predict(plant, u)


def stage_steady_state(cfg: PipelineConfig, plant_kind: str) -> dict:
    out = ensure_output_dir(cfg)
    plant = load_plant(cfg, plant_kind, out)
    S = stepper_for(plant_kind, plant)
    kc = cfg.krylov
    _, u_analytic = pl.analytic_steady_state(cfg.plant.lam, "upper", cfg.plant.grid)
    tol = kc.newton_tol_fd if plant_kind == "fd" else kc.newton_tol_surrogate
    rep = newton_krylov_fixed_point(
        S,
        kc.guess_scale * u_analytic,
        tol_res=tol,
        tol_step=kc.tol_step,
        max_newton=kc.max_newton,
        gmres_tol=kc.gmres_tol,
        restart=kc.restart,
        maxiter=kc.maxiter,
    )
    if not rep.converged:
        raise StageError("steady-state", f"Newton-Krylov on {plant_kind}: {rep.message}, residual {rep.residual:.3e}")
    gap = float(np.abs(rep.u - u_analytic).max())
    textio.write_document(
        out / f"steady_{plant_kind}.json",
        "steady_state",
        {
            "plant": plant_kind,
            "u_ss": rep.u,
            "residual": rep.residual,
            "residual_history": rep.residual_history,
            "newton_iterations": rep.iterations,
            "gmres_iterations": rep.gmres_iterations,
            "analytic_gap_inf": gap,
        },
    )
    pl.field_to_csv(out / f"steady_{plant_kind}.csv", rep.u, cfg.plant.grid)
    rep.to_csv(out / f"newton_{plant_kind}.csv")
    return {"stage": "steady-state", "plant": plant_kind, "residual": rep.residual, "analytic_gap_inf": gap,
            "newton_iterations": rep.iterations}


def read_steady_state(out: Path, plant_kind: str) -> dict:
    return textio.read_document(_require(out / f"steady_{plant_kind}.json", "steady state"), "steady_state")


def stage_spectrum(cfg: PipelineConfig, plant_kind: str) -> dict:
    out = ensure_output_dir(cfg)
    plant = load_plant(cfg, plant_kind, out)
    S = stepper_for(plant_kind, plant)
    u_ss = np.array(read_steady_state(out, plant_kind)["u_ss"])
    v0 = np.random.default_rng(cfg.krylov.arnoldi_seed).standard_normal(u_ss.size)
    res = arnoldi(jacobian_operator(S, u_ss), v0, cfg.krylov.m_k)
    vals = res.ritz_values
    n_unstable = int(np.sum(np.abs(vals) > 1))
    textio.write_document(
        out / f"spectrum_{plant_kind}.json",
        "spectrum",
        {
            "plant": plant_kind,
            "m_k": cfg.krylov.m_k,
            "ritz_re": vals.real,
            "ritz_im": vals.imag,
            "ritz_residuals": res.ritz_residuals,
            "n_outside_unit_circle": n_unstable,
            "exact": res.exact,
        },
    )
    textio.write_csv(
        out / f"spectrum_{plant_kind}.csv", ["re", "im", "modulus"], zip(vals.real, vals.imag, np.abs(vals))
    )
    return {"stage": "spectrum", "plant": plant_kind, "leading": float(np.abs(vals[0])), "n_unstable": n_unstable}


def stage_reduce(cfg: PipelineConfig, plant_kind: str) -> dict:
    out = ensure_output_dir(cfg)
    plant = load_plant(cfg, plant_kind, out)
    S = stepper_for(plant_kind, plant)
    u_ss = np.array(read_steady_state(out, plant_kind)["u_ss"])
    rc = cfg.reduction
    H = actuator_jacobian_H(plant_kind, u_ss, cfg.act, cfg.plant, eps=rc.actuator_eps)
    reduced, basis = build_reduced_model(
        S,
        u_ss,
        H,
        M_slow=rc.M_slow,
        m_k=cfg.krylov.m_k,
        d_mode=rc.d_mode,
        seed=cfg.krylov.arnoldi_seed,
        provenance={"plant": plant_kind, "dt_report": cfg.plant.dt_report},
    )
    reduced.save(out / f"reduced_{plant_kind}.json")
    eigF = np.linalg.eigvals(reduced.F)
    return {
        "stage": "reduce",
        "plant": plant_kind,
        "M_slow": reduced.M_slow,
        "eigF_max": float(np.abs(eigF).max()),
    }


def stage_design(cfg: PipelineConfig, plant_kind: str, method: str, poles=None) -> dict:
    out = ensure_output_dir(cfg)
    reduced = ReducedModel.load(_require(out / f"reduced_{plant_kind}.json", "design"))
    if method == "dlqr":
        gain = dlqr_gain(reduced.F, reduced.D, cfg.lqr_spec(reduced.M_slow))
    elif method == "pp":
        gain = pole_place(reduced.F, reduced.D, poles if poles is not None else cfg.controllers.poles,
                          rng_seed=cfg.controllers.pp_seed)
    else:
        raise ValueError(f"method must be one of {METHODS}")
    gain.info["plant"] = plant_kind
    gain.save(out / f"gain_{plant_kind}_{method}.json")
    return {
        "stage": "design",
        "plant": plant_kind,
        "method": method,
        "spectral_radius": gain.spectral_radius,
    }


def initial_state(cfg: PipelineConfig, u_ss) -> np.ndarray:
    if cfg.sim.initial_condition == "steady":
        return np.array(u_ss, dtype=float)
    if cfg.sim.initial_condition == "perturbed":
        return pl.initial_perturbation(u_ss, cfg.plant.grid)
    raise ValueError(f"unknown initial condition {cfg.sim.initial_condition!r}")


def stage_simulate(
    cfg: PipelineConfig, plant_kind: str, method: str, allow_mismatch: bool = False, design_plant: str | None = None
) -> dict:
    """Closed loop on ``plant_kind`` with the gain designed on ``design_plant`` (default: the same plant)."""
    out = ensure_output_dir(cfg)
    design_plant = design_plant or plant_kind
    if design_plant != plant_kind and not allow_mismatch:
        raise ValueError("running a gain on a different plant requires allow_mismatch")
    plant = load_plant(cfg, plant_kind, out)
    reduced = ReducedModel.load(_require(out / f"reduced_{design_plant}.json", "simulate"))
    if method == "open":
        gain = None
    else:
        gain = ControllerGain.load(_require(out / f"gain_{design_plant}_{method}.json", "simulate"))
    u0 = initial_state(cfg, reduced.u_ss)
    trace = run_closed_loop(
        plant_kind,
        plant,
        cfg.act,
        reduced,
        gain,
        u0,
        cfg.sim.steps,
        snapshot_every=cfg.sim.snapshot_every,
        overflow_guard=cfg.sim.overflow_guard,
        allow_mismatch=allow_mismatch,
        controller=method,
    )
    tag = f"{plant_kind}_{method}" if design_plant == plant_kind else f"{plant_kind}_{method}_from_{design_plant}"
    trace.to_csv(out / f"trace_{tag}.csv")
    trace.snapshots_to_csv(out / f"snapshots_{tag}.csv", cfg.plant.grid)
    return {
        "stage": "simulate",
        "plant": plant_kind,
        "method": method,
        "final_l2_error": trace.final_error,
        "diverged": trace.diverged,
    }


def stage_report(cfg: PipelineConfig) -> dict:
    """Summary table (plain text) plus its structured twin, written atomically."""
    out = ensure_output_dir(cfg)
    summary = {"fixed_point": {}, "open_loop_ritz": {}, "closed_loop_eigs": {}, "final_l2_error": {}}
    for p in PLANTS:
        f = out / f"steady_{p}.json"
        if f.exists():
            doc = textio.read_document(f, "steady_state")
            summary["fixed_point"][p] = {"residual": doc["residual"], "analytic_gap_inf": doc["analytic_gap_inf"]}
        f = out / f"spectrum_{p}.json"
        if f.exists():
            doc = textio.read_document(f, "spectrum")
            summary["open_loop_ritz"][p] = {"re": doc["ritz_re"][:6], "im": doc["ritz_im"][:6]}
        for m in METHODS:
            f = out / f"gain_{p}_{m}.json"
            if f.exists():
                g = ControllerGain.load(f)
                summary["closed_loop_eigs"][f"{p}/{m}"] = {
                    "re": g.closed_loop_eigs.real,
                    "im": g.closed_loop_eigs.imag,
                }
            f = out / f"trace_{p}_{m}.csv"
            if f.exists():
                _, data = textio.read_csv(f)
                summary["final_l2_error"][f"{p}/{m}"] = float(data[-1, 1])
    if all((out / f"steady_{p}.json").exists() for p in PLANTS):
        a, b = (np.array(textio.read_document(out / f"steady_{p}.json", "steady_state")["u_ss"]) for p in PLANTS)
        summary["fixed_point_gap_inf"] = float(np.abs(a - b).max())
    textio.write_document(out / "report.json", "report", summary)
    text = format_report(summary)
    tmp = out / "report.txt.tmp"
    tmp.write_text(text)
    tmp.replace(out / "report.txt")
    return {"stage": "report", "entries": sum(len(v) for v in summary.values() if isinstance(v, dict))}


def _fmt_complex(re, im) -> str:
    return ", ".join(f"{a:.6f}" if abs(b) < 1e-12 else f"{a:.6f}{b:+.6f}j" for a, b in zip(re, im))


def format_report(summary: dict) -> str:
    lines = ["equation-free control summary", "=" * 29, ""]
    lines.append(f"{'plant':<10} {'fixed-point residual':>22} {'|u* - u_analytic|_inf':>24}")
    for p, d in summary["fixed_point"].items():
        lines.append(f"{p:<10} {d['residual']:>22.3e} {d['analytic_gap_inf']:>24.3e}")
    if "fixed_point_gap_inf" in summary:
        lines.append(f"surrogate vs fd fixed point, sup-norm gap: {summary['fixed_point_gap_inf']:.3e}")
    lines += ["", "leading open-loop Ritz values"]
    for p, d in summary["open_loop_ritz"].items():
        lines.append(f"  {p:<10} {_fmt_complex(d['re'], d['im'])}")
    lines += ["", "closed-loop eigenvalues of F - D K"]
    for key, d in summary["closed_loop_eigs"].items():
        lines.append(f"  {key:<16} {_fmt_complex(d['re'], d['im'])}")
    lines += ["", f"{'plant/controller':<18} {'final |u - u_ss|_2':>20}"]
    for key, v in summary["final_l2_error"].items():
        lines.append(f"{key:<18} {v:>20.3e}")
    return "\n".join(lines) + "\n"


def run_pipeline(cfg: PipelineConfig) -> list[dict]:
    out = ensure_output_dir(cfg)
    save_resolved_config(cfg, out)
    results = [run_stage("gen-data", stage_gen_data, cfg), run_stage("train", stage_train, cfg)]
    for p in PLANTS:
        results.append(run_stage("steady-state", stage_steady_state, cfg, p))
        results.append(run_stage("spectrum", stage_spectrum, cfg, p))
        results.append(run_stage("reduce", stage_reduce, cfg, p))
        for m in METHODS:
            results.append(run_stage("design", stage_design, cfg, p, m))
    for p in PLANTS:
        for m in METHODS:
            results.append(run_stage("simulate", stage_simulate, cfg, p, m))
    results.append(run_stage("report", stage_report, cfg))
    return results
