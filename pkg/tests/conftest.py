import time
from pathlib import Path

import numpy as np
import pytest

from eqfree import pipeline as pp
from eqfree import plant as pl
from eqfree.krylov import newton_krylov_fixed_point

# filled by the acceptance module, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def cfg():
    return pl.PlantConfig()


@pytest.fixture(scope="session")
def act(cfg):
    return pl.ActuatorSet(grid=cfg.grid)


@pytest.fixture(scope="session")
def u_analytic(cfg):
    return pl.analytic_steady_state(cfg.lam, "upper", cfg.grid)[1]


@pytest.fixture(scope="session")
def fd_fixed_point(cfg, u_analytic):
    rep = newton_krylov_fixed_point(lambda u: pl.fd_timestepper(u, cfg), 1.05 * u_analytic, tol_res=1e-12)
    assert rep.converged
    return rep.u


def _run_default(out: Path):
    config = pp.load_config(overrides={"output_dir": str(out)})
    t0 = time.perf_counter()
    results = pp.run_pipeline(config)
    return {"cfg": config, "out": out, "results": results, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The full default pipeline, run once per session (about 1.5 min)."""
    return _run_default(tmp_path_factory.mktemp("run_a"))


@pytest.fixture(scope="session")
def default_run_repeat(tmp_path_factory, default_run):
    return _run_default(tmp_path_factory.mktemp("run_b"))


@pytest.fixture(scope="session")
def trained_model(default_run):
    from eqfree.randonet import load_model

    return load_model(default_run["out"] / "model.json")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
