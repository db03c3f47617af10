import hashlib
import os
import pickle
import sys
from pathlib import Path

import numpy as np
import pytest

import sbm_localtime
from sbm_localtime.moments import ConstantsBundle, PathFunctionals, c_from_tangent
from sbm_localtime.nonlinear_pde import F2Table, build_f2_table, solve_F, v_ladder
from sbm_localtime.spectral_ou import KillingFunction, build_generator

CACHE_DIR = Path(os.environ.get("SBM_LOCALTIME_TEST_CACHE",
                                Path(__file__).resolve().parent / ".cache"))


SIM_MODULES = ("sbm_sim", "boundary_localtime", "_kernels")


def source_digest(modules=None) -> str:
    """Hash of package sources (all modules by default); a code change invalidates the cache."""
    h = hashlib.sha256()
    root = Path(sbm_localtime.__file__).parent
    for p in sorted(root.glob("*.py")):
        if modules is not None and p.stem not in modules:
            continue
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def cached(name: str, params: dict, build, modules=SIM_MODULES):
    """Load ``name`` keyed by params and the digest of ``modules``, or build and store it."""
    key = hashlib.sha256(repr(sorted(params.items())).encode()).hexdigest()[:10]
    path = CACHE_DIR / f"{name}-{key}-{source_digest(modules)}.pkl"
    if path.exists() and not os.environ.get("SBM_LOCALTIME_REBUILD"):
        with open(path, "rb") as fh:
            return pickle.load(fh)
    value = build()
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(value, fh)
    os.replace(tmp, path)
    return value


@pytest.fixture(scope="session")
def profile():
    return solve_F()


@pytest.fixture(scope="session")
def model(profile):
    return build_generator(KillingFunction(profile, (0.0, 0.0)), 80)


@pytest.fixture(scope="session")
def ladder():
    return v_ladder(tangent=True)


@pytest.fixture(scope="session")
def f2table(profile, model):
    path = CACHE_DIR / f"f2table-{source_digest(('nonlinear_pde',))}.json"
    if path.exists():
        return F2Table.from_json(path, profile)
    table = build_f2_table(profile, model.lambda0)
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    table.to_json(path)
    return table


@pytest.fixture(scope="session")
def functionals(model, profile, ladder, f2table):
    return PathFunctionals(model, profile, ladder, f2table)


@pytest.fixture(scope="session")
def bundle(model):
    C, _ = c_from_tangent(model.lambda0, model.theta)
    return ConstantsBundle(C=C, theta=model.theta, lambda0=model.lambda0,
                           routes={"tangent": C})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
