import functools

import numpy as np
import pytest

from oftrack import cli
from oftrack.lti_core import Exosystem, Plant, Weights
from oftrack.scenario import bundled_raw, parse_config


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


def rot_exo(theta=0.3):
    return Exosystem(rotation(theta), [[1.0, 0.0]], [1.0, -2 * np.cos(theta), 1.0])


def step_exo(p=1):
    return Exosystem(np.eye(1), np.ones((p, 1)), [1.0, -1.0])


SCALAR_PLANT = Plant(0.5, 1.0, 1.0)
ROT_PLANT = Plant([[0.0, 1.0], [-0.5, 1.2]], [[0.0], [1.0]], [[1.0, 0.0]])
UNIT_WEIGHTS = Weights(1.0, 1.0)


def random_plant(rng, n, m=1, p=1, scale=1.0):
    """Random plant, controllable and observable with probability one."""
    A = rng.standard_normal((n, n))
    A *= scale / max(1e-3, np.max(np.abs(np.linalg.eigvals(A))))
    return Plant(A, rng.standard_normal((n, m)), rng.standard_normal((p, n)))


@functools.lru_cache(maxsize=None)
def prepared(name, seed=None, **filter_kw):
    raw = bundled_raw(name)
    if filter_kw:
        raw["filter"] = dict(filter_kw)
    return cli.prepare(parse_config(raw, seed=seed))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pbh_margin(aug, radius=0.9):
    """Smallest sigma_min of the PBH pencils over eigenvalues with |lam| >= radius."""
    from oftrack import linalg_kit as la

    worst = np.inf
    n = aug.n_z
    for lam in la.eigenvalues(aug.underA):
        if abs(lam) >= radius:
            M = aug.underA - lam * np.eye(n)
            worst = min(worst,
                        np.linalg.svd(np.hstack([M, aug.barB]), compute_uv=False)[-1],
                        np.linalg.svd(np.vstack([M, aug.barC]), compute_uv=False)[-1])
    return worst


def random_tracking_setup(rng, max_nz=8, min_margin=0.05, tries=200):
    """Random augmented system with n_z <= max_nz and a PBH margin of at least ``min_margin``.

    Mixes constant and rotation references. Draws that are nearly
    uncontrollable or unobservable are rejected up front.
    """
    from oftrack.lti_core import build_setup, check_assumptions

    for _ in range(tries):
        if rng.random() < 0.5:
            exo = step_exo()
        else:
            exo = rot_exo(float(rng.uniform(0.1, 1.5)))
        n = int(rng.integers(1, max_nz - exo.degree + 1))
        plant = random_plant(rng, n, scale=float(rng.uniform(0.2, 1.3)))
        if not check_assumptions(plant, exo).all_passed:
            continue
        setup = build_setup(plant, exo, Weights(1.0, 1.0), int(rng.integers(2**31)))
        if pbh_margin(setup.aug) >= min_margin:
            return setup
    raise RuntimeError("no acceptable random system drawn")
