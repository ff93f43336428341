import numpy as np
import pytest

from tractfuse import agents
from tractfuse.env import EnvConfig
from tractfuse.phantom import BundleSpec, PhantomSpec, VoxelGrid, generate_phantom


def finite_diff_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


@pytest.fixture(scope="session")
def tube_phantom():
    spec = PhantomSpec(
        grid=VoxelGrid(dims=(24, 12, 12), voxel_size=1.0),
        bundles=[BundleSpec(name="tube", kind="straight-tube", radius=2.0)],
        rng_seed=7,
    )
    return generate_phantom(spec)


@pytest.fixture(scope="session")
def crossing_phantom():
    spec = PhantomSpec(
        grid=VoxelGrid(dims=(20, 20, 10), voxel_size=1.0),
        bundles=[BundleSpec(name="pair", kind="crossing-pair", radius=2.0)],
        rng_seed=7,
    )
    return generate_phantom(spec)


@pytest.fixture(scope="session")
def env_cfg():
    return EnvConfig(step_size=0.5, max_steps=60)


@pytest.fixture(scope="session")
def tiny_policies():
    """Untrained, narrow policy bundles — structure oracles, not behavior."""
    return {algo: agents.PolicyBundle(algo, hidden=16, seed=i)
            for i, algo in enumerate(("td3", "sac", "ddpg"))}
