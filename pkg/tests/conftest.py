import numpy as np
import pytest

from sfpn.sparse_tensor import SparseTensor


def random_sparse(rng, dim, c_in, stride=1, voxel_size=0.05, min_voxels=1):
    """Random occupancy on a [0, dim)^3 grid at the given stride."""
    n = int(rng.integers(min_voxels, max(dim ** 3 // 3, min_voxels) + 1))
    coords = rng.integers(0, dim, size=(n, 3)).astype(np.int64) * stride
    coords = np.unique(coords, axis=0)
    feats = rng.normal(size=(coords.shape[0], c_in)).astype(np.float32)
    return SparseTensor(coords, feats, stride=stride, voxel_size=voxel_size)


def densify(tensor, dim):
    """Dense (dim, dim, dim, C) grid from a sparse tensor (grid units)."""
    g = np.zeros((dim, dim, dim, tensor.num_channels), dtype=np.float32)
    c = tensor.coords // tensor.stride
    g[c[:, 0], c[:, 1], c[:, 2]] = tensor.features
    return g


def sample_dense(dense, coords, stride=1):
    """Rows of a dense grid at the given (scaled) sparse coordinates."""
    c = np.asarray(coords) // stride
    return dense[c[:, 0], c[:, 1], c[:, 2]]


def random_rotation(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-np.pi, np.pi)
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def random_pose(rng, translation_scale=2.0):
    pose = np.eye(4, dtype=np.float64)
    pose[:3, :3] = random_rotation(rng)
    pose[:3, 3] = rng.uniform(-translation_scale, translation_scale, 3)
    return pose.astype(np.float32)


@pytest.fixture(scope="session")
def single_thread():
    """Pin BLAS to one thread for timing-sensitive assertions."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    import re

    results = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            m = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", nodeid)
            if m and getattr(rep, "when", "call") == "call":
                results[int(m.group(1))] = (outcome.upper(), m.group(2))
    if not results:
        return
    try:
        from test_acceptance import ACCEPTANCE_NOTES
    except ImportError:
        ACCEPTANCE_NOTES = {}
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        outcome, name = results[num]
        word = "PASS" if outcome == "PASSED" else "FAIL"
        note = ACCEPTANCE_NOTES.get(num, "")
        suffix = f"  [{note}]" if note else ""
        terminalreporter.write_line(f"criterion {num:2d} {word}  {name}{suffix}")
