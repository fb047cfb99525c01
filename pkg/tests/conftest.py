import numpy as np
import pytest
import torch

from lesion_decomp.phantom import PhantomSpec, generate_phantom_corpus


@pytest.fixture(autouse=True)
def _torch_single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Tiny 64x64 corpus shared by tests that only need files on disk."""
    spec = PhantomSpec(image_size=64, n_normal=12, n_lesioned=10, n_test_normal=2, n_test_lesioned=4)
    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_phantom_corpus(spec, seed=3, out_dir=root)
    return manifest


def fd_gradient(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture(scope="session")
def tiny_sets(small_corpus):
    """The small corpus downsampled to 16x16 model inputs."""
    from lesion_decomp.pipeline import load_corpus_sets

    return load_corpus_sets(small_corpus.root, 16)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
