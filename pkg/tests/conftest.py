import numpy as np
import pytest

from framelet_mp.graph import Graph, build_laplacian_bundle, generate_sbm
from framelet_mp.spectral import build_exact_operators, laplacian_decomposition

ACCEPTANCE_LINES = []


def random_graph(rng, n, p=0.3, d=3, weighted=False, classes=None):
    iu, ju = np.triu_indices(n, k=1)
    hit = rng.random(len(iu)) < p
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    weights = rng.uniform(0.5, 2.0, size=len(edges)) if weighted else None
    labels = rng.integers(0, classes, size=n) if classes else None
    return Graph.from_edges(n, edges, weights, rng.standard_normal((n, d)), labels)


def path_graph(n, d=1):
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)], features=np.ones((n, d)))


def cycle_graph(n, d=1):
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)], features=np.ones((n, d)))


def exact_ops(g, bank, J):
    b = build_laplacian_bundle(g)
    dec = laplacian_decomposition(b)
    return b, dec, build_exact_operators(dec, bank, J, laplacian=b.norm_laplacian)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def sbm():
    return generate_sbm(0)


@pytest.fixture
def two_node():
    return Graph.from_edges(2, [(0, 1)], features=np.array([[1.0], [-1.0]]))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def cheb_errors(g, bank, J, ms):
    """Frobenius error of each Chebyshev operator against exact mode, one row per degree.

    Both sets use the exact top eigenvalue so they share the dilation R.
    """
    from framelet_mp.chebyshev import build_approx_operators

    b, dec, ex = exact_ops(g, bank, J)
    rows = []
    for m in ms:
        ap = build_approx_operators(b, bank, J, m, lam_max=dec.lambda_max)
        assert ap.R == ex.R
        rows.append([float(np.linalg.norm(ap.dense(k) - ex.dense(k))) for k in ex.keys()])
    norms = [float(np.linalg.norm(ex.dense(k))) for k in ex.keys()]
    return np.array(rows), np.array(norms)


def small_problem(kind, seed=0, dropout=0.0, hidden=4, bank="haar"):
    """12-node two-class graph with a compact model of the given kind and random biases."""
    from framelet_mp.spectral import get_bank
    from framelet_mp.train import TrainConfig, init_model

    g = generate_sbm(seed, n=12, p_in=0.6, p_out=0.15)
    b, _, ops = exact_ops(g, get_bank(bank), 2)
    cfg = TrainConfig(model=kind, hidden_dim=hidden, layers=2, dropout=dropout, ode_steps=4, seed=seed)
    prop = b if kind == "gcn" else ops
    n_channels = 0 if kind == "gcn" else len(ops.channels())
    model = init_model(cfg, g.features.shape[1], 2, n_channels)
    rng = np.random.default_rng(seed + 100)
    for name, arr in model.tensors.items():
        if name.endswith(".b"):
            arr[:] = 0.1 * rng.standard_normal(arr.shape)
    split = np.arange(0, 12, 2)
    return g, prop, cfg, model, split
