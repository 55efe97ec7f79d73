"""End-to-end acceptance checks; each appends one PASS/FAIL line to the terminal summary."""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from framelet_mp.chebyshev import build_approx_operators, hop_reach
from framelet_mp.cli import main
from framelet_mp.graph import bfs_distances, build_laplacian_bundle, dirichlet_energy, generate_sbm, stratified_split
from framelet_mp.layers import (
    FmpParams,
    energy_sandwich_check,
    fmp_ode_rhs,
    ode_energy_bound,
    stability_probe,
)
from framelet_mp.ode import OdeConfig, convergence_order, integrate
from framelet_mp.spectral import haar_bank, nu_bank, tightness_report
from framelet_mp.train import finite_difference_check, relu_margin

from conftest import ACCEPTANCE_LINES, cheb_errors, cycle_graph, exact_ops, path_graph, random_graph, small_problem

# sparse random draws are sometimes edgeless, which makes every high pass vanish
pytestmark = pytest.mark.filterwarnings("ignore:all high-pass responses vanish:RuntimeWarning")


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def _any_bank(i):
    return (haar_bank(), nu_bank())[i % 2]


def test_criterion_01_tight_frame():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst_recon = worst_parseval = 0.0
    for n in (10, 50, 200):
        g = random_graph(rng, n, min(1.0, 5.0 / n))
        b, dec, _ = exact_ops(g, nu_bank(), 1)
        for J in (1, 2, 3):
            _, _, ops = exact_ops(g, nu_bank(), J)
            rep = tightness_report(ops, probes=16, seed=J)
            worst_recon = max(worst_recon, rep.reconstruction_error)
            worst_parseval = max(worst_parseval, rep.parseval_residual)
    elapsed = time.perf_counter() - start
    ok = worst_recon <= 1e-9 and worst_parseval <= 1e-9 and elapsed < 10.0
    record(1, ok, f"recon {worst_recon:.1e}, parseval {worst_parseval:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_energy_conservation():
    rng = np.random.default_rng(202)
    worst_nu = 0.0
    worst_haar_ratio = 0.0
    for i in range(100):
        n = int(rng.integers(5, 60))
        g = random_graph(rng, n, float(rng.uniform(0.05, 0.5)), weighted=bool(i % 2))
        J = int(rng.integers(1, 4))
        X = rng.standard_normal((n, int(rng.integers(1, 4))))
        b, dec, nu = exact_ops(g, nu_bank(), J)
        e = dirichlet_energy(b, X)
        split = sum(dirichlet_energy(b, nu.apply(k, X)) for k in nu.keys())
        worst_nu = max(worst_nu, abs(e - split) / e if e > 0 else abs(split))
        _, _, haar = exact_ops(g, haar_bank(), J)
        resid = e - sum(dirichlet_energy(b, haar.apply(k, X)) for k in haar.keys())
        bound = tightness_report(haar, probes=1).deficit_bound * dec.lambda_max * float(np.sum(X**2))
        assert resid >= -1e-12
        worst_haar_ratio = max(worst_haar_ratio, resid / bound if bound > 0 else 0.0)
    ok = worst_nu <= 1e-8 and worst_haar_ratio <= 1.0
    record(2, ok, f"nu relative residual {worst_nu:.1e}, haar residual / deficit bound {worst_haar_ratio:.2f}")
    assert ok


def test_criterion_03_energy_sandwich():
    rng = np.random.default_rng(303)
    violations = trials = 0
    while trials < 1000:
        n = int(rng.integers(3, 41))
        g = random_graph(rng, n, float(rng.uniform(0.1, 0.7)))
        _, _, ops = exact_ops(g, _any_bank(trials // 10), int(rng.integers(1, 4)))
        for _ in range(10):
            d = int(rng.integers(1, 5))
            P = FmpParams.random_psd(ops, d, 1.0, rng)
            res = energy_sandwich_check(ops, P, rng.standard_normal((n, d)), rel_tol=1e-9, strict=False)
            violations += not res.holds
            trials += 1
    ok = violations == 0
    record(3, ok, f"{violations} violations in {trials} trials")
    assert ok


def test_criterion_04_ode_energy():
    rng = np.random.default_rng(404)
    rtol = 1e-7
    worst_drop = worst_excess = 0.0
    for i in range(100):
        n = int(rng.integers(4, 30))
        g = random_graph(rng, n, float(rng.uniform(0.15, 0.6)), d=2)
        b, _, ops = exact_ops(g, _any_bank(i), int(rng.integers(1, 4)))
        M = float(rng.uniform(0.1, 1.0))
        P = FmpParams.random_psd(ops, 2, M, rng)
        cfg = OdeConfig(t1=1.0, rtol=rtol, atol=1e-12, store_states=True)
        traj = integrate(lambda t, y: fmp_ode_rhs(ops, P, y), g.features, cfg)
        E = np.array([dirichlet_energy(b, s) for s in traj.states])
        e0 = E[0]
        if e0 == 0:
            continue
        worst_drop = max(worst_drop, float(np.max((E[:-1] - E[1:]) / e0, initial=0.0)))
        bound = np.array([ode_energy_bound(M, ops.K, ops.J, t) for t in traj.times]) * e0
        worst_excess = max(worst_excess, float(np.max((E - bound) / e0)))
    ok = worst_drop <= 10 * rtol and worst_excess <= 10 * rtol
    record(4, ok, f"largest relative drop {worst_drop:.1e}, largest excess over bound {worst_excess:.1e}")
    assert ok


def test_criterion_05_oversmoothing(tmp_path):
    assert main(["energy-evolution", "--out", str(tmp_path)]) == 0
    gcn = np.loadtxt(tmp_path / "energy_gcn.csv", delimiter=",", skiprows=1)[:, 1]
    fmp = np.loadtxt(tmp_path / "energy_fmp.csv", delimiter=",", skiprows=1)[:, 1]
    rep = json.loads((tmp_path / "energy_summary.json").read_text())
    # contraction recomputed from a dense eigensolve of the propagator
    b = build_laplacian_bundle(generate_sbm(0))
    mu = np.sort(np.abs(np.linalg.eigvalsh(b.propagator.toarray())))
    decay = (0.9 * mu[-2]) ** 2
    ratios = gcn[1:] / gcn[:-1]
    rtol = 1e-5
    ok = (
        len(gcn) == 51
        and ratios.max() <= decay + 1e-6
        and gcn[-1] <= decay**50 * gcn[0] * (1 + 1e-9)
        and np.all(fmp[1:] >= fmp[:-1] * (1 - 10 * rtol))
        and all(rep["checks"].values())
    )
    record(5, ok, f"gcn max ratio {ratios.max():.3f} <= {decay:.3f}, E50/E0 {gcn[-1] / gcn[0]:.1e}, fmp-ode E50/E0 {fmp[-1] / fmp[0]:.2f}")
    assert ok


def test_criterion_06_stability():
    rng = np.random.default_rng(606)
    violations = rejected = 0
    worst = 0.0
    for i in range(200):
        # with no edges lambda_max = 0 and C = 1, yet the low pass is the identity
        # and still expands; test_layers pins that counterexample separately
        while True:
            n = int(rng.integers(4, 35))
            d = int(rng.integers(1, 4))
            g = random_graph(rng, n, float(rng.uniform(0.1, 0.6)), d=d)
            if len(g.edges):
                break
            rejected += 1
        _, _, ops = exact_ops(g, _any_bank(i), int(rng.integers(1, 4)))
        T = int(rng.integers(1, 9))
        layers = [FmpParams([0.5 * rng.standard_normal((d, d)) for _ in range(ops.K + 1)]) for _ in range(T)]
        rep = stability_probe(ops, layers, g.features, 1e-3, T, seed=i)
        violations += not rep.holds
        worst = max(worst, max(r / b for r, b in zip(rep.per_layer_ratios, rep.bounds)))
    ok = violations == 0
    record(6, ok, f"{violations} violations in 200 probes, largest ratio / bound {worst:.2f} ({rejected} edgeless draws redrawn)")
    assert ok


CHEB_DEGREES = [4, 8, 16, 32, 64]


@pytest.fixture(scope="module")
def chebyshev_suite():
    """Frobenius errors on a fixed set of small graphs, both banks, J = 1..3."""
    rng = np.random.default_rng(7)
    graphs = [("path24", path_graph(24)), ("cycle20", cycle_graph(20))]
    graphs += [(f"random{n}", random_graph(rng, n, min(1.0, 4.0 / n))) for n in (8, 16, 32, 48, 64)]
    upward = {"haar": [], "nu": []}
    worst_haar32 = 0.0
    for name, g in graphs:
        for bank in (haar_bank(), nu_bank()):
            for J in (1, 2, 3):
                errs, norms = cheb_errors(g, bank, J, CHEB_DEGREES)
                steps = np.diff(errs, axis=0)
                upward[bank.name] += [float(s) for s in steps[steps > 0]]
                if bank.name == "haar":
                    worst_haar32 = max(worst_haar32, float(np.max(errs[3] / norms)))
    reach_ok = True
    for name, g in graphs:
        b = build_laplacian_bundle(g)
        for m in (2, 4):
            ops = build_approx_operators(b, nu_bank(), 2, m)
            hops = max(op.hops for op in ops.operators.values())
            for node in range(0, g.n, 5):
                dist = bfs_distances(g, node)
                reach_ok &= hop_reach(ops, node) == min(hops, int(dist[dist >= 0].max()))
    ok = not upward["haar"] and not upward["nu"] and worst_haar32 <= 1e-6 and reach_ok
    haar_up = f"{len(upward['haar'])} upward steps, max +{max(upward['haar'], default=0):.1e}"
    record(7, ok, f"haar {haar_up}; nu {len(upward['nu'])} upward steps; haar m=32 rel {worst_haar32:.1e}; hop reach {'matches' if reach_ok else 'differs from'} BFS")
    return upward, worst_haar32, reach_ok


def test_criterion_07_nu_monotone_haar_accuracy_hop_reach(chebyshev_suite):
    upward, worst_haar32, reach_ok = chebyshev_suite
    assert not upward["nu"]
    assert worst_haar32 <= 1e-6
    assert reach_ok


@pytest.mark.xfail(strict=True, reason="Haar errors sit on the chain truncation floor; roundoff there moves them up by up to ~2e-9")
def test_criterion_07_haar_strictly_monotone(chebyshev_suite):
    upward, _, _ = chebyshev_suite
    assert not upward["haar"]


def test_criterion_08_gradients():
    worst = {}
    h = 1e-5
    for kind in ("fmp", "fmp-ode"):
        g, ops, cfg, model, split = small_problem(kind)
        assert relu_margin(model, g, ops, cfg) > 10 * h
        errs = finite_difference_check(model, g, ops, split, cfg, h=h)
        worst[kind] = max(errs.values())
    ok = max(worst.values()) <= 1e-5
    record(8, ok, ", ".join(f"{k} max rel error {v:.1e}" for k, v in worst.items()))
    assert ok


def test_criterion_09_solver_order():
    res = convergence_order(lambda t, y: y, np.array([1.0]), exact=np.array([math.e]))
    errs = {}
    for rtol in (1e-4, 1e-6, 1e-8):
        y = integrate(lambda t, y: y, np.array([1.0]), OdeConfig(rtol=rtol, atol=rtol * 1e-2)).final_state[0]
        errs[rtol] = abs(y - math.e)
    ok = all(12 <= r <= 20 for r in res["ratios"]) and all(e <= 10 * r for r, e in errs.items())
    ratios = ", ".join(f"{r:.2f}" for r in res["ratios"])
    record(9, ok, f"rk4 ratios {ratios}, order {res['order']:.2f}; dopri5 error / rtol max {max(e / r for r, e in errs.items()):.2f}")
    assert ok


def _lr_accuracy(graph, X):
    accs = []
    for seed in range(10):
        split = stratified_split(graph.labels, seed)
        clf = LogisticRegression().fit(X[split["train"]], graph.labels[split["train"]])
        accs.append(clf.score(X[split["test"]], graph.labels[split["test"]]))
    return float(np.mean(accs))


def test_criterion_10_synthetic_classification(tmp_path):
    start = time.perf_counter()
    means = {}
    for kind in ("fmp", "fmp-ode"):
        out = tmp_path / kind
        code = main(["node-classify", "--synthetic", "--model", kind, "--repeats", "10", "--min-accuracy", "0.9", "--out", str(out)])
        means[kind] = (code, json.loads((out / "metrics.json").read_text())["meanTestAcc"])
    elapsed = time.perf_counter() - start
    g = generate_sbm(0)
    P = build_laplacian_bundle(g).propagator
    raw = _lr_accuracy(g, g.features)
    smoothed = _lr_accuracy(g, P @ (P @ g.features))
    # class means (+-0.5, +-0.5) sit sqrt(2) apart with sigma 2: Phi(sqrt(2) / 4)
    bayes = 0.5 * (1 + math.erf(math.sqrt(2) / 4 / math.sqrt(2)))
    ok = all(c == 0 and m >= 0.9 for c, m in means.values()) and elapsed < 300 and smoothed >= 0.9
    accs = ", ".join(f"{k} {m:.3f}" for k, (_, m) in means.items())
    record(10, ok, f"{accs}; {elapsed:.0f}s; LR raw {raw:.3f} (Bayes {bayes:.3f}), LR on P^2 X {smoothed:.3f}")
    assert abs(raw - bayes) <= 0.1
    assert ok


DETERMINISM_RUNS = [
    ["energy-evolution"],
    ["energy-evolution", "--mode", "cheb", "--bank", "nu", "--layers", "10"],
    ["node-classify", "--synthetic", "--repeats", "2", "--epochs", "40"],
    ["node-classify", "--synthetic", "--model", "fmp-ode", "--repeats", "2", "--epochs", "20"],
    ["node-classify", "--synthetic", "--model", "gcn", "--repeats", "2", "--epochs", "40"],
    ["tightness-report", "--bank", "nu", "--levels", "3"],
    ["stability-probe", "--probes", "4"],
    ["stability-probe", "--mode", "cheb", "--degree", "16"],
    ["energy-sandwich"],
    ["sweep", "--budget", "3", "--epochs", "10"],
    ["gen-sbm", "--seed", "5"],
]


def _snapshot(directory):
    files = {}
    for root, _, names in os.walk(directory):
        for name in names:
            path = os.path.join(root, name)
            with open(path, "rb") as fh:
                files[os.path.relpath(path, directory)] = fh.read()
    return files


def test_criterion_11_determinism(tmp_path):
    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "MKL_NUM_THREADS", "OPENBLAS_NUM_THREADS", "NUMBA_NUM_THREADS"):
        env[var] = "1"

    def cli(*args):
        return subprocess.run([sys.executable, "-m", "framelet_mp", *args], env=env, capture_output=True, text=True)

    differing = []
    for i, argv in enumerate(DETERMINISM_RUNS):
        first, again = tmp_path / f"{i}a", tmp_path / f"{i}b"
        proc = cli(*argv, "--out", str(first))
        assert proc.returncode == 0, proc.stderr
        proc = cli("replay", str(first / "run.json"), "--out", str(again))
        assert proc.returncode == 0, proc.stderr
        a, b = _snapshot(first), _snapshot(again)
        if a != b:
            differing.append(" ".join(argv[:1]))
    ok = not differing
    detail = f"{len(DETERMINISM_RUNS)} invocations replayed byte-identically" if ok else f"differs: {', '.join(differing)}"
    record(11, ok, detail)
    assert ok
