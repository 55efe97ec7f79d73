"""Command implementations behind the ``framelet-mp`` CLI.

Every ``run_*`` function takes a flat parameter dict (already merged from
defaults, config file and flags) plus an output directory, writes its
artifacts there and returns ``(report, ok)``. ``ok`` is False when a checked
inequality failed; the CLI maps that to exit code 1.
"""

from __future__ import annotations

import json
import logging
import math
import os

import numpy as np

from .chebyshev import build_approx_operators
from .graph import build_laplacian_bundle, dirichlet_energy, generate_sbm, homophily, stratified_split
from .io import load_graph_dir, write_graph_dir
from .layers import (
    FmpParams,
    energy_sandwich_check,
    fmp_ode_rhs,
    gcn_contraction,
    gcn_forward,
    ode_energy_bound,
    stability_probe,
)
from .ode import OdeConfig, integrate
from .spectral import build_exact_operators, get_bank, laplacian_decomposition, tightness_report
from .train import TrainConfig, fit, save_checkpoint, write_metrics_csv

logger = logging.getLogger(__name__)

SEARCH_SPACE = {
    "learning_rate": ("log-uniform", 1e-3, 1e-2),
    "weight_decay": ("log-uniform", 1e-3, 1e-1),
    "dropout": ("uniform", 0.0, 0.8),
    "hidden_dim": ("choice", [64, 128, 256]),
    "layers": ("int", 1, 10),
    "optimizer": ("choice", ["adam", "adamax"]),
}

TRAIN_KEYS = {
    "model": "model",
    "lr": "learning_rate",
    "weight_decay": "weight_decay",
    "dropout": "dropout",
    "hidden": "hidden_dim",
    "layers": "layers",
    "optimizer": "optimizer",
    "epochs": "epochs",
    "patience": "patience",
    "ode_steps": "ode_steps",
    "ode_horizon": "ode_horizon",
}


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_energy_csv(energies, path):
    with open(path, "w") as fh:
        fh.write("layer,energy\n")
        for i, e in enumerate(energies):
            fh.write(f"{i},{float(e)!r}\n")


# --------------------------------------------------------------------------
# Shared setup
# --------------------------------------------------------------------------


def load_graph(params):
    """Dataset directory from ``data`` or the default two-class SBM seeded by ``seed``."""
    if params.get("data"):
        return load_graph_dir(params["data"])
    return generate_sbm(params["seed"]), None


def build_operators(graph, params, bundle=None, decomposition=None):
    bundle = bundle or build_laplacian_bundle(graph)
    bank = get_bank(params["bank"])
    if params["mode"] == "exact":
        dec = decomposition or laplacian_decomposition(bundle)
        return bundle, build_exact_operators(dec, bank, params["levels"], laplacian=bundle.norm_laplacian)
    if params["mode"] == "cheb":
        return bundle, build_approx_operators(bundle, bank, params["levels"], params["degree"])
    raise ValueError(f"unknown mode {params['mode']!r}; choose exact or cheb")


def ode_config(params, t0=0.0, t1=1.0):
    if params["ode_method"] == "rk4":
        return OdeConfig(t0=t0, t1=t1, method="rk4", steps=params["ode_steps"])
    return OdeConfig(t0=t0, t1=t1, rtol=params["ode_rtol"], atol=params["ode_atol"])


def _train_config(params, seed, **override):
    kw = {dst: params[src] for src, dst in TRAIN_KEYS.items() if src in params}
    kw.update(override)
    return TrainConfig(seed=seed, **kw)


# --------------------------------------------------------------------------
# energy-evolution
# --------------------------------------------------------------------------


def _scaled_weight(rng, d_in, d_out, norm):
    W = rng.standard_normal((d_in, d_out))
    s = np.linalg.norm(W, 2)
    return W * (norm / s) if s > 0 else W


def run_energy_evolution(params, out):
    """Dirichlet energy over ``layers`` GCN layers and over the same span of FMP-ODE time."""
    graph, _ = load_graph(params)
    X0 = graph.features
    depth = params["layers"]
    rng = np.random.default_rng(params["seed"])
    bundle = build_laplacian_bundle(graph)
    dec = laplacian_decomposition(bundle)
    _, ops = build_operators(graph, params, bundle, dec)

    mu = params["gcn_norm"]
    lam = gcn_contraction(bundle, dec.eigenvalues)
    decay = (mu * lam) ** 2
    gcn = [dirichlet_energy(bundle, X0)]
    X = X0
    for _ in range(depth):
        X = gcn_forward(bundle, _scaled_weight(rng, X.shape[1], params["gcn_width"], mu), X)
        gcn.append(dirichlet_energy(bundle, X))

    M = params["trace_bound"]
    theta = FmpParams.random_psd(ops, X0.shape[1], M, rng)
    fmp = [ops.energy(X0)]
    X = X0
    for t in range(depth):
        X = integrate(lambda _t, Y: fmp_ode_rhs(ops, theta, Y), X, ode_config(params, t, t + 1)).final_state
        fmp.append(ops.energy(X))

    write_energy_csv(gcn, os.path.join(out, "energy_gcn.csv"))
    write_energy_csv(fmp, os.path.join(out, "energy_fmp.csv"))

    ratios = [b / a if a > 0 else 0.0 for a, b in zip(gcn[:-1], gcn[1:])]
    envelope = decay**depth * gcn[0]
    tol = 10.0 * params["ode_rtol"]
    fmp_monotone = all(b >= a * (1.0 - tol) for a, b in zip(fmp[:-1], fmp[1:]))
    fmp_bounded = all(e <= ode_energy_bound(M, ops.K, ops.J, t) * fmp[0] * (1.0 + tol) for t, e in enumerate(fmp))
    checks = {
        "gcnPerLayerDecay": max(ratios, default=0.0) <= decay + 1e-6,
        "gcnEnvelope": gcn[-1] <= envelope * (1.0 + 1e-9) + 1e-300,
        "gcnNegligible": gcn[-1] <= 1e-6 * gcn[0],
        "fmpNonDecreasing": fmp_monotone,
        "fmpBounded": fmp_bounded,
    }
    report = {
        "layers": depth,
        "gcnSpectralNorm": mu,
        "gcnContraction": lam,
        "gcnDecayFactor": decay,
        "gcnMaxRatio": max(ratios, default=0.0),
        "gcnFinal": gcn[-1],
        "fmpTraceBound": M,
        "fmpFinal": fmp[-1],
        "initialEnergy": gcn[0],
        "checks": checks,
    }
    write_json(report, os.path.join(out, "energy_summary.json"))
    return report, all(checks.values())


# --------------------------------------------------------------------------
# node-classify
# --------------------------------------------------------------------------


def _mean_std(vals):
    vals = np.asarray(vals, dtype=np.float64)
    return float(vals.mean()), float(vals.std())


def run_node_classify(params, out):
    """``repeats`` seeded training runs; reports mean and std of test accuracy."""
    if not params.get("data") and not params.get("synthetic"):
        raise ValueError("give a dataset directory with --data or pass --synthetic")
    graph, splits = load_graph(params)
    if graph.labels is None:
        raise ValueError("labels required")
    bundle, ops = build_operators(graph, params)
    prop = bundle if params["model"] == "gcn" else ops
    runs = []
    for i in range(params["repeats"]):
        seed = params["seed"] + i
        cfg = _train_config(params, seed)
        split = splits if splits is not None else stratified_split(graph.labels, seed)
        res = fit(graph, prop, cfg, split)
        write_metrics_csv(res.history, os.path.join(out, f"metrics_{i}.csv"))
        if i == 0:
            save_checkpoint(res.model, cfg, os.path.join(out, "model"))
        runs.append({"seed": seed, "testAcc": res.test_acc, "valAcc": res.val_acc, "bestEpoch": res.best_epoch, "epochs": len(res.history)})
    mean, std = _mean_std([r["testAcc"] for r in runs])
    report = {
        "model": params["model"],
        "nodes": graph.n,
        "edges": int(len(graph.edges)),
        "classes": graph.num_classes,
        "homophily": homophily(graph),
        "splitSource": "file" if splits is not None else "stratified-60-20-20",
        "runs": runs,
        "meanTestAcc": mean,
        "stdTestAcc": std,
    }
    write_json(report, os.path.join(out, "metrics.json"))
    floor = params.get("min_accuracy")
    return report, floor is None or mean >= floor


# --------------------------------------------------------------------------
# tightness-report
# --------------------------------------------------------------------------


def run_tightness(params, out):
    """Frame bounds of the exact operator set; passes when ``1 - deficit <= A <= B <= 1``."""
    if params["mode"] != "exact":
        raise ValueError("tightness-report requires --mode exact")
    graph, _ = load_graph(params)
    _, ops = build_operators(graph, params)
    rep = tightness_report(ops, probes=params["probes"], seed=params["seed"]).to_dict()
    tol = 1e-10
    rep["holds"] = bool(rep["B"] <= 1.0 + tol and rep["A"] >= 1.0 - rep["deficitBound"] - tol)
    rep["nodes"] = graph.n
    write_json(rep, os.path.join(out, "tightness.json"))
    return rep, rep["holds"]


# --------------------------------------------------------------------------
# stability-probe
# --------------------------------------------------------------------------


def run_stability(params, out):
    graph, _ = load_graph(params)
    _, ops = build_operators(graph, params)
    rng = np.random.default_rng(params["seed"])
    d = graph.features.shape[1]
    nchan = len(ops.channels())
    probes = []
    for k in range(params["probes"]):
        layers = [
            FmpParams([params["theta_scale"] * rng.standard_normal((d, d)) for _ in range(nchan)])
            for _ in range(params["layers"])
        ]
        rep = stability_probe(ops, layers, graph.features, params["perturb"], params["layers"], seed=params["seed"] + k)
        probes.append(rep.to_dict())
    holds = all(p["holds"] for p in probes)
    report = {"layers": params["layers"], "perturb": params["perturb"], "probes": probes, "holds": holds}
    write_json(report, os.path.join(out, "stability.json"))
    return report, holds


# --------------------------------------------------------------------------
# energy-sandwich
# --------------------------------------------------------------------------


def run_energy_sandwich(params, out):
    if params["mode"] != "exact":
        raise ValueError("energy-sandwich requires --mode exact")
    graph, _ = load_graph(params)
    _, ops = build_operators(graph, params)
    rng = np.random.default_rng(params["seed"])
    d = graph.features.shape[1]
    M = params["trace_bound"]
    trials = []
    for _ in range(params["trials"]):
        theta = FmpParams.random_psd(ops, d, M, rng)
        X = rng.standard_normal((graph.n, d))
        trials.append(energy_sandwich_check(ops, theta, X, strict=False).to_dict())
    violations = sum(not t["holds"] for t in trials)
    worst = max((t["observed"] / t["upper"] for t in trials if t["upper"] > 0), default=0.0)
    report = {
        "trials": len(trials),
        "traceBound": M,
        "factor": trials[0]["factor"] if trials else None,
        "violations": violations,
        "worstUpperRatio": worst,
        "minLowerRatio": min((t["observed"] / t["lower"] for t in trials if t["lower"] > 0), default=1.0),
        "holds": violations == 0,
    }
    write_json(report, os.path.join(out, "sandwich.json"))
    return report, violations == 0


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------


def sample_trials(budget, seed):
    """Seeded random draws from the hyperparameter search space."""
    rng = np.random.default_rng(seed)
    trials = []
    for _ in range(budget):
        t = {}
        for name, rule in SEARCH_SPACE.items():
            kind = rule[0]
            if kind == "log-uniform":
                t[name] = float(10.0 ** rng.uniform(math.log10(rule[1]), math.log10(rule[2])))
            elif kind == "uniform":
                t[name] = float(rng.uniform(rule[1], rule[2]))
            elif kind == "int":
                t[name] = int(rng.integers(rule[1], rule[2] + 1))
            else:
                t[name] = rule[1][int(rng.integers(len(rule[1])))]
        trials.append(t)
    return trials


def run_sweep(params, out):
    graph, splits = load_graph(params)
    bundle, ops = build_operators(graph, params)
    prop = bundle if params["model"] == "gcn" else ops
    split = splits if splits is not None else stratified_split(graph.labels, params["seed"])
    results = []
    for i, hp in enumerate(sample_trials(params["budget"], params["seed"])):
        cfg = _train_config(params, params["seed"] + i, **hp)
        res = fit(graph, prop, cfg, split)
        results.append({"trial": i, "hyperparameters": hp, "valAcc": res.val_acc, "testAcc": res.test_acc, "bestEpoch": res.best_epoch})
    best = max(results, key=lambda r: (r["valAcc"], -r["trial"])) if results else None
    report = {"model": params["model"], "budget": params["budget"], "trials": results, "best": best}
    write_json(report, os.path.join(out, "sweep.json"))
    return report, True


# --------------------------------------------------------------------------
# gen-sbm
# --------------------------------------------------------------------------


def run_gen_sbm(params, out):
    g = generate_sbm(params["seed"], n=params["nodes"], p_in=params["p_in"], p_out=params["p_out"], mu=params["mu"], sigma=params["sigma"])
    split = stratified_split(g.labels, params["seed"])
    write_graph_dir(g, out, split)
    report = {"nodes": g.n, "edges": int(len(g.edges)), "homophily": homophily(g)}
    write_json(report, os.path.join(out, "sbm.json"))
    return report, True


COMMANDS = {
    "energy-evolution": run_energy_evolution,
    "node-classify": run_node_classify,
    "tightness-report": run_tightness,
    "stability-probe": run_stability,
    "energy-sandwich": run_energy_sandwich,
    "sweep": run_sweep,
    "gen-sbm": run_gen_sbm,
}

OUTPUT_SCHEMAS = {
    "run.json": "run",
    "tightness.json": "tightness",
    "stability.json": "stability",
    "sandwich.json": "sandwich",
    "energy_summary.json": "energy_summary",
    "metrics.json": "metrics",
    "sweep.json": "sweep",
    "sbm.json": "sbm",
}


def load_schema(name):
    """Shipped JSON schema ``name`` (``run``, ``tightness``, ...) as a dict."""
    from importlib import resources

    return json.loads(resources.files("framelet_mp").joinpath("schemas", f"{name}.schema.json").read_text())
