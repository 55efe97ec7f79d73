import csv
import math

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from framelet_mp.errors import DimensionError, DivergenceError
from framelet_mp.graph import build_laplacian_bundle, generate_sbm, spmm, stratified_split
from framelet_mp.layers import BoundViolation
from framelet_mp.spectral import exact_operators_for, haar_bank
from framelet_mp.train import (
    METRIC_COLUMNS,
    TrainConfig,
    _check_energies,
    backward,
    finite_difference_check,
    fit,
    forward_loss,
    init_model,
    init_optimizer_state,
    load_checkpoint,
    optimizer_step,
    relu_margin,
    save_checkpoint,
    write_metrics_csv,
)

from conftest import small_problem

KINDS = ["fmp", "fmp-ode", "gcn"]


@pytest.fixture(scope="module")
def sbm_ops():
    g = generate_sbm(0)
    b = build_laplacian_bundle(g)
    return g, b, exact_operators_for(b, haar_bank(), 2)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert 1e-3 <= cfg.learning_rate <= 1e-2
    assert 1e-3 <= cfg.weight_decay <= 1e-1
    assert cfg.hidden_dim in (64, 128, 256)
    assert cfg.encoder_layers == 2
    assert TrainConfig(model="fmp-ode").encoder_layers == 1
    for bad in ({"model": "gat"}, {"optimizer": "sgd"}, {"dropout": 0.9}, {"psd_project": True}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError, match="unknown training options"):
        TrainConfig.from_dict({"lr": 0.1})


@pytest.mark.parametrize("kind", KINDS)
def test_uniform_logits_give_log_c(kind):
    g, ops, cfg, model, split = small_problem(kind)
    model.tensors["head.W"][:] = 0
    model.tensors["head.b"][:] = 0
    cfg.weight_decay = 0.0
    loss, logits = forward_loss(model, g, ops, split, cfg)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    assert np.all(logits == 0)


def test_loss_vanishes_with_growing_margin():
    g, ops, cfg, model, _ = small_problem("fmp")
    cfg.weight_decay = 0.0
    node = np.array([3])
    losses = []
    for margin in (1.0, 5.0, 20.0):
        model.tensors["head.W"][:] = 0
        model.tensors["head.b"][:] = 0
        model.tensors["head.b"][g.labels[3]] = margin
        losses.append(forward_loss(model, g, ops, node, cfg)[0])
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-8


def test_loss_errors():
    g, ops, cfg, model, _ = small_problem("fmp")
    with pytest.raises(ValueError, match="empty split"):
        forward_loss(model, g, ops, [], cfg)
    with pytest.raises(ValueError, match="labels required"):
        forward_loss(model, g.with_labels(None), ops, [0], cfg)


@pytest.mark.parametrize("kind", KINDS)
def test_loss_deterministic(kind):
    g, ops, cfg, model, split = small_problem(kind, dropout=0.3)
    a = forward_loss(model, g, ops, split, cfg, training=True, dropout_seed=(0, 4))[0]
    b = forward_loss(model, g, ops, split, cfg, training=True, dropout_seed=(0, 4))[0]
    assert a == b
    c = forward_loss(model, g, ops, split, cfg, training=True, dropout_seed=(0, 5))[0]
    assert c != a


@pytest.mark.parametrize("kind", KINDS)
def test_zero_upstream_gives_zero_gradients(kind):
    g, ops, cfg, model, split = small_problem(kind)
    grads = backward(model, g, ops, split, cfg, scale=0.0)
    assert all(np.all(v == 0) for v in grads.values())
    assert set(grads) == set(model.tensors)
    assert all(grads[k].shape == model.tensors[k].shape for k in grads)


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_scales_linearly(kind):
    g, ops, cfg, model, split = small_problem(kind)
    g1 = backward(model, g, ops, split, cfg)
    g2 = backward(model, g, ops, split, cfg, scale=2.0)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2.0 * g1[k], rtol=1e-15, atol=0)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("dropout", [0.0, 0.4])
def test_finite_differences(kind, dropout):
    g, ops, cfg, model, split = small_problem(kind, dropout=dropout)
    h = 1e-5
    assert relu_margin(model, g, ops, cfg, training=True, dropout_seed=7) > 10 * h
    errs = finite_difference_check(model, g, ops, split, cfg, h=h, training=True, dropout_seed=7)
    assert max(errs.values()) <= 1e-5, errs


def test_finite_differences_per_level_nu():
    g, ops, cfg, model, split = small_problem("fmp-ode", bank="nu")
    errs = finite_difference_check(model, g, ops, split, cfg)
    assert max(errs.values()) <= 1e-5


@pytest.mark.parametrize("opt", ["adam", "adamax"])
def test_optimizer_scalar_quadratic(opt):
    cfg = TrainConfig(learning_rate=0.1, optimizer=opt)
    params = {"w": np.array([1.0])}
    state = {"t": 0, "m": {"w": np.zeros(1)}, "v": {"w": np.zeros(1)}}
    for _ in range(200):
        optimizer_step(params, {"w": 2 * params["w"]}, state, cfg)
    assert abs(params["w"][0]) <= 1e-3


def test_optimizer_first_adam_step_is_lr_sign():
    cfg = TrainConfig(learning_rate=0.01)
    params = {"w": np.array([1.0, -2.0])}
    state = {"t": 0, "m": {"w": np.zeros(2)}, "v": {"w": np.zeros(2)}}
    optimizer_step(params, {"w": np.array([3.0, -0.5])}, state, cfg)
    np.testing.assert_allclose(params["w"], [0.99, -1.99], atol=1e-8)


def test_zero_gradients_leave_params():
    g, ops, cfg, model, _ = small_problem("fmp")
    before = model.copy()
    optimizer_step(model, {k: np.zeros_like(v) for k, v in model.tensors.items()}, init_optimizer_state(model), cfg)
    for k in model.tensors:
        assert np.array_equal(model.tensors[k], before.tensors[k])


def test_nonfinite_gradient_names_parameter():
    g, ops, cfg, model, _ = small_problem("fmp")
    grads = {k: np.zeros_like(v) for k, v in model.tensors.items()}
    grads["head.b"][0] = np.nan
    with pytest.raises(FloatingPointError, match="head.b"):
        optimizer_step(model, grads, init_optimizer_state(model), cfg)


def test_psd_projection_after_update():
    g, ops, _, _, _ = small_problem("fmp")
    cfg = TrainConfig(hidden_dim=4, psd_project=True, trace_bound=0.5)
    model = init_model(cfg, 2, 2, len(ops.channels()))
    grads = {k: np.random.default_rng(0).standard_normal(v.shape) for k, v in model.tensors.items()}
    optimizer_step(model, grads, init_optimizer_state(model), cfg)
    for k, v in model.tensors.items():
        if ".theta." in k:
            assert np.linalg.eigvalsh(v).min() >= -1e-12 and np.trace(v) <= 0.5 + 1e-12


@pytest.mark.parametrize("kind", KINDS)
def test_fit_on_sbm(kind, sbm_ops):
    g, b, ops = sbm_ops
    res = fit(g, b if kind == "gcn" else ops, TrainConfig(model=kind, epochs=300, patience=50))
    assert res.test_acc >= 0.9
    assert res.best_epoch == max(range(len(res.history)), key=lambda i: (res.history[i]["valAcc"], -res.history[i]["valLoss"])) + 1


def test_fit_history_deterministic(sbm_ops):
    g, _, ops = sbm_ops
    cfg = TrainConfig(epochs=15, seed=3)
    a, b = fit(g, ops, cfg), fit(g, ops, cfg)
    assert a.history == b.history


def test_shuffled_labels_are_chance(sbm_ops):
    g, _, ops = sbm_ops
    accs = []
    for seed in range(4):
        perm = np.random.default_rng(seed).permutation(g.n)
        shuffled = g.with_labels(g.labels[perm])
        accs.append(fit(shuffled, ops, TrainConfig(epochs=100, patience=30, seed=seed)).test_acc)
    assert abs(np.mean(accs) - 0.5) <= 0.15


def test_divergence_names_epoch(sbm_ops):
    g, _, ops = sbm_ops
    X = np.array(g.features)
    X[0, 0] = np.nan
    with pytest.raises(DivergenceError, match="epoch 1"):
        fit(g.with_features(X), ops, TrainConfig(epochs=3))


def test_energy_hook_with_linear_psd_layers(sbm_ops):
    g, _, ops = sbm_ops
    for kind in ("fmp", "fmp-ode"):
        cfg = TrainConfig(model=kind, epochs=10, psd_project=True, trace_bound=1.0, with_activation=False, check_energy=True)
        fit(g, ops, cfg)


def test_energy_hook_detects_decay():
    _check_energies([3.0, 3.0, 4.0], 1)
    with pytest.raises(BoundViolation, match="layer 2"):
        _check_energies([3.0, 4.0, 3.5], 9)


def test_fit_rejects_empty_split(sbm_ops):
    g, _, ops = sbm_ops
    split = stratified_split(g.labels, 0)
    split["val"] = np.array([], dtype=int)
    with pytest.raises(ValueError, match="empty val split"):
        fit(g, ops, TrainConfig(epochs=2), split=split)


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_round_trip(kind, tmp_path):
    g, ops, cfg, model, split = small_problem(kind)
    save_checkpoint(model, cfg, tmp_path)
    back, cfg2 = load_checkpoint(tmp_path)
    assert cfg2 == cfg
    assert back.names() == model.names()
    for k in model.tensors:
        assert back.tensors[k].tobytes() == model.tensors[k].tobytes()
    assert forward_loss(back, g, ops, split, cfg)[0] == forward_loss(model, g, ops, split, cfg)[0]
    raw = (tmp_path / "model.bin").read_bytes()
    assert len(raw) == 8 * model.num_values()


def test_checkpoint_shape_mismatch(tmp_path):
    _, _, cfg, model, _ = small_problem("fmp")
    save_checkpoint(model, cfg, tmp_path)
    with pytest.raises(DimensionError):
        load_checkpoint(tmp_path, TrainConfig(hidden_dim=8, dropout=0.0))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path, TrainConfig(model="gcn", hidden_dim=4))


def test_metrics_csv(tmp_path, sbm_ops):
    g, _, ops = sbm_ops
    res = fit(g, ops, TrainConfig(epochs=3))
    path = tmp_path / "metrics.csv"
    write_metrics_csv(res.history, path)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == METRIC_COLUMNS == ("epoch", "trainLoss", "valAcc", "testAcc")
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]


def _lr_accuracy(X, labels, seed):
    split = stratified_split(labels, seed)
    clf = LogisticRegression().fit(X[split["train"]], labels[split["train"]])
    return clf.score(X[split["test"]], labels[split["test"]])


def test_logistic_oracle_on_raw_features_matches_bayes_rate():
    # class means -mu*1 and +mu*1 in two dimensions, isotropic sigma:
    # Bayes accuracy Phi(mu * sqrt(2) / sigma) = Phi(0.3536) = 0.638
    bayes = 0.5 * (1 + math.erf(0.5 * math.sqrt(2) / 2.0 / math.sqrt(2)))
    accs = [_lr_accuracy(np.asarray(generate_sbm(s).features), generate_sbm(s).labels, s) for s in range(10)]
    assert abs(np.mean(accs) - bayes) <= 0.08


def test_logistic_oracle_on_smoothed_features():
    accs = []
    for s in range(10):
        g = generate_sbm(s)
        b = build_laplacian_bundle(g)
        smooth = spmm(b.propagator, spmm(b.propagator, g.features))
        accs.append(_lr_accuracy(smooth, g.labels, s))
    assert np.mean(accs) >= 0.8
