"""Node-classification models, their hand-derived reverse pass, optimizers,
the training loop and the checkpoint format.

Three architectures share one parameter container:

``fmp``
    MLP encoder, dropout, ``layers`` residual FMP layers with ReLU, linear head.
``fmp-ode``
    Linear encoder, dropout, fixed-step RK4 through the FMP vector field, linear head.
``gcn``
    ``layers`` GCN layers ``relu(P H W)``, dropout, linear head.

The reverse pass differentiates the exact computation the forward pass
performs, including every RK4 stage, so gradients match finite differences
of the discretized model.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import DimensionError, DivergenceError
from .graph import Graph, LaplacianBundle, spmm, stratified_split
from .layers import BoundViolation, project_psd, relu
from .spectral import FrameletOperatorSet

logger = logging.getLogger(__name__)

MODEL_KINDS = ("fmp", "fmp-ode", "gcn")
OPTIMIZERS = ("adam", "adamax")
CHECKPOINT_FORMAT = "framelet-mp-checkpoint/1"


@dataclass
class TrainConfig:
    model: str = "fmp"
    learning_rate: float = 5e-3
    weight_decay: float = 1e-3
    dropout: float = 0.2
    hidden_dim: int = 64
    layers: int = 2
    optimizer: str = "adam"
    epochs: int = 1000
    patience: int = 100
    seed: int = 0
    encoder_layers: Optional[int] = None
    ode_steps: int = 8
    ode_horizon: float = 1.0
    per_level: bool = False
    psd_project: bool = False
    trace_bound: Optional[float] = None
    with_activation: bool = True
    check_energy: bool = False

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model {self.model!r}; choose from {MODEL_KINDS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if not 0.0 <= self.dropout <= 0.8:
            raise ValueError("dropout must lie in [0, 0.8]")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("need learning_rate > 0 and weight_decay >= 0")
        if self.hidden_dim < 1 or self.layers < 1 or self.ode_steps < 1:
            raise ValueError("hidden_dim, layers and ode_steps must be >= 1")
        if self.encoder_layers is None:
            self.encoder_layers = 1 if self.model == "fmp-ode" else 2
        if self.psd_project and self.trace_bound is None:
            raise ValueError("psd_project needs a trace_bound")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    """Named float64 tensors plus the dimensions that fix their shapes."""

    kind: str
    dims: dict
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def names(self):
        return list(self.tensors)

    def copy(self):
        return ModelParams(self.kind, dict(self.dims), OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def thetas(self, layer):
        return [self.tensors[f"fmp.{layer}.theta.{q}"] for q in range(self.dims["channels"])]

    def num_values(self):
        return sum(v.size for v in self.tensors.values())


def expected_shapes(kind, dims):
    """Ordered ``name -> shape`` map for a model kind and its dimensions."""
    d, h, c = dims["in_dim"], dims["hidden"], dims["classes"]
    shapes = OrderedDict()
    if kind in ("fmp", "fmp-ode"):
        for i in range(dims["encoder_layers"]):
            shapes[f"encoder.{i}.W"] = (d if i == 0 else h, h)
            shapes[f"encoder.{i}.b"] = (h,)
        blocks = dims["layers"] if kind == "fmp" else 1
        for t in range(blocks):
            for q in range(dims["channels"]):
                shapes[f"fmp.{t}.theta.{q}"] = (h, h)
    else:
        for i in range(dims["layers"]):
            shapes[f"gcn.{i}.W"] = (d if i == 0 else h, h)
    shapes["head.W"] = (h, c)
    shapes["head.b"] = (c,)
    return shapes


def init_model(cfg: TrainConfig, in_dim, n_classes, n_channels, seed=None) -> ModelParams:
    """Glorot-uniform weights, zero biases; ``Theta`` projected when requested."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dims = {
        "in_dim": int(in_dim),
        "hidden": int(cfg.hidden_dim),
        "classes": int(n_classes),
        "channels": int(n_channels) if cfg.model != "gcn" else 0,
        "encoder_layers": int(cfg.encoder_layers) if cfg.model != "gcn" else 0,
        "layers": int(cfg.layers),
    }
    tensors = OrderedDict()
    for name, shape in expected_shapes(cfg.model, dims).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
            continue
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        W = rng.uniform(-limit, limit, size=shape)
        if ".theta." in name:
            W /= max(n_channels, 1)
            if cfg.psd_project:
                W = project_psd(W, cfg.trace_bound)
        tensors[name] = W
    return ModelParams(cfg.model, dims, tensors)


# --------------------------------------------------------------------------
# Forward pass with cache
# --------------------------------------------------------------------------


def _mix(outs, thetas):
    Z = outs[0] @ thetas[0]
    for SX, T in zip(outs[1:], thetas[1:]):
        Z = Z + SX @ T
    return Z


def _channel_apply(ops, channels, X):
    return [ops.apply_channel(keys, X) for keys in channels]


def dropout_mask(shape, rate, seed):
    """Inverted-dropout mask: kept entries carry ``1 / (1 - rate)``."""
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    rng = np.random.default_rng(seed)
    return (rng.random(shape) < keep) / keep


def _forward(model, X, ops, cfg, training, dropout_seed):
    p = model.tensors
    cache = {"margin": np.inf}
    H = np.asarray(X, dtype=np.float64)

    if model.kind == "gcn":
        if not isinstance(ops, LaplacianBundle):
            raise TypeError("gcn models propagate with a LaplacianBundle")
        cache["gcn"] = []
        for i in range(model.dims["layers"]):
            PH = spmm(ops.propagator, H)
            pre = PH @ p[f"gcn.{i}.W"]
            cache["gcn"].append((PH, pre))
            cache["margin"] = min(cache["margin"], float(np.min(np.abs(pre))))
            H = relu(pre)
    else:
        if not isinstance(ops, FrameletOperatorSet):
            raise TypeError("fmp models propagate with a FrameletOperatorSet")
        cache["enc"] = []
        n_enc = model.dims["encoder_layers"]
        for i in range(n_enc):
            pre = H @ p[f"encoder.{i}.W"] + p[f"encoder.{i}.b"]
            cache["enc"].append((H, pre))
            if i < n_enc - 1:
                cache["margin"] = min(cache["margin"], float(np.min(np.abs(pre))))
                H = relu(pre)
            else:
                H = pre

    mask = dropout_mask(H.shape, cfg.dropout, dropout_seed) if training else None
    cache["mask"] = mask
    if mask is not None:
        H = H * mask

    if model.kind != "gcn":
        channels = ops.channels(cfg.per_level)
        if len(channels) != model.dims["channels"]:
            raise DimensionError(f"operator set has {len(channels)} channels, model expects {model.dims['channels']}")
        cache["channels"] = channels
        energies = [ops.energy(H)] if cfg.check_energy else None
        if model.kind == "fmp":
            cache["fmp"] = []
            for t in range(model.dims["layers"]):
                outs = _channel_apply(ops, channels, H)
                Z = _mix(outs, model.thetas(t))
                cache["fmp"].append((outs, Z))
                if cfg.with_activation:
                    cache["margin"] = min(cache["margin"], float(np.min(np.abs(Z))))
                    H = H + relu(Z)
                else:
                    H = H + Z
                if energies is not None:
                    energies.append(ops.energy(H))
        else:
            thetas = model.thetas(0)
            h = cfg.ode_horizon / cfg.ode_steps
            cache["ode"] = []
            for _ in range(cfg.ode_steps):
                stages = []
                ks = []
                for coef in (None, 0.5, 0.5, 1.0):
                    u = H if coef is None else H + (coef * h) * ks[-1]
                    outs = _channel_apply(ops, channels, u)
                    stages.append(outs)
                    ks.append(_mix(outs, thetas))
                H = H + (h / 6.0) * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
                cache["ode"].append(stages)
                if energies is not None:
                    energies.append(ops.energy(H))
        cache["energies"] = energies

    cache["features"] = H
    logits = H @ p["head.W"] + p["head.b"]
    return logits, cache


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _split_index(graph, split):
    if graph.labels is None:
        raise ValueError("labels required")
    idx = np.asarray(split, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ValueError("empty split")
    return idx


def _penalty(model, wd):
    return 0.5 * wd * sum(float(np.sum(v * v)) for v in model.tensors.values())


def forward_loss(model, graph: Graph, ops, split, cfg: TrainConfig, training=False, dropout_seed=0):
    """Mean NLL over ``split`` plus ``weight_decay / 2 * sum ||p||^2``; returns ``(loss, logits)``."""
    loss, logits, _ = _loss_with_cache(model, graph, ops, split, cfg, training, dropout_seed)
    return loss, logits


def _loss_with_cache(model, graph, ops, split, cfg, training, dropout_seed):
    idx = _split_index(graph, split)
    logits, cache = _forward(model, graph.features, ops, cfg, training, dropout_seed)
    logp = log_softmax(logits)
    nll = -float(np.mean(logp[idx, graph.labels[idx]]))
    cache["logp"] = logp
    cache["idx"] = idx
    return nll + _penalty(model, cfg.weight_decay), logits, cache


# --------------------------------------------------------------------------
# Reverse pass
# --------------------------------------------------------------------------


def _fmp_vjp(ops, channels, thetas, G):
    """Adjoint of ``X -> sum_q S_q X Theta_q`` applied to ``G`` (every ``S_q`` is symmetric)."""
    out = None
    for keys, T in zip(channels, thetas):
        term = ops.apply_channel(keys, G @ T.T)
        out = term if out is None else out + term
    return out


def _backward_from_cache(model, graph, ops, cfg, cache, scale=1.0):
    p = model.tensors
    grads = OrderedDict((k, np.zeros_like(v)) for k, v in p.items())
    idx = cache["idx"]
    probs = np.exp(cache["logp"][idx])
    probs[np.arange(len(idx)), graph.labels[idx]] -= 1.0
    G = np.zeros_like(cache["logp"])
    np.add.at(G, idx, probs * (scale / len(idx)))

    H = cache["features"]
    grads["head.W"] += H.T @ G
    grads["head.b"] += G.sum(axis=0)
    G = G @ p["head.W"].T

    if model.kind == "fmp":
        channels = cache["channels"]
        for t in reversed(range(model.dims["layers"])):
            outs, Z = cache["fmp"][t]
            thetas = model.thetas(t)
            GZ = G * (Z > 0) if cfg.with_activation else G
            for q, SX in enumerate(outs):
                grads[f"fmp.{t}.theta.{q}"] += SX.T @ GZ
            G = G + _fmp_vjp(ops, channels, thetas, GZ)
    elif model.kind == "fmp-ode":
        channels = cache["channels"]
        thetas = model.thetas(0)
        gth = [grads[f"fmp.0.theta.{q}"] for q in range(len(thetas))]
        h = cfg.ode_horizon / cfg.ode_steps
        for stages in reversed(cache["ode"]):
            # y' = y + h/6 (k1 + 2k2 + 2k3 + k4); u2 = y + h/2 k1, u3 = y + h/2 k2, u4 = y + h k3
            gk = [None, None, None, (h / 6.0) * G]
            gy = G.copy()
            carry = {3: h, 2: 0.5 * h, 1: 0.5 * h}
            weights = (h / 6.0, h / 3.0, h / 3.0)
            for s in (3, 2, 1, 0):
                if gk[s] is None:
                    gk[s] = weights[s] * G + carry[s + 1] * gu
                for q, SX in enumerate(stages[s]):
                    gth[q] += SX.T @ gk[s]
                gu = _fmp_vjp(ops, channels, thetas, gk[s])
                gy += gu
            G = gy

    mask = cache["mask"]
    if mask is not None:
        G = G * mask

    if model.kind == "gcn":
        for i in reversed(range(model.dims["layers"])):
            PH, pre = cache["gcn"][i]
            Gp = G * (pre > 0)
            grads[f"gcn.{i}.W"] += PH.T @ Gp
            G = spmm(ops.propagator, Gp @ p[f"gcn.{i}.W"].T)
    else:
        n_enc = model.dims["encoder_layers"]
        for i in reversed(range(n_enc)):
            Hin, pre = cache["enc"][i]
            if i < n_enc - 1:
                G = G * (pre > 0)
            grads[f"encoder.{i}.W"] += Hin.T @ G
            grads[f"encoder.{i}.b"] += G.sum(axis=0)
            G = G @ p[f"encoder.{i}.W"].T

    if cfg.weight_decay:
        for k, v in p.items():
            grads[k] += (scale * cfg.weight_decay) * v
    return grads


def loss_and_grad(model, graph, ops, split, cfg, training=False, dropout_seed=0, scale=1.0):
    """Loss, logits and gradients of ``scale * loss`` for every parameter."""
    loss, logits, cache = _loss_with_cache(model, graph, ops, split, cfg, training, dropout_seed)
    grads = _backward_from_cache(model, graph, ops, cfg, cache, scale)
    return loss, logits, grads


def backward(model, graph, ops, split, cfg, training=False, dropout_seed=0, scale=1.0):
    """Gradients of ``scale * forward_loss`` with the same names and shapes as the parameters."""
    return loss_and_grad(model, graph, ops, split, cfg, training, dropout_seed, scale)[2]


def relu_margin(model, graph, ops, cfg, training=False, dropout_seed=0):
    """Smallest ``|pre-activation|`` over every ReLU; finite differences need it above their step."""
    return _forward(model, graph.features, ops, cfg, training, dropout_seed)[1]["margin"]


def finite_difference_check(model, graph, ops, split, cfg, h=1e-5, training=False, dropout_seed=0):
    """Per-tensor relative error ``||g - g_fd|| / max(||g||, ||g_fd||)`` of central differences."""
    grads = backward(model, graph, ops, split, cfg, training, dropout_seed)
    out = {}
    for name, arr in model.tensors.items():
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fflat = fd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = forward_loss(model, graph, ops, split, cfg, training, dropout_seed)[0]
            flat[i] = old - h
            lm = forward_loss(model, graph, ops, split, cfg, training, dropout_seed)[0]
            flat[i] = old
            fflat[i] = (lp - lm) / (2.0 * h)
        denom = max(float(np.linalg.norm(grads[name])), float(np.linalg.norm(fd)), 1e-12)
        out[name] = float(np.linalg.norm(grads[name] - fd)) / denom
    return out


# --------------------------------------------------------------------------
# Optimizers
# --------------------------------------------------------------------------

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def init_optimizer_state(model):
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in model.tensors.items()},
        "v": {k: np.zeros_like(v) for k, v in model.tensors.items()},
    }


def optimizer_step(params, grads, state, cfg: TrainConfig):
    """One Adam or Adamax update in place, then PSD projection of every ``Theta`` if enabled.

    ``params`` is a :class:`ModelParams` or a plain ``name -> array`` dict.
    """
    tensors = params.tensors if isinstance(params, ModelParams) else params
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state["t"] += 1
    t = state["t"]
    lr = cfg.learning_rate
    for name, g in grads.items():
        m = state["m"][name]
        v = state["v"][name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        if cfg.optimizer == "adam":
            v *= BETA2
            v += (1.0 - BETA2) * g * g
            mhat = m / (1.0 - BETA1**t)
            vhat = v / (1.0 - BETA2**t)
            tensors[name] -= lr * mhat / (np.sqrt(vhat) + EPS)
        else:
            np.maximum(BETA2 * v, np.abs(g), out=v)
            tensors[name] -= (lr / (1.0 - BETA1**t)) * m / (v + EPS)
    if cfg.psd_project:
        for name in tensors:
            if ".theta." in name:
                tensors[name] = project_psd(tensors[name], cfg.trace_bound)
    return params, state


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class FitResult:
    model: ModelParams
    history: list
    best_epoch: int
    val_acc: float
    test_acc: float

    def __iter__(self):
        yield self.model
        yield self.history


def accuracy(logits, labels, idx):
    idx = np.asarray(idx)
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx])) if len(idx) else float("nan")


def _check_energies(energies, epoch):
    if energies is None:
        return
    for t in range(1, len(energies)):
        if energies[t] < energies[t - 1] * (1.0 - 1e-9) - 1e-300:
            raise BoundViolation(f"Dirichlet energy decreased at layer {t} in epoch {epoch}")


def fit(graph: Graph, ops, cfg: TrainConfig, split=None) -> FitResult:
    """Full-batch training with early stopping on validation accuracy.

    The returned model is the best-validation snapshot and ``test_acc`` is
    measured on it. ``split`` defaults to a stratified 60/20/20 split seeded
    by ``cfg.seed``.
    """
    if graph.labels is None:
        raise ValueError("labels required")
    if split is None:
        split = stratified_split(graph.labels, cfg.seed)
    for part in ("train", "val", "test"):
        if len(split[part]) == 0:
            raise ValueError(f"empty {part} split")
    n_channels = 0 if cfg.model == "gcn" else len(ops.channels(cfg.per_level))
    model = init_model(cfg, graph.features.shape[1], graph.num_classes, n_channels)
    state = init_optimizer_state(model)
    history = []
    best = (-1.0, np.inf)
    best_model, best_epoch, best_test = model.copy(), 0, float("nan")
    y = graph.labels

    for epoch in range(1, cfg.epochs + 1):
        loss, _, cache = _loss_with_cache(model, graph, ops, split["train"], cfg, True, (cfg.seed, epoch))
        if not np.isfinite(loss):
            raise DivergenceError(epoch, loss)
        if cfg.check_energy:
            _check_energies(cache["energies"], epoch)
        grads = _backward_from_cache(model, graph, ops, cfg, cache)
        optimizer_step(model, grads, state, cfg)

        val_loss, logits = forward_loss(model, graph, ops, split["val"], cfg)
        if not np.isfinite(val_loss):
            raise DivergenceError(epoch, val_loss)
        row = {
            "epoch": epoch,
            "trainLoss": loss,
            "valLoss": val_loss,
            "trainAcc": accuracy(logits, y, split["train"]),
            "valAcc": accuracy(logits, y, split["val"]),
            "testAcc": accuracy(logits, y, split["test"]),
        }
        history.append(row)
        if (row["valAcc"], -val_loss) > (best[0], -best[1]):
            best = (row["valAcc"], val_loss)
            best_model, best_epoch, best_test = model.copy(), epoch, row["testAcc"]
        elif epoch - best_epoch >= cfg.patience:
            break

    return FitResult(best_model, history, best_epoch, best[0], best_test)


def predict(model, graph, ops, cfg):
    logits, _ = _forward(model, graph.features, ops, cfg, False, 0)
    return logits


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "trainLoss", "valAcc", "testAcc")


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])


def save_checkpoint(model: ModelParams, cfg: TrainConfig, directory):
    """Write ``model.json`` (manifest) and ``model.bin`` (little-endian f64, row-major)."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    offset = 0
    with open(os.path.join(directory, "model.bin"), "wb") as fh:
        for name, arr in model.tensors.items():
            blob = np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C")
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "f64", "offset": offset, "nbytes": len(blob)})
            fh.write(blob)
            offset += len(blob)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "dims": model.dims,
        "config": asdict(cfg),
        "tensors": entries,
    }
    with open(os.path.join(directory, "model.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory, cfg: TrainConfig = None):
    """Read a checkpoint back; shapes are validated against the stored or given config."""
    with open(os.path.join(directory, "model.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    stored = TrainConfig.from_dict(manifest["config"])
    cfg = cfg or stored
    kind = manifest["kind"]
    if kind != cfg.model:
        raise ValueError(f"checkpoint holds a {kind} model, config asks for {cfg.model}")
    dims = manifest["dims"]
    if dims["hidden"] != cfg.hidden_dim or dims["layers"] != cfg.layers:
        raise DimensionError("checkpoint dimensions disagree with the config")
    want = expected_shapes(kind, dims)
    with open(os.path.join(directory, "model.bin"), "rb") as fh:
        raw = fh.read()
    tensors = OrderedDict()
    names = [e["name"] for e in manifest["tensors"]]
    if names != list(want):
        raise DimensionError(f"checkpoint tensors {names} do not match expected {list(want)}")
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        if shape != want[e["name"]]:
            raise DimensionError(f"{e['name']}: stored shape {shape}, expected {want[e['name']]}")
        if e["dtype"] != "f64":
            raise ValueError(f"{e['name']}: unsupported dtype {e['dtype']!r}")
        end = e["offset"] + e["nbytes"]
        if end > len(raw) or e["nbytes"] != 8 * int(np.prod(shape, dtype=np.int64)):
            raise DimensionError(f"{e['name']}: byte range does not fit the blob")
        tensors[e["name"]] = np.frombuffer(raw[e["offset"] : end], dtype="<f8").reshape(shape).astype(np.float64)
    return ModelParams(kind, dims, tensors), cfg
