"""Attentive CNN for binary arousal/valence classification.

Topology: conv over time (kernels span all filter-bank rows) -> ReLU ->
max-pool -> softmax attention over pooled steps -> concat(attentive vector,
flattened pooled maps) -> dropout -> dense softmax over two classes.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import EmptyDataset, ShapeMismatch
from .metrics import confusion_matrix, uar_present

log = logging.getLogger(__name__)

PARAM_NAMES = ("conv_w", "conv_b", "att_w", "dense_w", "dense_b")
N_CLASSES = 2


@dataclass(frozen=True)
class HyperParams:
    n_kernels: int = 200
    kernel_width: int = 10
    pool_size: int = 30
    pool_stride: int | None = None  # None -> pool_size
    batch_size: int = 32
    dropout_keep: float = 0.5
    epochs: int = 50
    ft_epochs: int = 10
    learning_rate: float = 1e-3
    n_features: int = 26
    seed: int = 0

    def __post_init__(self):
        if self.n_kernels < 1 or self.kernel_width < 1 or self.pool_size < 1 or self.stride < 1:
            raise ValueError("n_kernels, kernel_width, pool_size and pool_stride must be >= 1")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.ft_epochs < 0:
            raise ValueError("batch_size must be >= 1 and epoch counts >= 0")

    @property
    def stride(self) -> int:
        return self.pool_size if self.pool_stride is None else self.pool_stride

    def conv_length(self, input_T: int) -> int:
        if input_T < self.kernel_width:
            raise ShapeMismatch(f"input length {input_T} < kernel width {self.kernel_width}")
        return input_T - self.kernel_width + 1

    def pooled_steps(self, input_T: int) -> int:
        return nn.pooled_length(self.conv_length(input_T), self.pool_size, self.stride)

    def dense_dim(self, input_T: int) -> int:
        return self.n_kernels * (1 + self.pooled_steps(input_T))

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "paper-default": {},
    # stride 92 gives exactly 8 attention steps on a 7.5 s input
    "paper-figures": {"pool_stride": 92},
}


def preset(name: str, **overrides) -> HyperParams:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return HyperParams(**{**PRESETS[name], **overrides})


@dataclass
class Prediction:
    label: int
    probabilities: np.ndarray
    alpha: np.ndarray


@dataclass
class Dataset:
    X: np.ndarray  # (N, R, T)
    y: np.ndarray  # (N,) int
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 3 or len(self.X) != len(self.y):
            raise ShapeMismatch(f"X {self.X.shape} / y {self.y.shape} inconsistent")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.y))]

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], [self.ids[i] for i in idx])

    @classmethod
    def concat(cls, parts) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise EmptyDataset("nothing to concatenate")
        return cls(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            [i for p in parts for i in p.ids],
        )


def init_params(hp: HyperParams, input_T: int, rng: np.random.Generator) -> dict:
    """Glorot-uniform weights, zero biases, zero attention vector."""
    K, R, w = hp.n_kernels, hp.n_features, hp.kernel_width
    D = hp.dense_dim(input_T)
    a_conv = math.sqrt(6.0 / (R * w + K * w))
    a_dense = math.sqrt(6.0 / (D + N_CLASSES))
    return {
        "conv_w": rng.uniform(-a_conv, a_conv, size=(K, R, w)),
        "conv_b": np.zeros(K),
        "att_w": np.zeros(K),
        "dense_w": rng.uniform(-a_dense, a_dense, size=(N_CLASSES, D)),
        "dense_b": np.zeros(N_CLASSES),
    }


def check_params(params: dict, hp: HyperParams, input_T: int) -> None:
    K, R, w = hp.n_kernels, hp.n_features, hp.kernel_width
    expected = {
        "conv_w": (K, R, w),
        "conv_b": (K,),
        "att_w": (K,),
        "dense_w": (N_CLASSES, hp.dense_dim(input_T)),
        "dense_b": (N_CLASSES,),
    }
    for name, shape in expected.items():
        if name not in params:
            raise ShapeMismatch(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ShapeMismatch(
                f"{name} has shape {params[name].shape}, expected {shape} for input length {input_T}"
            )


def forward_batch(X, params, hp: HyperParams, train_mode=False, rng=None):
    """Batched forward pass.  Returns (probs (B, 2), alpha (B, Tp), cache)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] != hp.n_features:
        raise ShapeMismatch(f"expected (B, {hp.n_features}, T) features, got {X.shape}")
    conv, c_cache = nn.conv1d_forward(X, params["conv_w"], params["conv_b"])
    pooled, p_cache = nn.maxpool_forward(conv, hp.pool_size, hp.stride)
    B, K, Tp = pooled.shape
    steps = pooled.transpose(0, 2, 1)  # (B, Tp, K): one K-vector per pooled step
    alpha, attentive, a_cache = nn.attention_forward(steps, params["att_w"])
    h = np.concatenate([attentive, pooled.reshape(B, K * Tp)], axis=1)
    mask = None
    if train_mode and hp.dropout_keep < 1.0:
        if rng is None:
            raise ValueError("train_mode dropout needs an rng")
        mask = nn.DropoutMask.sample(h.shape, hp.dropout_keep, rng)
        h = mask.apply(h)
    probs, d_cache = nn.dense_softmax_forward(h, params["dense_w"], params["dense_b"])
    cache = {"conv": c_cache, "pool": p_cache, "att": a_cache, "dense": d_cache,
             "mask": mask, "shape": (B, K, Tp), "probs": probs}
    return probs, alpha, cache


def forward(features, params, hp: HyperParams, train_mode=False, rng=None):
    """Single-utterance forward.  ``features`` is a FeatureMatrix or (R, T) array."""
    values = getattr(features, "values", features)
    probs, alpha, cache = forward_batch(np.asarray(values)[None], params, hp, train_mode, rng)
    pred = Prediction(int(np.argmax(probs[0])), probs[0], alpha[0])
    return pred, cache


def backward(cache, labels, params, hp: HyperParams):
    """Per-sample losses and gradients of their batch mean."""
    probs = cache["probs"]
    losses, g_logits = nn.cross_entropy(probs, labels)
    g_logits = g_logits / len(losses)
    g_dw, g_db, g_h = nn.dense_backward(g_logits, cache["dense"])
    if cache["mask"] is not None:
        g_h = cache["mask"].backward(g_h)
    B, K, Tp = cache["shape"]
    g_steps, g_att = nn.attention_backward(None, g_h[:, :K], cache["att"])
    g_pooled = g_h[:, K:].reshape(B, K, Tp) + g_steps.transpose(0, 2, 1)
    g_conv = nn.maxpool_backward(g_pooled, cache["pool"])
    g_cw, g_cb, _ = nn.conv1d_backward(g_conv, cache["conv"], params["conv_w"], need_input_grad=False)
    grads = {"conv_w": g_cw, "conv_b": g_cb, "att_w": g_att, "dense_w": g_dw, "dense_b": g_db}
    return losses, grads


def loss_and_grads(params, hp, X, y, train_mode=False, rng=None):
    probs, _, cache = forward_batch(X, params, hp, train_mode, rng)
    losses, grads = backward(cache, y, params, hp)
    return float(losses.mean()), grads


def predict(params, hp: HyperParams, X, batch_size: int = 64):
    """Inference-mode class probabilities and attention weights."""
    X = np.asarray(X, dtype=np.float64)
    probs, alphas = [], []
    for start in range(0, len(X), batch_size):
        p, a, _ = forward_batch(X[start : start + batch_size], params, hp)
        probs.append(p)
        alphas.append(a)
    if not probs:
        return np.zeros((0, N_CLASSES)), np.zeros((0, 0))
    return np.concatenate(probs), np.concatenate(alphas)


def evaluate(params, hp, data: Dataset) -> np.ndarray:
    probs, _ = predict(params, hp, data.X)
    return confusion_matrix(data.y, probs.argmax(axis=1), N_CLASSES)


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def train_epoch(data: Dataset, params, hp: HyperParams, adam: nn.AdamState, rng) -> float:
    """One shuffled pass of mini-batch Adam; returns the epoch-mean training loss."""
    if len(data) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    order = rng.permutation(len(data))
    total = 0.0
    for start in range(0, len(order), hp.batch_size):
        idx = order[start : start + hp.batch_size]
        loss, grads = loss_and_grads(params, hp, data.X[idx], data.y[idx], True, rng)
        if not math.isfinite(loss):
            raise nn.NonFiniteError(f"loss became {loss}")
        nn.adam_step(params, grads, adam)
        total += loss * len(idx)
    return total / len(data)


def fit(train: Dataset, dev: Dataset | None, params, hp: HyperParams, rng=None):
    """Train ``hp.epochs`` epochs; keep the parameters of the best dev-UAR epoch.

    Without a dev set (or with ``dev`` empty) the final-epoch parameters are
    returned.  ``params`` is not modified.  Returns (params, history).
    """
    if len(train) == 0:
        raise EmptyDataset("training set is empty")
    rng = rng if rng is not None else np.random.default_rng(hp.seed)
    params = copy_params(params)
    adam = nn.AdamState(learning_rate=hp.learning_rate)
    use_dev = dev is not None and len(dev) > 0
    best, best_uar, best_epoch = copy_params(params), -1.0, 0
    history = []
    for epoch in range(1, hp.epochs + 1):
        loss = train_epoch(train, params, hp, adam, rng)
        entry = {"epoch": epoch, "loss": loss}
        if use_dev:
            dev_uar = uar_present(evaluate(params, hp, dev))
            entry["dev_uar"] = dev_uar
            if dev_uar > best_uar:
                best, best_uar, best_epoch = copy_params(params), dev_uar, epoch
        history.append(entry)
        log.debug("epoch %d loss %.4f dev_uar %s", epoch, loss, entry.get("dev_uar"))
    if not use_dev:
        best, best_epoch = params, hp.epochs
    for entry in history:
        entry["selected"] = entry["epoch"] == best_epoch
    return best, history


def fine_tune(params, target: Dataset, hp: HyperParams, rng=None):
    """Continue training every layer on ``target`` for ``hp.ft_epochs`` epochs."""
    if len(target) == 0:
        raise EmptyDataset("no fine-tuning samples")
    rng = rng if rng is not None else np.random.default_rng(hp.seed)
    params = copy_params(params)
    adam = nn.AdamState(learning_rate=hp.learning_rate)
    for _ in range(hp.ft_epochs):
        train_epoch(target, params, hp, adam, rng)
    return params


# --- persistence ---------------------------------------------------------------


def save_model(path, params, hp: HyperParams, input_T: int, meta: dict | None = None) -> None:
    """Write the binary checkpoint plus a ``<path>.meta`` key=value sidecar."""
    hyper = {"hp": dataclasses.asdict(hp), "input_T": input_T}
    nn.save_checkpoint(path, {k: params[k] for k in PARAM_NAMES}, hyper)
    lines = [f"{k}={v}" for k, v in dataclasses.asdict(hp).items()]
    lines.append(f"input_T={input_T}")
    for k, v in (meta or {}).items():
        lines.append(f"{k}={v}")
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n")


def load_model(path):
    """Returns (params, hp, input_T, meta)."""
    tensors, hyper = nn.load_checkpoint(path)
    hp = HyperParams(**hyper["hp"])
    input_T = int(hyper["input_T"])
    check_params(tensors, hp, input_T)
    meta = {}
    side = Path(str(path) + ".meta")
    if side.exists():
        for line in side.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
    return tensors, hp, input_T, meta
