"""Dense numeric kernels for the attentive CNN, forward and backward.

All layer functions operate on a leading batch axis; 2-D inputs are treated
as a batch of one.  Arithmetic is float64 throughout.

Shapes used below:
    B  batch, R  feature rows (26), T  frames, K  kernels, w  kernel width,
    L  conv length (T - w + 1), Tp pooled length, D  dense input dim.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySequence, InvalidLabel, NonFiniteError, ShapeMismatch

PROB_FLOOR = 1e-12


def _batched(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeMismatch(f"expected {ndim - 1}-D or {ndim}-D input, got shape {x.shape}")
    return x, False


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")


# --- convolution over time ---------------------------------------------------


def conv1d_forward(x, kernels, biases):
    """ReLU(bias + valid 1-D convolution over time, kernels spanning all rows).

    x: (B, R, T) or (R, T); kernels: (K, R, w); biases: (K,).
    Returns (out, cache) with out of shape (B, K, T - w + 1).
    """
    x, squeeze = _batched(x, 3)
    kernels = np.asarray(kernels, dtype=np.float64)
    biases = np.asarray(biases, dtype=np.float64)
    B, R, T = x.shape
    if kernels.ndim != 3 or kernels.shape[1] != R:
        raise ShapeMismatch(f"kernels {kernels.shape} do not span {R} input rows")
    K, _, w = kernels.shape
    if biases.shape != (K,):
        raise ShapeMismatch(f"biases {biases.shape}, expected ({K},)")
    if T < w:
        raise ShapeMismatch(f"input length {T} shorter than kernel width {w}")
    L = T - w + 1
    # patches[b, t, r, dt] = x[b, r, t + dt]
    patches = np.lib.stride_tricks.sliding_window_view(x, w, axis=2).transpose(0, 2, 1, 3)
    cols = patches.reshape(B * L, R * w)
    pre = (cols @ kernels.reshape(K, R * w).T).reshape(B, L, K).transpose(0, 2, 1) + biases[None, :, None]
    out = np.maximum(pre, 0.0)
    cache = {"x": x, "cols": cols, "active": pre > 0.0, "squeeze": squeeze}
    return (out[0] if squeeze else out), cache


def conv1d_backward(grad_out, cache, kernels, need_input_grad=True):
    """Gradients of conv1d_forward; ReLU subgradient is 0 at 0.

    Returns (grad_kernels, grad_biases, grad_input); grad_input is None when
    ``need_input_grad`` is false.
    """
    grad_out, _ = _batched(grad_out, 3)
    kernels = np.asarray(kernels, dtype=np.float64)
    x, active = cache["x"], cache["active"]
    if grad_out.shape != active.shape:
        raise ShapeMismatch(f"grad_out {grad_out.shape} vs forward output {active.shape}")
    B, R, T = x.shape
    K, _, w = kernels.shape
    L = T - w + 1
    g = grad_out * active  # (B, K, L)
    g_rows = g.transpose(0, 2, 1).reshape(B * L, K)
    grad_kernels = (g_rows.T @ cache["cols"]).reshape(K, R, w)
    grad_biases = g.sum(axis=(0, 2))
    grad_input = None
    if need_input_grad:
        grad_input = np.zeros_like(x)
        for dt in range(w):
            grad_input[:, :, dt : dt + L] += np.einsum("bkl,kr->brl", g, kernels[:, :, dt])
        if cache["squeeze"]:
            grad_input = grad_input[0]
    return grad_kernels, grad_biases, grad_input


# --- max pooling -------------------------------------------------------------


def pooled_length(length: int, pool: int, stride: int) -> int:
    if length < pool:
        raise ShapeMismatch(f"map length {length} shorter than pool size {pool}")
    return (length - pool) // stride + 1


def maxpool_forward(maps, pool: int, stride: int | None = None):
    """Max over windows of ``pool`` steps starting every ``stride`` steps.

    Ties resolve to the lowest index.  maps: (B, K, L) or (K, L).
    """
    stride = pool if stride is None else stride
    if pool < 1 or stride < 1:
        raise ShapeMismatch("pool size and stride must be >= 1")
    maps, squeeze = _batched(maps, 3)
    B, K, L = maps.shape
    n_out = pooled_length(L, pool, stride)
    windows = np.lib.stride_tricks.sliding_window_view(maps, pool, axis=2)[:, :, ::stride][:, :, :n_out]
    local = windows.argmax(axis=3)  # first occurrence == lowest index
    out = np.take_along_axis(windows, local[..., None], axis=3)[..., 0]
    argmax = local + (np.arange(n_out) * stride)[None, None, :]
    cache = {"argmax": argmax, "length": L, "squeeze": squeeze}
    return (out[0] if squeeze else out), cache


def maxpool_backward(grad_out, cache):
    grad_out, _ = _batched(grad_out, 3)
    argmax = cache["argmax"]
    if grad_out.shape != argmax.shape:
        raise ShapeMismatch(f"grad_out {grad_out.shape} vs pooled {argmax.shape}")
    B, K, n_out = argmax.shape
    L = cache["length"]
    flat = (np.arange(B * K)[:, None] * L + argmax.reshape(B * K, n_out)).ravel()
    # bincount accumulates where windows overlap
    grad = np.bincount(flat, weights=grad_out.ravel(), minlength=B * K * L).reshape(B, K, L)
    return grad[0] if cache["squeeze"] else grad


# --- softmax helpers -----------------------------------------------------------


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# --- attention -------------------------------------------------------------------


def attention_forward(x, W):
    """Softmax attention over time steps.

    x: (B, Tp, K) or (Tp, K) sequence of step vectors; W: (K,).
    scores_i = W . x_i, alpha = softmax(scores), attentive = sum_i alpha_i x_i.
    Returns (alpha, attentive, cache).
    """
    x, squeeze = _batched(x, 3)
    W = np.asarray(W, dtype=np.float64)
    if x.shape[1] < 1:
        raise EmptySequence("attention needs at least one time step")
    if W.shape != (x.shape[2],):
        raise ShapeMismatch(f"W {W.shape} vs step dim {x.shape[2]}")
    scores = x @ W
    alpha = softmax(scores, axis=1)
    attentive = np.einsum("bt,btk->bk", alpha, x)
    cache = {"x": x, "W": W, "alpha": alpha, "squeeze": squeeze}
    if squeeze:
        return alpha[0], attentive[0], cache
    return alpha, attentive, cache


def attention_backward(grad_alpha, grad_attentive, cache):
    """Gradients w.r.t. the step vectors and W.

    ``grad_alpha`` is any gradient arriving directly on alpha (None for the
    model, where alpha only feeds the weighted sum).
    """
    x, W, alpha = cache["x"], cache["W"], cache["alpha"]
    grad_attentive, _ = _batched(grad_attentive, 2)
    if grad_attentive.shape != (x.shape[0], x.shape[2]):
        raise ShapeMismatch(f"grad_attentive {grad_attentive.shape} vs {(x.shape[0], x.shape[2])}")
    g_alpha = np.einsum("btk,bk->bt", x, grad_attentive)
    if grad_alpha is not None:
        grad_alpha, _ = _batched(grad_alpha, 2)
        if grad_alpha.shape != alpha.shape:
            raise ShapeMismatch(f"grad_alpha {grad_alpha.shape} vs alpha {alpha.shape}")
        g_alpha = g_alpha + grad_alpha
    g_scores = alpha * (g_alpha - (alpha * g_alpha).sum(axis=1, keepdims=True))
    grad_x = alpha[:, :, None] * grad_attentive[:, None, :] + g_scores[:, :, None] * W[None, None, :]
    grad_W = np.einsum("bt,btk->k", g_scores, x)
    if cache["squeeze"]:
        grad_x = grad_x[0]
    return grad_x, grad_W


# --- dense softmax head + loss ------------------------------------------------------


def dense_softmax_forward(h, Wd, bd):
    """Class probabilities softmax(h Wd^T + bd).  h: (B, D) or (D,)."""
    h, squeeze = _batched(h, 2)
    Wd = np.asarray(Wd, dtype=np.float64)
    bd = np.asarray(bd, dtype=np.float64)
    if Wd.ndim != 2 or Wd.shape[1] != h.shape[1] or bd.shape != (Wd.shape[0],):
        raise ShapeMismatch(f"dense shapes h={h.shape} Wd={Wd.shape} bd={bd.shape}")
    logits = h @ Wd.T + bd
    probs = softmax(logits, axis=1)
    cache = {"h": h, "Wd": Wd, "squeeze": squeeze}
    return (probs[0] if squeeze else probs), cache


def dense_backward(grad_logits, cache):
    """Returns (grad_Wd, grad_bd, grad_h) for the affine part of the head."""
    grad_logits, _ = _batched(grad_logits, 2)
    h, Wd = cache["h"], cache["Wd"]
    if grad_logits.shape != (h.shape[0], Wd.shape[0]):
        raise ShapeMismatch(f"grad_logits {grad_logits.shape}")
    grad_h = grad_logits @ Wd
    return grad_logits.T @ h, grad_logits.sum(axis=0), (grad_h[0] if cache["squeeze"] else grad_h)


def cross_entropy(probs, labels):
    """Per-sample -log p[label] and its gradient w.r.t. the logits.

    probs: (B, C) or (C,); labels: int or (B,) ints.
    """
    probs, squeeze = _batched(probs, 2)
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (probs.shape[0],):
        raise ShapeMismatch(f"labels {labels.shape} vs probs {probs.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise InvalidLabel(f"labels must be integers in [0, {probs.shape[1]})")
    rows = np.arange(probs.shape[0])
    loss = -np.log(np.maximum(probs[rows, labels], PROB_FLOOR))
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    if squeeze:
        return loss[0], grad[0]
    return loss, grad


# --- dropout ---------------------------------------------------------------------


@dataclass
class DropoutMask:
    keep: np.ndarray  # bool
    keep_prob: float

    @classmethod
    def sample(cls, shape, keep_prob, rng):
        return cls(rng.random(shape) < keep_prob, keep_prob)

    def apply(self, h):
        return h * self.keep / self.keep_prob

    def backward(self, grad):
        return grad * self.keep / self.keep_prob


# --- Adam ------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params):
        raise ShapeMismatch(f"gradient keys {sorted(grads)} vs params {sorted(params)}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {grads[name].shape} vs param {p.shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeMismatch(f"{name}: moment {m.shape} vs param {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


# --- checkpoint file ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"ACNP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict, hyper: dict) -> None:
    """Binary checkpoint: magic, version, JSON hyperparameter block, tensors.

    Tensors of any rank are stored as (rows = first axis, cols = rest); the
    reader restores shapes from the ``shapes`` entry of the hyper block.
    """
    hyper = dict(hyper)
    hyper["shapes"] = {k: list(np.shape(v)) for k, v in tensors.items()}
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(bytes([CHECKPOINT_VERSION]))
    block = json.dumps(hyper, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        rows = arr.shape[0] if arr.ndim >= 2 else 1
        cols = arr.size // rows if rows else 0
        enc = name.encode()
        buf.write(struct.pack("<I", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<II", rows, cols))
        buf.write(arr.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns (tensors, hyper)."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if blob[4] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob[4]}")
    pos = 5
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    hyper = json.loads(blob[pos : pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    shapes = hyper.pop("shapes", {})
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + n].decode()
        pos += n
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        arr = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).astype(np.float64)
        pos += 8 * rows * cols
        tensors[name] = arr.reshape(shapes.get(name, (rows, cols)))
    return tensors, hyper
