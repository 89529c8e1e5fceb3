"""
Numkernel - dense numerical core for rsd-kit: linear layers, an LSTM cell with
exact backpropagation through time, smooth-L1 and cross-entropy losses,
inverted dropout, SGD with momentum and step decay, global-norm clipping and a
central-difference gradient checker.

All routines are dtype-preserving: models built with float32 train in
float32, the same code built with float64 is what the gradient checks run on.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from rsdcommon import ConfigError, DimensionError, NumericError

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision: str) -> type:
    """Map a precision name from config ('f32' or 'f64') to a numpy dtype."""
    if precision not in DTYPES:
        raise ConfigError(f"Unknown precision '{precision}'. Available: {list(DTYPES)}")
    return DTYPES[precision]


@dataclass
class Tensor:
    """Named parameter: row-major values plus an optional same-shape gradient."""

    name: str
    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise DimensionError(
                f"{self.name}: grad shape {self.grad.shape} != data shape {self.data.shape}"
            )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def init_uniform(
    rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype=np.float32
) -> np.ndarray:
    """uniform(-k, k) with k = 1/sqrt(fan_in)."""
    k = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-k, k, size=shape).astype(dtype)


# --- activations -----------------------------------------------------------


def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |z| and keeps the input dtype
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0)


def relu_backward(dy: np.ndarray, z: np.ndarray) -> np.ndarray:
    return dy * (z > 0)


# --- linear ----------------------------------------------------------------


def linear_forward(
    x: np.ndarray, W: np.ndarray, b: np.ndarray
) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """y = xW + b for x of shape N x D, W of shape D x M, b of shape M."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: x {x.shape} incompatible with W {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"linear: b {b.shape} incompatible with W {W.shape}")
    return x @ W + b, (x, W)


def linear_backward(
    dy: np.ndarray, cache: Tuple[np.ndarray, np.ndarray]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (dx, dW, db) for upstream gradient dy of shape N x M."""
    x, W = cache
    if dy.shape != (x.shape[0], W.shape[1]):
        raise DimensionError(
            f"linear backward: dy {dy.shape} incompatible with x {x.shape} and W {W.shape}"
        )
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


# --- LSTM ------------------------------------------------------------------


@dataclass
class LstmCellParams:
    """LSTM weights; gate rows are stacked in the order input, forget, cell, output.

    W is 4H x D, U is 4H x H and b has 4H entries.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        four_h = self.U.shape[0]
        if four_h % 4 or self.U.shape != (four_h, four_h // 4):
            raise DimensionError(f"LSTM: U must be 4H x H, got {self.U.shape}")
        if self.W.ndim != 2 or self.W.shape[0] != four_h:
            raise DimensionError(f"LSTM: W {self.W.shape} incompatible with U {self.U.shape}")
        if self.b.shape != (four_h,):
            raise DimensionError(f"LSTM: b {self.b.shape} incompatible with U {self.U.shape}")

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        input_size: int,
        hidden_size: int,
        dtype=np.float32,
        forget_bias: float = 1.0,
    ) -> "LstmCellParams":
        H = hidden_size
        b = np.zeros(4 * H, dtype=dtype)
        b[H : 2 * H] = forget_bias
        return cls(
            W=init_uniform(rng, (4 * H, input_size), input_size, dtype),
            U=init_uniform(rng, (4 * H, H), H, dtype),
            b=b,
        )


@dataclass
class LstmStepCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: np.ndarray  # activated i, f, g, o stacked
    tanh_c: np.ndarray


def _cell(z: np.ndarray, c_prev: np.ndarray, H: int):
    i = sigmoid(z[:H])
    f = sigmoid(z[H : 2 * H])
    g = np.tanh(z[2 * H : 3 * H])
    o = sigmoid(z[3 * H :])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    return o * tanh_c, c, np.concatenate([i, f, g, o]), tanh_c


def _cell_backward(
    dh: np.ndarray,
    dc_next: np.ndarray,
    gates: np.ndarray,
    tanh_c: np.ndarray,
    c_prev: np.ndarray,
    H: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. the gate pre-activations and the previous cell state."""
    i, f, g, o = gates[:H], gates[H : 2 * H], gates[2 * H : 3 * H], gates[3 * H :]
    dc = dc_next + dh * o * (1 - tanh_c * tanh_c)
    dz = np.concatenate(
        [
            dc * g * i * (1 - i),
            dc * c_prev * f * (1 - f),
            dc * i * (1 - g * g),
            dh * tanh_c * o * (1 - o),
        ]
    )
    return dz, dc * f


def lstm_cell_step(
    params: LstmCellParams, x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, LstmStepCache]:
    """One LSTM step: returns (h_t, c_t, cache)."""
    H = params.hidden_size
    if x_t.shape != (params.input_size,):
        raise DimensionError(f"LSTM step: x_t {x_t.shape} but W is {params.W.shape}")
    if h_prev.shape != (H,) or c_prev.shape != (H,):
        raise DimensionError(
            f"LSTM step: h_prev {h_prev.shape} / c_prev {c_prev.shape} but hidden size is {H}"
        )
    z = params.W @ x_t + params.U @ h_prev + params.b
    h, c, gates, tanh_c = _cell(z, c_prev, H)
    return h, c, LstmStepCache(x_t, h_prev, c_prev, gates, tanh_c)


def lstm_cell_backward(
    params: LstmCellParams, dh: np.ndarray, dc: np.ndarray, cache: LstmStepCache
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """Return (dx, dh_prev, dc_prev, {"W", "U", "b"}) for one step."""
    dz, dc_prev = _cell_backward(
        dh, dc, cache.gates, cache.tanh_c, cache.c_prev, params.hidden_size
    )
    grads = {
        "W": np.outer(dz, cache.x),
        "U": np.outer(dz, cache.h_prev),
        "b": dz,
    }
    return params.W.T @ dz, params.U.T @ dz, dc_prev, grads


@dataclass
class LstmSequenceCache:
    xs: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    hs: np.ndarray
    cs: np.ndarray
    gates: np.ndarray
    tanh_cs: np.ndarray


def lstm_sequence_forward(
    params: LstmCellParams,
    xs: np.ndarray,
    h0: Optional[np.ndarray] = None,
    c0: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, LstmSequenceCache]:
    """Run the cell left to right over xs (T x D); returns (hs, cs, cache)."""
    H = params.hidden_size
    if xs.ndim != 2 or xs.shape[1] != params.input_size:
        raise DimensionError(f"LSTM: inputs {xs.shape} but W is {params.W.shape}")
    T = xs.shape[0]
    dtype = params.W.dtype
    h = np.zeros(H, dtype=dtype) if h0 is None else h0
    c = np.zeros(H, dtype=dtype) if c0 is None else c0
    h0, c0 = h, c

    zx = xs @ params.W.T + params.b
    UT = params.U.T
    hs = np.empty((T, H), dtype=dtype)
    cs = np.empty((T, H), dtype=dtype)
    gates = np.empty((T, 4 * H), dtype=dtype)
    tanh_cs = np.empty((T, H), dtype=dtype)
    for t in range(T):
        h, c, gates[t], tanh_cs[t] = _cell(zx[t] + h @ UT, c, H)
        hs[t] = h
        cs[t] = c
    return hs, cs, LstmSequenceCache(xs, h0, c0, hs, cs, gates, tanh_cs)


def lstm_sequence_backward(
    params: LstmCellParams, dhs: np.ndarray, cache: LstmSequenceCache
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Backpropagation through time over the whole sequence.

    dhs holds dL/dh_t for every step; returns (dxs, {"W", "U", "b"}).
    """
    H = params.hidden_size
    T = dhs.shape[0]
    if dhs.shape != cache.hs.shape:
        raise DimensionError(f"LSTM backward: dhs {dhs.shape} but hs {cache.hs.shape}")
    dz_all = np.empty((T, 4 * H), dtype=dhs.dtype)
    dh_next = np.zeros(H, dtype=dhs.dtype)
    dc_next = np.zeros(H, dtype=dhs.dtype)
    U = params.U
    for t in range(T - 1, -1, -1):
        c_prev = cache.cs[t - 1] if t > 0 else cache.c0
        dz, dc_next = _cell_backward(
            dhs[t] + dh_next, dc_next, cache.gates[t], cache.tanh_cs[t], c_prev, H
        )
        dz_all[t] = dz
        dh_next = dz @ U
    h_prev = np.vstack([cache.h0[None, :], cache.hs[:-1]])
    grads = {
        "W": dz_all.T @ cache.xs,
        "U": dz_all.T @ h_prev,
        "b": dz_all.sum(axis=0),
    }
    return dz_all @ params.W, grads


# --- losses ----------------------------------------------------------------


def smooth_l1(pred, target) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise smooth-L1 with the transition at |d| = 1; returns (loss, dloss/dpred)."""
    d = np.asarray(pred) - np.asarray(target)
    small = np.abs(d) < 1
    loss = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    grad = np.where(small, d, np.sign(d))
    return loss, grad


def cross_entropy(logits: np.ndarray, classes) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy.

    logits of shape K with an integer class, or N x K with N classes; the loss
    is averaged over the batch and the returned gradient is of that mean.
    """
    batched = logits.ndim == 2
    z = logits if batched else logits[None, :]
    cls = np.atleast_1d(np.asarray(classes))
    K = z.shape[1]
    if cls.shape != (z.shape[0],):
        raise DimensionError(f"cross_entropy: {cls.shape} classes for logits {logits.shape}")
    if np.any(cls < 0) or np.any(cls >= K):
        raise IndexError(f"cross_entropy: class out of range [0, {K}): {cls}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(z.shape[0])
    loss = -log_probs[rows, cls].mean()
    grad = np.exp(log_probs)
    grad[rows, cls] -= 1
    grad /= z.shape[0]
    return float(loss), grad if batched else grad[0]


# --- regularization --------------------------------------------------------


def dropout(
    x: np.ndarray, p: float, train: bool, rng: Optional[np.random.Generator] = None
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Inverted dropout: returns (output, scaled mask) or (x, None) when inactive."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if not train or p == 0:
        return x, None
    if rng is None:
        raise ConfigError("dropout in train mode requires an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return x * mask, mask


# --- optimization ----------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    lr0: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay_factor: float = 10.0
    decay_every: int = 20000

    def __post_init__(self) -> None:
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must satisfy 0 <= momentum < 1, got {self.momentum}")
        if self.decay_factor < 1:
            raise ConfigError(f"decay_factor must be >= 1, got {self.decay_factor}")
        if self.decay_every < 1:
            raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def learning_rate(cfg: SgdConfig, iteration: int) -> float:
    """Piecewise-constant step decay: lr0 / decay_factor ** (iteration // decay_every)."""
    return cfg.lr0 / cfg.decay_factor ** (iteration // cfg.decay_every)


def sgd_step(
    params: Dict[str, Tensor],
    state: Dict[str, np.ndarray],
    cfg: SgdConfig,
    iteration: int,
) -> float:
    """Momentum SGD with L2 weight decay, in place; returns the learning rate used.

    v <- momentum * v - lr * (g + weight_decay * w);  w <- w + v
    """
    for name, param in params.items():
        if param.grad is None:
            raise NumericError(f"iteration {iteration}: parameter {name} has no gradient")
        if not np.all(np.isfinite(param.grad)):
            norm = float(np.linalg.norm(param.grad))
            raise NumericError(
                f"Non-finite gradient at iteration {iteration} in {name} (norm {norm})"
            )
    lr = learning_rate(cfg, iteration)
    for name, param in params.items():
        velocity = state.get(name)
        if velocity is None:
            velocity = np.zeros_like(param.data)
        velocity = cfg.momentum * velocity - lr * (param.grad + cfg.weight_decay * param.data)
        state[name] = velocity.astype(param.data.dtype, copy=False)
        param.data += state[name]
    return lr


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm (<= 0 disables).

    Returns the norm before clipping.
    """
    total = float(
        np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))
    )
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params.values():
            p.grad *= p.grad.dtype.type(scale)
        logging.debug(f"Clipped gradient norm {total:.3f} to {max_norm}")
    return total


# --- verification ----------------------------------------------------------


def grad_check(
    fragment: Callable[[], float],
    params: Dict[str, Tensor],
    eps: float = 1e-6,
    seed: int = 0,
    max_entries: Optional[int] = None,
    floor: float = 1e-8,
) -> float:
    """Compare analytic gradients against central differences.

    `fragment` evaluates the loss at the current parameter values and stores
    the analytic gradient in every Tensor.grad. Up to `max_entries` entries
    per tensor are sampled with `seed` (all entries when None). Returns the
    maximum of |a - n| / max(|a|, |n|, floor).
    """
    fragment()
    analytic = {name: p.grad.copy() for name, p in params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, param in params.items():
        flat = param.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + eps
            plus = fragment()
            flat[idx] = original - eps
            minus = fragment()
            flat[idx] = original
            numeric = (plus - minus) / (2 * eps)
            a = float(analytic[name].reshape(-1)[idx])
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    fragment()
    return worst
