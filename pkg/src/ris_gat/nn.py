"""Minimal dense-tensor math: forward ops, gradients, Adam, and a finite-difference oracle.

Everything operates on plain 2-D float64 numpy arrays ("matrices"). There is no
computation graph; layers that need gradients store their own intermediates and
call the backward helpers explicitly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class DegenerateNeighborhoodError(ValueError):
    """A softmax row has no unmasked entries (isolated graph node)."""


def check_shapes(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


@dataclass
class Param:
    """A trainable matrix together with its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    is_bias: bool = False

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ValueError(f"Param value must be 2-D, got shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.asarray(self.grad, dtype=np.float64)
            check_shapes("Param", self.value, self.grad)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, p: Param, lr: float = 1e-3) -> "AdamState":
        return cls(m=np.zeros_like(p.value), v=np.zeros_like(p.value), lr=lr)


@dataclass
class DropoutMask:
    keep: np.ndarray  # binary, same shape as the input
    rate: float


def dense_forward(x: np.ndarray, w: Param, b: Param) -> np.ndarray:
    """x @ W + b with b broadcast over rows."""
    if x.shape[1] != w.value.shape[0]:
        raise ValueError(
            f"dense_forward: input shape {x.shape} does not chain with "
            f"weight shape {w.value.shape}"
        )
    if b.value.shape[1] != w.value.shape[1]:
        raise ValueError(
            f"dense_forward: bias shape {b.value.shape} does not match "
            f"weight shape {w.value.shape}"
        )
    return x @ w.value + b.value


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    # subgradient at 0 fixed to 0
    return (x > 0).astype(np.float64)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split positive/negative branches so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise masked softmax. Masked entries are exactly zero in the output."""
    check_shapes("softmax_rows", x, mask)
    mask = mask != 0
    if not mask.any(axis=1).all():
        raise DegenerateNeighborhoodError("softmax_rows: row with all-zero mask")
    shifted = np.where(mask, x, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over all entries of (pred-target)^2 and its gradient w.r.t. pred."""
    check_shapes("mse_loss", pred, target)
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


def l2_penalty(params: list[Param], lam: float = 5e-4, accumulate: bool = True) -> float:
    """lam * sum ||W||^2 over non-bias params; optionally adds 2*lam*W to grads."""
    if lam < 0:
        raise ValueError("l2_penalty: lambda must be >= 0")
    total = 0.0
    for p in params:
        if p.is_bias:
            continue
        total += float(np.sum(p.value * p.value))
        if accumulate and lam != 0.0:
            p.grad += 2.0 * lam * p.value
    return lam * total


def adam_step(state: AdamState, param: Param) -> None:
    """Standard Adam update with bias correction; consumes and zeroes param.grad."""
    check_shapes("adam_step", state.m, param.value)
    g = param.grad
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    param.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    param.zero_grad()


def dropout_apply(
    x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, DropoutMask]:
    """Inverted dropout: kept entries scaled by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout_apply: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, DropoutMask(keep=np.ones_like(x), rate=rate)
    if rng is None:
        raise ValueError("dropout_apply: training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(np.float64)
    return x * keep / (1.0 - rate), DropoutMask(keep=keep, rate=rate)


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if eps <= 0:
        raise ValueError("finite_diff_grad: eps must be > 0")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


# --- raw matrix serialization: two u32 dims then row-major little-endian f64 ---

def write_matrix(buf, m: np.ndarray) -> None:
    m = np.ascontiguousarray(m, dtype="<f8")
    buf.write(struct.pack("<II", m.shape[0], m.shape[1]))
    buf.write(m.tobytes())


def read_matrix(buf) -> np.ndarray:
    header = buf.read(8)
    if len(header) != 8:
        raise ValueError("read_matrix: truncated header")
    rows, cols = struct.unpack("<II", header)
    payload = buf.read(rows * cols * 8)
    if len(payload) != rows * cols * 8:
        raise ValueError("read_matrix: truncated payload")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
