"""Graph-attention channel estimator: two attention layers, gated global pooling,
a linear head, manual backpropagation, the training loop, and weight persistence.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    AdamState,
    DegenerateNeighborhoodError,
    Param,
    adam_step,
    dense_forward,
    dropout_apply,
    l2_penalty,
    mse_loss,
    relu,
    sigmoid,
    softmax_rows,
)

WEIGHT_MAGIC = b"GATW"
WEIGHT_VERSION = 1
EDGE_MODES = ("ignored", "concat")


@dataclass
class GalParams:
    """One graph attention layer: linear transform W, attention kernel a, bias b."""

    w: Param          # (F_in, F_out)
    a: Param          # (2*F_out, 1)
    b: Param          # (1, F_out)

    def params(self) -> list[Param]:
        return [self.w, self.a, self.b]


@dataclass
class PoolParams:
    """Global attention pooling: gate branch (w1, b1) and value branch (w2, b2)."""

    w1: Param
    b1: Param
    w2: Param
    b2: Param

    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class DenseParams:
    w: Param
    b: Param

    def params(self) -> list[Param]:
        return [self.w, self.b]


@dataclass
class TrainConfig:
    epochs: int = 20
    patience: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    l2: float = 5e-4
    dropout_rate: float = 0.5
    val_ratio: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.patience <= self.epochs:
            raise ValueError("TrainConfig: need 1 <= patience <= epochs")
        if not 0.0 < self.val_ratio < 1.0:
            raise ValueError("TrainConfig: val_ratio must be in (0, 1)")


@dataclass
class GatModel:
    """All trainable parameters of the estimator network.

    Layer widths default to the production layout (128 / 32 channels, 128-wide
    pooling) but stay configurable so gradient checks can run on toy shapes.
    """

    n_ris: int
    m_p: int
    edge_mode: str
    gal1: GalParams
    gal2: GalParams
    pool: PoolParams
    head: DenseParams
    cache: dict | None = field(default=None, repr=False)

    def params(self) -> list[Param]:
        # fixed registration order; also the serialization order
        return self.gal1.params() + self.gal2.params() + self.pool.params() + self.head.params()

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _make_gal(rng: np.random.Generator, f_in: int, f_out: int) -> GalParams:
    return GalParams(
        w=Param(_glorot(rng, f_in, f_out, (f_in, f_out))),
        a=Param(_glorot(rng, 2 * f_out, 1, (2 * f_out, 1))),
        b=Param(np.zeros((1, f_out)), is_bias=True),
    )


def build_model(
    n_ris: int,
    m_p: int,
    rng: np.random.Generator,
    edge_mode: str = "concat",
    hidden1: int = 128,
    hidden2: int = 32,
    pool_out: int = 128,
) -> GatModel:
    """Glorot-initialized model; edge_mode selects whether pilot edge attributes
    are concatenated to the node features at each attention layer."""
    if edge_mode not in EDGE_MODES:
        raise ValueError(f"build_model: unknown edge_mode {edge_mode!r}")
    extra = m_p if edge_mode == "concat" else 0
    gal1 = _make_gal(rng, m_p + extra, hidden1)
    gal2 = _make_gal(rng, hidden1 + extra, hidden2)
    pool = PoolParams(
        w1=Param(_glorot(rng, hidden2, pool_out, (hidden2, pool_out))),
        b1=Param(np.zeros((1, pool_out)), is_bias=True),
        w2=Param(_glorot(rng, hidden2, pool_out, (hidden2, pool_out))),
        b2=Param(np.zeros((1, pool_out)), is_bias=True),
    )
    head = DenseParams(
        w=Param(_glorot(rng, pool_out, 4 * n_ris, (pool_out, 4 * n_ris))),
        b=Param(np.zeros((1, 4 * n_ris)), is_bias=True),
    )
    return GatModel(n_ris=n_ris, m_p=m_p, edge_mode=edge_mode,
                    gal1=gal1, gal2=gal2, pool=pool, head=head)


def _neighborhood_mask(adj: np.ndarray) -> np.ndarray:
    adj = np.asarray(adj)
    if (adj.sum(axis=1) == 0).any():
        raise DegenerateNeighborhoodError("attention: isolated node (all-zero adjacency row)")
    mask = (adj != 0).astype(np.float64)
    np.fill_diagonal(mask, 1.0)  # self-attention is implicit
    return mask


def attention_coefficients(xw: np.ndarray, a: Param, adj: np.ndarray) -> np.ndarray:
    """Softmax-normalized attention over each node's neighborhood (self included)."""
    mask = _neighborhood_mask(adj)
    f_out = xw.shape[1]
    a1 = a.value[:f_out, 0]
    a2 = a.value[f_out:, 0]
    u = (xw @ a1)[:, None] + (xw @ a2)[None, :]
    return softmax_rows(relu(u), mask)


def _gal_forward_cached(x: np.ndarray, adj: np.ndarray, params: GalParams) -> tuple[np.ndarray, dict]:
    if x.shape[1] != params.w.value.shape[0]:
        raise ValueError(
            f"gal_forward: input shape {x.shape} does not chain with "
            f"weight shape {params.w.value.shape}"
        )
    mask = _neighborhood_mask(adj)
    h = x @ params.w.value
    f_out = h.shape[1]
    a1 = params.a.value[:f_out, 0]
    a2 = params.a.value[f_out:, 0]
    u = (h @ a1)[:, None] + (h @ a2)[None, :]
    alpha = softmax_rows(relu(u), mask)
    zpre = alpha @ h + params.b.value
    z = relu(zpre)
    cache = {"x": x, "h": h, "u": u, "alpha": alpha, "zpre": zpre}
    return z, cache


def gal_forward(x: np.ndarray, adj: np.ndarray, params: GalParams) -> np.ndarray:
    return _gal_forward_cached(x, adj, params)[0]


def _gal_backward(dz: np.ndarray, cache: dict, params: GalParams) -> np.ndarray:
    """Accumulates gradients into params and returns the gradient w.r.t. x."""
    x, h, u, alpha, zpre = cache["x"], cache["h"], cache["u"], cache["alpha"], cache["zpre"]
    f_out = h.shape[1]
    a1 = params.a.value[:f_out, 0]
    a2 = params.a.value[f_out:, 0]

    dzpre = dz * (zpre > 0)
    params.b.grad += dzpre.sum(axis=0, keepdims=True)
    dalpha = dzpre @ h.T
    dh = alpha.T @ dzpre

    # masked softmax backward: alpha is zero on masked entries, so dlogits is too
    dot = (alpha * dalpha).sum(axis=1, keepdims=True)
    dlogits = alpha * (dalpha - dot)
    du = dlogits * (u > 0)

    row_s = du.sum(axis=1)
    col_s = du.sum(axis=0)
    params.a.grad[:f_out, 0] += h.T @ row_s
    params.a.grad[f_out:, 0] += h.T @ col_s
    dh += row_s[:, None] * a1[None, :] + col_s[:, None] * a2[None, :]

    params.w.grad += x.T @ dh
    return dh @ params.w.value.T


def global_attention_pool(x: np.ndarray, params: PoolParams) -> np.ndarray:
    """Gated sum over nodes: sum_i [ sigmoid(XW1+b1) * (XW2+b2) ]_i."""
    out, _ = _pool_forward_cached(x, params)
    return out


def _pool_forward_cached(x: np.ndarray, params: PoolParams) -> tuple[np.ndarray, dict]:
    gate_pre = dense_forward(x, params.w1, params.b1)
    gate = sigmoid(gate_pre)
    value = dense_forward(x, params.w2, params.b2)
    out = (gate * value).sum(axis=0)
    return out, {"x": x, "gate": gate, "value": value}


def _pool_backward(dout: np.ndarray, cache: dict, params: PoolParams) -> np.ndarray:
    x, gate, value = cache["x"], cache["gate"], cache["value"]
    dgate = dout[None, :] * value
    dvalue = dout[None, :] * gate
    dgate_pre = dgate * gate * (1.0 - gate)
    params.w1.grad += x.T @ dgate_pre
    params.b1.grad += dgate_pre.sum(axis=0, keepdims=True)
    params.w2.grad += x.T @ dvalue
    params.b2.grad += dvalue.sum(axis=0, keepdims=True)
    return dgate_pre @ params.w1.value.T + dvalue @ params.w2.value.T


def _edge_features(sample) -> np.ndarray:
    # P=2 single-edge graphs: both incident edges carry the same pilot vector,
    # so the concat reduces to appending it to every node's features
    return np.vstack([sample.e[0, 1], sample.e[1, 0]])


def model_forward(
    model: GatModel,
    sample,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.5,
) -> np.ndarray:
    """Full forward pass; returns the 4N head output and stores intermediates
    on the model for a subsequent backward pass."""
    x = np.asarray(sample.x, dtype=np.float64)
    adj = np.asarray(sample.a)
    if x.shape != (2, model.m_p):
        raise ValueError(f"model_forward: sample X shape {x.shape}, expected (2, {model.m_p})")
    edges = _edge_features(sample) if model.edge_mode == "concat" else None

    d1_in, mask1 = dropout_apply(x, dropout_rate, training, rng)
    l1_in = np.hstack([d1_in, edges]) if edges is not None else d1_in
    z1, c1 = _gal_forward_cached(l1_in, adj, model.gal1)

    d2_in, mask2 = dropout_apply(z1, dropout_rate, training, rng)
    l2_in = np.hstack([d2_in, edges]) if edges is not None else d2_in
    z2, c2 = _gal_forward_cached(l2_in, adj, model.gal2)

    pooled, cp = _pool_forward_cached(z2, model.pool)
    out = dense_forward(pooled[None, :], model.head.w, model.head.b)[0]

    model.cache = {
        "gal1": c1, "gal2": c2, "pool": cp,
        "mask1": mask1, "mask2": mask2,
        "pooled": pooled, "out": out,
    }
    return out


def model_backward(model: GatModel, sample, target: np.ndarray, l2: float = 0.0, scale: float = 1.0) -> float:
    """Backprop MSE (+ optional L2) through the stored forward pass.

    Gradients accumulate into the model's Params; the data-term gradient is
    multiplied by `scale` (used for batch averaging). Returns the loss.
    """
    if model.cache is None:
        raise RuntimeError("model_backward: no stored forward pass")
    cache = model.cache
    target = np.asarray(target, dtype=np.float64)
    loss, dout = mse_loss(cache["out"][None, :], target[None, :])
    dout = dout * scale

    pooled = cache["pooled"]
    model.head.w.grad += pooled[:, None] @ dout
    model.head.b.grad += dout
    dpooled = (dout @ model.head.w.value.T)[0]

    dz2 = _pool_backward(dpooled, cache["pool"], model.pool)
    dl2_in = _gal_backward(dz2, cache["gal2"], model.gal2)
    hidden1 = cache["gal1"]["zpre"].shape[1]
    dz1 = dl2_in[:, :hidden1]  # edge-concat columns are not trainable inputs
    mask2 = cache["mask2"]
    if mask2.rate > 0:
        dz1 = dz1 * mask2.keep / (1.0 - mask2.rate)
    _gal_backward(dz1, cache["gal1"], model.gal1)

    if l2 > 0:
        loss += l2_penalty(model.params(), l2)
    return loss


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


def _mean_val_loss(model: GatModel, samples) -> float:
    total = 0.0
    for s in samples:
        out = model_forward(model, s, training=False)
        loss, _ = mse_loss(out[None, :], np.asarray(s.y)[None, :])
        total += loss
    return total / len(samples)


def fit(model: GatModel, train_set, val_set, cfg: TrainConfig) -> list[EpochRecord]:
    """Mini-batch Adam with early stopping on validation loss.

    Stops once the validation loss has not improved for `cfg.patience` epochs
    and restores the best-validation weights.
    """
    if not train_set or not val_set:
        raise ValueError("fit: train and validation sets must be non-empty")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7261]))
    params = model.params()
    states = [AdamState.for_param(p, lr=cfg.lr) for p in params]
    model.zero_grads()

    history: list[EpochRecord] = []
    best_val = np.inf
    best_values = None
    stall = 0
    n = len(train_set)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_mse = 0.0
        for b_start in range(0, n, cfg.batch_size):
            batch = [train_set[i] for i in order[b_start:b_start + cfg.batch_size]]
            batch_loss = 0.0
            for s in batch:
                model_forward(model, s, training=True, rng=rng, dropout_rate=cfg.dropout_rate)
                batch_loss += model_backward(model, s, s.y, l2=0.0, scale=1.0 / len(batch))
            l2_penalty(params, cfg.l2)
            if not np.isfinite(batch_loss):
                raise RuntimeError(
                    f"fit: non-finite loss at epoch {epoch}, batch {b_start // cfg.batch_size}"
                )
            for st, p in zip(states, params):
                adam_step(st, p)
            epoch_mse += batch_loss
        train_loss = epoch_mse / n + l2_penalty(params, cfg.l2, accumulate=False)
        val_loss = _mean_val_loss(model, val_set)
        history.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss))

        if val_loss < best_val:
            best_val = val_loss
            best_values = [p.value.copy() for p in params]
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break

    if best_values is not None:
        for p, v in zip(params, best_values):
            p.value[...] = v
    model.cache = None
    return history


def save_weights(model: GatModel, path) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<IIII", WEIGHT_VERSION, model.n_ris, model.m_p,
                            EDGE_MODES.index(model.edge_mode)))
        from .nn import write_matrix
        for p in model.params():
            write_matrix(f, p.value)


def load_weights(path, expected_n: int | None = None) -> GatModel:
    from .nn import read_matrix
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHT_MAGIC:
            raise ValueError(f"load_weights: bad magic {magic!r}")
        version, n_ris, m_p, mode_flag = struct.unpack("<IIII", f.read(16))
        if version != WEIGHT_VERSION:
            raise ValueError(f"load_weights: unsupported version {version}")
        if mode_flag >= len(EDGE_MODES):
            raise ValueError(f"load_weights: unknown edge_mode flag {mode_flag}")
        if expected_n is not None and n_ris != expected_n:
            raise ValueError(f"load_weights: file has N={n_ris}, expected N={expected_n}")
        mats = [read_matrix(f) for _ in range(12)]
        if f.read(1):
            raise ValueError("load_weights: trailing bytes")

    w1, a1, b1, w2, a2, b2, pw1, pb1, pw2, pb2, hw, hb = mats
    model = GatModel(
        n_ris=n_ris, m_p=m_p, edge_mode=EDGE_MODES[mode_flag],
        gal1=GalParams(Param(w1), Param(a1), Param(b1, is_bias=True)),
        gal2=GalParams(Param(w2), Param(a2), Param(b2, is_bias=True)),
        pool=PoolParams(Param(pw1), Param(pb1, is_bias=True), Param(pw2), Param(pb2, is_bias=True)),
        head=DenseParams(Param(hw), Param(hb, is_bias=True)),
    )
    if hw.shape[1] != 4 * n_ris:
        raise ValueError(f"load_weights: head width {hw.shape[1]} does not match N={n_ris}")
    return model


def clone_model(model: GatModel) -> GatModel:
    m = copy.deepcopy(model)
    m.cache = None
    return m
