"""One-layer linear classifier and a from-scratch AdamW optimizer.

The probing protocol: features are standardized on the training split,
the classifier is trained with mini-batch AdamW on softmax cross-entropy,
and everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

__all__ = [
    "AdamWState",
    "ProbeConfig",
    "LinearProbe",
    "adamw_step",
    "probe_loss_grad",
    "train_probe",
    "predict_proba",
    "predict_class",
    "save_probe",
    "load_probe",
]

PROBE_MAGIC = b"IPPRB1\n"


@dataclass
class AdamWState:
    """Moment buffers and hyperparameters for decoupled weight-decay Adam."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, shape, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        return cls(
            m=np.zeros(shape),
            v=np.zeros(shape),
            t=0,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            weight_decay=weight_decay,
        )


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamWState):
    """One AdamW update; returns (new_params, new_state) without mutating inputs.

    m' = b1*m + (1-b1)*g;  v' = b2*v + (1-b2)*g^2;  bias-corrected by step t+1;
    p' = p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise ValueError(f"non-finite gradient at flat index {bad}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * params
    new_params = params - state.lr * update
    new_state = AdamWState(
        m=m, v=v, t=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2,
        eps=state.eps, weight_decay=state.weight_decay,
    )
    return new_params, new_state


@dataclass
class ProbeConfig:
    iterations: int = 10000
    lr: float = 1e-3
    batch_size: int = 128
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0  # 0 disables parameter snapshots

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("lr", "batch_size", "weight_decay", "seed", "log_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("lr and batch_size must be positive")


class LinearProbe:
    """Linear classifier: scores = W x + b on standardized inputs.

    ``mean`` and ``std`` are the training-split standardization applied
    before the affine map (std entries are clamped to 1 where degenerate).
    """

    def __init__(self, weights, bias, mean=None, std=None):
        w = np.asarray(weights, dtype=np.float64)
        b = np.asarray(bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValueError(f"inconsistent probe shapes {w.shape}, {b.shape}")
        if w.shape[0] < 2:
            raise ValueError("need >= 2 classes")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("probe parameters must be finite")
        self.weights = w
        self.bias = b
        self.mean = np.zeros(w.shape[1]) if mean is None else np.asarray(mean, float)
        self.std = np.ones(w.shape[1]) if std is None else np.asarray(std, float)
        if self.mean.shape != (w.shape[1],) or self.std.shape != (w.shape[1],):
            raise ValueError("standardization vectors must match input dim")

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, float) - self.mean) / self.std

    def scores(self, x: np.ndarray) -> np.ndarray:
        z = self.standardize(np.atleast_2d(x))
        return z @ self.weights.T + self.bias


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def probe_loss_grad(probe: LinearProbe, batch):
    """Mean softmax cross-entropy and analytic gradients for (weights, bias).

    ``batch`` is (vectors (N, dim), labels (N,) int).  Vectors are taken as
    already standardized; train_probe handles standardization.
    """
    x, y = batch
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).ravel()
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[1] != probe.input_dim:
        raise ValueError(f"dim mismatch: batch {x.shape[1]}, probe {probe.input_dim}")
    if y.shape[0] != x.shape[0]:
        raise ValueError("labels and vectors disagree in length")
    if y.min() < 0 or y.max() >= probe.class_count:
        raise ValueError(f"label out of range [0, {probe.class_count})")
    scores = x @ probe.weights.T + probe.bias
    # log-sum-exp stabilized cross entropy
    shifted = scores - scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(len(y)), y]))
    p = _softmax(scores)
    p[np.arange(len(y)), y] -= 1.0
    p /= len(y)
    grad_w = p.T @ x
    grad_b = p.sum(axis=0)
    return loss, (grad_w, grad_b)


@dataclass
class ProbeTrainLog:
    iterations: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # (iteration, LinearProbe)
    config: ProbeConfig | None = None


def train_probe(vectors, labels, cfg: ProbeConfig | None = None):
    """Train a linear probe with mini-batch AdamW; returns (LinearProbe, ProbeTrainLog).

    Inputs are standardized by the mean/std of the supplied (training)
    examples; zero-variance features get std clamped to 1.  The loss curve
    is sampled every cfg.log_every iterations.  Deterministic per seed.
    """
    cfg = cfg or ProbeConfig()
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).ravel()
    if x.shape[0] == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature values")
    if x.shape[0] != y.shape[0]:
        raise ValueError("vectors and labels disagree in length")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("need >= 2 classes")
    if classes.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    n_classes = int(classes.max()) + 1
    n, dim = x.shape

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    z = (x - mean) / std

    rng = np.random.default_rng(cfg.seed)
    w = np.zeros((n_classes, dim))
    b = np.zeros(n_classes)
    flat = np.concatenate([w.ravel(), b])
    state = AdamWState.init(flat.shape, lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = ProbeTrainLog(config=cfg)

    probe = LinearProbe(w, b)  # operates on pre-standardized z
    order = rng.permutation(n)
    cursor = 0
    bs = min(cfg.batch_size, n)
    for it in range(cfg.iterations):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        sel = order[cursor : cursor + bs]
        cursor += bs
        probe.weights = flat[: n_classes * dim].reshape(n_classes, dim)
        probe.bias = flat[n_classes * dim :]
        loss, (gw, gb) = probe_loss_grad(probe, (z[sel], y[sel]))
        grad = np.concatenate([gw.ravel(), gb])
        # bias stays decay-free: decoupled decay applies to weights only
        decay_mask = np.concatenate([np.ones(n_classes * dim), np.zeros(n_classes)])
        grad_step, state = _masked_adamw(flat, grad, state, decay_mask)
        flat = grad_step
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            log.iterations.append(it)
            log.losses.append(loss)
        if cfg.checkpoint_every and ((it + 1) % cfg.checkpoint_every == 0 or it == cfg.iterations - 1):
            cw = flat[: n_classes * dim].reshape(n_classes, dim).copy()
            cb = flat[n_classes * dim :].copy()
            log.checkpoints.append((it + 1, LinearProbe(cw, cb, mean=mean, std=std)))

    w = flat[: n_classes * dim].reshape(n_classes, dim)
    b = flat[n_classes * dim :]
    return LinearProbe(w, b, mean=mean, std=std), log


def _masked_adamw(params, grads, state, decay_mask):
    """AdamW step where weight decay applies only where decay_mask == 1."""
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * decay_mask * params
    new_params = params - state.lr * update
    new_state = AdamWState(
        m=m, v=v, t=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2,
        eps=state.eps, weight_decay=state.weight_decay,
    )
    return new_params, new_state


def predict_proba(probe: LinearProbe, vector) -> np.ndarray:
    """Softmax class distribution for one feature vector (or a batch)."""
    x = np.atleast_2d(np.asarray(vector, dtype=np.float64))
    if x.shape[1] != probe.input_dim:
        raise ValueError(f"dim mismatch: vector {x.shape[1]}, probe {probe.input_dim}")
    p = _softmax(probe.scores(x))
    return p[0] if np.asarray(vector).ndim == 1 else p


def predict_class(probe: LinearProbe, vector) -> int:
    """Argmax class with lowest-index tie breaking."""
    p = predict_proba(probe, vector)
    p = np.atleast_2d(p)
    return int(np.argmax(p[0]))


def save_probe(probe: LinearProbe, path, cfg: ProbeConfig | None = None) -> None:
    """Checkpoint format: magic, u32 JSON header length, JSON header, f64 weights then bias."""
    header = {
        "class_count": probe.class_count,
        "dim": probe.input_dim,
        "mean": probe.mean.tolist(),
        "std": probe.std.tolist(),
        "cfg": asdict(cfg) if cfg is not None else None,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = probe.weights.astype("<f8").tobytes() + probe.bias.astype("<f8").tobytes()
    Path(path).write_bytes(PROBE_MAGIC + struct.pack("<I", len(blob)) + blob + body)


def load_probe(path):
    """Read a probe checkpoint; returns (LinearProbe, header_dict)."""
    raw = Path(path).read_bytes()
    if raw[: len(PROBE_MAGIC)] != PROBE_MAGIC:
        raise ValueError(f"bad probe checkpoint magic: {raw[:8]!r}")
    off = len(PROBE_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off : off + hlen].decode())
    off += hlen
    c, d = header["class_count"], header["dim"]
    need = (c * d + c) * 8
    if len(raw) - off < need:
        raise ValueError("probe checkpoint payload truncated")
    w = np.frombuffer(raw[off : off + c * d * 8], dtype="<f8").reshape(c, d)
    b = np.frombuffer(raw[off + c * d * 8 : off + need], dtype="<f8")
    return LinearProbe(w, b, mean=np.asarray(header["mean"]), std=np.asarray(header["std"])), header
