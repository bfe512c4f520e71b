"""Small differentiable classifiers on flat parameter vectors.

Two architectures: multinomial logistic regression and a one-hidden-layer
MLP. Everything (loss, gradient, Hessian-vector product, diagonal Fisher
information, embeddings) operates on an explicit flat theta so unlearning
updates can treat the model as a vector.

Loss is mean cross-entropy plus an optional ridge term 0.5*ridge*||theta||^2,
so the empirical Hessian of the objective is H_ce + ridge*I.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._util import mix_seed
from .dataset import Dataset, Sample
from .errors import DivergenceError, FormatError

LOGISTIC = "logistic"
MLP = "mlp"

CHECKPOINT_MAGIC = b"ULCK"
CHECKPOINT_VERSION = 1

_KIND_CODE = {LOGISTIC: 0, MLP: 1}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}
_ACT_CODE = {"": 0, "relu": 1, "tanh": 2}
_ACT_NAME = {v: k for k, v in _ACT_CODE.items()}


@dataclass(frozen=True)
class Architecture:
    kind: str
    feature_dim: int
    num_classes: int
    hidden_dim: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in (LOGISTIC, MLP):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.feature_dim < 1 or self.num_classes < 2:
            raise ValueError("need feature_dim >= 1 and num_classes >= 2")
        if self.kind == MLP:
            if self.hidden_dim < 1:
                raise ValueError("mlp needs hidden_dim >= 1")
            if self.activation not in ("relu", "tanh"):
                raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def parameter_count(self) -> int:
        d, c, h = self.feature_dim, self.num_classes, self.hidden_dim
        if self.kind == LOGISTIC:
            return c * d + c
        return h * d + h + c * h + c


@dataclass(frozen=True)
class ModelState:
    arch: Architecture
    theta: np.ndarray
    rng_seed: int = 0

    def __post_init__(self):
        if self.theta.shape != (self.arch.parameter_count,):
            raise ValueError(
                f"theta has shape {self.theta.shape}, expected "
                f"({self.arch.parameter_count},)"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta contains non-finite values")

    def with_theta(self, theta: np.ndarray) -> "ModelState":
        return replace(self, theta=theta)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-3
    batch_size: int = 32
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    ridge: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        b1, b2 = self.adam_betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


# ---------------------------------------------------------------------------
# forward / backward


def _unpack_logistic(arch: Architecture, theta: np.ndarray):
    d, c = arch.feature_dim, arch.num_classes
    W = theta[: c * d].reshape(c, d)
    b = theta[c * d :]
    return W, b


def _unpack_mlp(arch: Architecture, theta: np.ndarray):
    d, c, h = arch.feature_dim, arch.num_classes, arch.hidden_dim
    o = 0
    W1 = theta[o : o + h * d].reshape(h, d)
    o += h * d
    b1 = theta[o : o + h]
    o += h
    W2 = theta[o : o + c * h].reshape(c, h)
    o += c * h
    b2 = theta[o : o + c]
    return W1, b1, W2, b2


def _act(name: str, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if name == "relu" else np.tanh(x)


def _act_deriv(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0).astype(np.float64)
    t = np.tanh(pre)
    return 1.0 - t * t


def _forward(arch: Architecture, theta: np.ndarray, X: np.ndarray):
    """Returns (logits, hidden_pre, hidden); the latter two are None for logistic."""
    if arch.kind == LOGISTIC:
        W, b = _unpack_logistic(arch, theta)
        return X @ W.T + b, None, None
    W1, b1, W2, b2 = _unpack_mlp(arch, theta)
    pre = X @ W1.T + b1
    hid = _act(arch.activation, pre)
    return hid @ W2.T + b2, pre, hid


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    return P


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    Zs = Z - Z.max(axis=1, keepdims=True)
    return Zs - np.log(np.exp(Zs).sum(axis=1, keepdims=True))


def _loss_arrays(arch, theta, X, y, ridge: float) -> float:
    Z, _, _ = _forward(arch, theta, X)
    logp = _log_softmax(Z)
    ce = -float(np.mean(logp[np.arange(len(y)), y]))
    if ridge:
        ce += 0.5 * ridge * float(theta @ theta)
    return ce


def _grad_arrays(arch, theta, X, y, ridge: float) -> np.ndarray:
    n = len(y)
    Z, pre, hid = _forward(arch, theta, X)
    P = _softmax(Z)
    G = P.copy()
    G[np.arange(n), y] -= 1.0
    G /= n
    if arch.kind == LOGISTIC:
        gW = G.T @ X
        gb = G.sum(axis=0)
        g = np.concatenate([gW.ravel(), gb])
    else:
        W1, b1, W2, b2 = _unpack_mlp(arch, theta)
        gW2 = G.T @ hid
        gb2 = G.sum(axis=0)
        dh = G @ W2
        dpre = dh * _act_deriv(arch.activation, pre)
        gW1 = dpre.T @ X
        gb1 = dpre.sum(axis=0)
        g = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
    if ridge:
        g = g + ridge * theta
    return g


def _loss_grad_arrays(arch, theta, X, y, ridge: float):
    loss = _loss_arrays(arch, theta, X, y, ridge)
    grad_vec = _grad_arrays(arch, theta, X, y, ridge)
    return loss, grad_vec


# ---------------------------------------------------------------------------
# public operations


def init(arch: Architecture, seed: int = 0) -> ModelState:
    """Zero init for logistic; Glorot-uniform weights (zero biases) for MLP."""
    if arch.kind == LOGISTIC:
        theta = np.zeros(arch.parameter_count)
    else:
        rng = np.random.default_rng(mix_seed(seed, "init"))
        d, c, h = arch.feature_dim, arch.num_classes, arch.hidden_dim
        a1 = np.sqrt(6.0 / (d + h))
        a2 = np.sqrt(6.0 / (h + c))
        W1 = rng.uniform(-a1, a1, size=(h, d))
        W2 = rng.uniform(-a2, a2, size=(c, h))
        theta = np.concatenate([W1.ravel(), np.zeros(h), W2.ravel(), np.zeros(c)])
    return ModelState(arch=arch, theta=theta, rng_seed=seed)


def train(m: ModelState, d: Dataset, cfg: TrainConfig) -> ModelState:
    """Minibatch training of mean cross-entropy; deterministic for a fixed seed.

    Shuffle order is drawn per epoch from a seed derived from (cfg.seed, epoch),
    so equal configs give bit-identical parameters. The input state is never
    modified.
    """
    if len(d) == 0:
        raise ValueError("cannot train on an empty dataset")
    if d.feature_dim != m.arch.feature_dim or d.num_classes > m.arch.num_classes:
        raise ValueError("dataset dimensions do not match the architecture")
    theta = m.theta.copy()
    X, y = d.features, d.labels
    n = len(d)
    mom = np.zeros_like(theta)
    vel = np.zeros_like(theta)
    b1, b2 = cfg.adam_betas
    t = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(mix_seed(cfg.seed, "shuffle", epoch))
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, g = _loss_grad_arrays(m.arch, theta, X[idx], y[idx], cfg.ridge)
            t += 1
            if not np.isfinite(loss):
                raise DivergenceError(t, f"non-finite loss at step {t}")
            if cfg.optimizer == "adam":
                mom = b1 * mom + (1 - b1) * g
                vel = b2 * vel + (1 - b2) * g * g
                m_hat = mom / (1 - b1**t)
                v_hat = vel / (1 - b2**t)
                theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            else:
                theta = theta - cfg.learning_rate * g
            if not np.all(np.isfinite(theta)):
                raise DivergenceError(t, f"non-finite parameters at step {t}")
    return ModelState(arch=m.arch, theta=theta, rng_seed=m.rng_seed)


def predict(m: ModelState, sample: Sample):
    """Returns (class, logits, probabilities); argmax ties go to the lowest class."""
    if sample.features.shape != (m.arch.feature_dim,):
        raise ValueError("sample dimension does not match the architecture")
    Z, _, _ = _forward(m.arch, m.theta, sample.features[None, :])
    probs = _softmax(Z)[0]
    return int(np.argmax(probs)), Z[0], probs


def accuracy(m: ModelState, d: Dataset) -> float:
    if len(d) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    Z, _, _ = _forward(m.arch, m.theta, d.features)
    return float(np.mean(np.argmax(Z, axis=1) == d.labels))


def loss(m: ModelState, d: Dataset, ridge: float = 0.0) -> float:
    if len(d) == 0:
        raise ValueError("loss of an empty dataset is undefined")
    return _loss_arrays(m.arch, m.theta, d.features, d.labels, ridge)


def grad(m: ModelState, d: Dataset, ridge: float = 0.0) -> np.ndarray:
    """Gradient of the mean cross-entropy (plus ridge) over the subset."""
    if len(d) == 0:
        raise ValueError("gradient of an empty subset is undefined")
    return _grad_arrays(m.arch, m.theta, d.features, d.labels, ridge)


def _hvp_arrays(arch, theta, X, y, v, ridge: float) -> np.ndarray:
    n = len(X)
    if arch.kind == LOGISTIC:
        c, dim = arch.num_classes, arch.feature_dim
        Vw = v[: c * dim].reshape(c, dim)
        vb = v[c * dim :]
        Z, _, _ = _forward(arch, theta, X)
        P = _softmax(Z)
        A = X @ Vw.T + vb
        S = P * A
        B = S - P * S.sum(axis=1, keepdims=True)
        hW = B.T @ X / n
        hb = B.sum(axis=0) / n
        out = np.concatenate([hW.ravel(), hb])
        if ridge:
            out = out + ridge * v
        return out
    eps = 1e-4 * (1.0 + float(np.max(np.abs(theta))))
    g_plus = _grad_arrays(arch, theta + eps * v, X, y, ridge)
    g_minus = _grad_arrays(arch, theta - eps * v, X, y, ridge)
    return (g_plus - g_minus) / (2 * eps)


def hvp(m: ModelState, d: Dataset, v: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Hessian-vector product of the mean loss over the subset.

    Logistic uses the exact softmax second-order form. The MLP path is a
    central finite difference of the gradient with step 1e-4*(1+max|theta|),
    verified against a dense-Hessian oracle at tiny scale.
    """
    if len(d) == 0:
        raise ValueError("hvp over an empty subset is undefined")
    v = np.asarray(v, dtype=np.float64)
    if v.shape != m.theta.shape:
        raise ValueError(f"v has shape {v.shape}, expected {m.theta.shape}")
    return _hvp_arrays(m.arch, m.theta, d.features, d.labels, v, ridge)


def _per_sample_sq_scores(arch, theta, X, G):
    """Mean over rows of the squared per-sample score gradient, G = dlogp/dlogits."""
    n = len(X)
    G2 = G * G
    if arch.kind == LOGISTIC:
        dW = G2.T @ (X * X) / n
        db = G2.mean(axis=0)
        return np.concatenate([dW.ravel(), db])
    W1, b1, W2, b2 = _unpack_mlp(arch, theta)
    pre = X @ W1.T + b1
    hid = _act(arch.activation, pre)
    dW2 = G2.T @ (hid * hid) / n
    db2 = G2.mean(axis=0)
    dh = G @ W2
    dpre = dh * _act_deriv(arch.activation, pre)
    d2 = dpre * dpre
    dW1 = d2.T @ (X * X) / n
    db1 = d2.mean(axis=0)
    return np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])


def fisher_diag(
    m: ModelState, d: Dataset, mode: str = "sampled", seed: int = 0
) -> np.ndarray:
    """Diagonal of the empirical Fisher information at the current parameters.

    "sampled" draws one label per datum from the model's own distribution
    (seeded); "exact" enumerates all classes weighted by their probability
    and exists as the oracle for the sampled estimator (num_classes <= 16).
    """
    if len(d) == 0:
        raise ValueError("fisher_diag over an empty subset is undefined")
    X = d.features
    n = len(d)
    Z, _, _ = _forward(m.arch, m.theta, X)
    P = _softmax(Z)
    c = m.arch.num_classes
    if mode == "sampled":
        rng = np.random.default_rng(mix_seed(seed, "fisher"))
        u = rng.random(n)
        cum = np.cumsum(P, axis=1)
        labels = (u[:, None] > cum).sum(axis=1).clip(0, c - 1)
        G = -P.copy()
        G[np.arange(n), labels] += 1.0
        return _per_sample_sq_scores(m.arch, m.theta, X, G)
    if mode == "exact":
        if c > 16:
            raise ValueError("exact fisher mode is limited to 16 classes")
        out = np.zeros(m.arch.parameter_count)
        for label in range(c):
            G = -P.copy()
            G[:, label] += 1.0
            w = np.sqrt(P[:, label])
            out += _per_sample_sq_scores(m.arch, m.theta, X, G * w[:, None])
        return out
    raise ValueError(f"unknown fisher mode {mode!r}")


def embed(m: ModelState, sample: Sample) -> np.ndarray:
    """Feature embedding: logits for logistic, hidden activations for MLP."""
    if sample.features.shape != (m.arch.feature_dim,):
        raise ValueError("sample dimension does not match the architecture")
    Z, _, hid = _forward(m.arch, m.theta, sample.features[None, :])
    return Z[0] if m.arch.kind == LOGISTIC else hid[0]


def embed_batch(m: ModelState, d: Dataset) -> np.ndarray:
    Z, _, hid = _forward(m.arch, m.theta, d.features)
    return Z if m.arch.kind == LOGISTIC else hid


# ---------------------------------------------------------------------------
# checkpoints


def save_model(m: ModelState, path) -> None:
    """Write a ULCK checkpoint (magic, version, arch, theta, trailing CRC32)."""
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<H", CHECKPOINT_VERSION)
    body += struct.pack(
        "<BBIII",
        _KIND_CODE[m.arch.kind],
        _ACT_CODE[m.arch.activation if m.arch.kind == MLP else ""],
        m.arch.feature_dim,
        m.arch.num_classes,
        m.arch.hidden_dim if m.arch.kind == MLP else 0,
    )
    body += struct.pack("<QQ", m.rng_seed & (2**64 - 1), len(m.theta))
    body += m.theta.astype("<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_model(path) -> ModelState:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a ULCK checkpoint")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise FormatError(f"{path}: CRC mismatch, checkpoint is corrupt")
    off = 4
    (version,) = struct.unpack_from("<H", raw, off)
    off += 2
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    kind_code, act_code, dim, classes, hidden = struct.unpack_from("<BBIII", raw, off)
    off += 14
    seed, length = struct.unpack_from("<QQ", raw, off)
    off += 16
    theta = np.frombuffer(raw, dtype="<f8", count=length, offset=off).copy()
    kind = _KIND_NAME[kind_code]
    arch = Architecture(
        kind=kind,
        feature_dim=dim,
        num_classes=classes,
        hidden_dim=hidden,
        activation=_ACT_NAME[act_code] if kind == MLP else "relu",
    )
    return ModelState(arch=arch, theta=theta, rng_seed=seed)
