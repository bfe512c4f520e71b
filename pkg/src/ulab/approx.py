"""Approximate unlearning: Fisher step-plus-noise and influence updates.

Fisher unlearning takes a Newton-style step preconditioned by the diagonal
Fisher information over the remaining data, then injects calibrated noise:

    theta' = theta - (F + eps)^-1 * grad(theta; d_r) + sigma * (F + eps)^-1/4 * b

with b ~ N(0, I). The noise-only variant keeps just the second term.

Influence unlearning applies the printed one-shot update

    theta' = theta - H^-1 sum_{z in d_u} grad L(theta; z)

where the inverse-Hessian-vector product comes from LiSSA or conjugate
gradient on the damped operator (H + eps I). The printed sign differs from
the classical leave-one-out formula theta' = theta + (1/n) H^-1 sum grad;
both are available through the sign switch, default follows the printed
form ("as_paper").
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._util import mix_seed
from .dataset import Dataset, remove_by_ids, samples_by_ids
from .errors import DivergenceError, NumericalError
from .model import ModelState, accuracy, fisher_diag, grad
from .model import _hvp_arrays

NEWTON_PLUS_NOISE = "newton_plus_noise"
NOISE_ONLY = "noise_only"

SIGN_AS_PAPER = "as_paper"
SIGN_CLASSICAL = "classical"


@dataclass(frozen=True)
class FisherConfig:
    sigma: float = 0.0
    damping: float = 1e-4
    mode: str = NEWTON_PLUS_NOISE
    clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.damping <= 0:
            raise ValueError("damping must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.mode not in (NEWTON_PLUS_NOISE, NOISE_ONLY):
            raise ValueError(f"unknown fisher mode {self.mode!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")


@dataclass(frozen=True)
class InfluenceConfig:
    solver: str = "lissa"
    lissa_depth: int = 10
    lissa_scale: float = 10.0
    damping: float = 1e-4
    batch_r: int = 2048
    batch_f: int = 1024
    clip_norm: float | None = 1.0
    cg_tol: float = 1e-6
    cg_max_iter: int = 200
    sign: str = SIGN_AS_PAPER
    ridge: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.solver not in ("lissa", "cg"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.lissa_depth < 1 or self.lissa_scale <= 0:
            raise ValueError("lissa_depth must be >= 1 and lissa_scale > 0")
        if self.damping <= 0:
            raise ValueError("damping must be > 0")
        if self.batch_r < 1 or self.batch_f < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")
        if self.cg_tol <= 0 or self.cg_max_iter < 1:
            raise ValueError("cg_tol must be > 0 and cg_max_iter >= 1")
        if self.sign not in (SIGN_AS_PAPER, SIGN_CLASSICAL):
            raise ValueError(f"unknown sign convention {self.sign!r}")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


def _clip_step(step: np.ndarray, clip_norm: float | None):
    norm = float(np.linalg.norm(step))
    if clip_norm is not None and norm > clip_norm:
        return step * (clip_norm / norm), True
    return step, False


def _check_finite(theta: np.ndarray, context: str) -> None:
    bad = np.flatnonzero(~np.isfinite(theta))
    if bad.size:
        raise NumericalError(f"{context}: non-finite parameter at index {int(bad[0])}")


def newton_step(
    theta: np.ndarray,
    grad_vec: np.ndarray,
    fisher_diagonal: np.ndarray,
    damping: float,
    clip_norm: float | None = None,
):
    """theta - (F + damping)^-1 * grad, elementwise, with optional clipping.

    On a diagonal quadratic whose curvature equals fisher_diagonal this is an
    exact Newton jump to the minimizer (up to the damping).
    """
    step = grad_vec / (fisher_diagonal + damping)
    step, clipped = _clip_step(step, clip_norm)
    return theta - step, {"step_norm": float(np.linalg.norm(step)), "clip_applied": clipped}


def fisher_noise(
    fisher_diagonal: np.ndarray, damping: float, sigma: float, seed: int
) -> np.ndarray:
    """sigma * (F + damping)^-1/4 * b with b ~ N(0, I), seeded."""
    rng = np.random.default_rng(mix_seed(seed, "fisher-noise"))
    b = rng.standard_normal(fisher_diagonal.shape[0])
    return sigma * (fisher_diagonal + damping) ** -0.25 * b


def _fisher_step(m: ModelState, d_r: Dataset, cfg: FisherConfig):
    if len(d_r) == 0:
        raise ValueError("fisher unlearning needs a nonempty remaining set")
    fdiag = fisher_diag(m, d_r, mode="sampled", seed=cfg.seed)
    theta = m.theta
    info = {"step_norm": 0.0, "clip_applied": False}
    if cfg.mode == NEWTON_PLUS_NOISE:
        theta, info = newton_step(theta, grad(m, d_r), fdiag, cfg.damping, cfg.clip_norm)
    if cfg.sigma > 0:
        theta = theta + fisher_noise(fdiag, cfg.damping, cfg.sigma, cfg.seed)
    _check_finite(theta, "fisher_unlearn")
    return theta, info


def fisher_unlearn(m: ModelState, d_r: Dataset, cfg: FisherConfig) -> ModelState:
    """Newton step on the remaining data plus calibrated Fisher noise.

    sigma = 0 with mode "noise_only" is the identity map, bit-exact: the
    noise branch is skipped entirely rather than adding a zero vector.
    """
    theta, _ = _fisher_step(m, d_r, cfg)
    return m.with_theta(theta)


# ---------------------------------------------------------------------------
# inverse-Hessian-vector products


def lissa_solve(apply_hvp, v: np.ndarray, depth: int, scale: float, damping: float):
    """Truncated Neumann recursion returning approximately (H + damping)^-1 v.

    r_{j+1} = v + r_j - (H r_j + damping r_j) / scale, result r_depth / scale.
    Divergence is detected on the update increments ||r_{j+1} - r_j||: on a
    convergent run they decay geometrically while ||r_j|| itself grows toward
    the fixed point, so the iterate norm is not a usable signal. Five
    consecutive increment growths raise DivergenceError.
    """
    r = v.astype(np.float64).copy()
    prev_increment = None
    growing = 0
    for j in range(depth):
        r_next = v + r - (apply_hvp(r) + damping * r) / scale
        if not np.all(np.isfinite(r_next)):
            raise DivergenceError(j + 1, "LiSSA produced non-finite iterate; increase lissa_scale")
        increment = float(np.linalg.norm(r_next - r))
        if prev_increment is not None and increment > prev_increment:
            growing += 1
            if growing >= 5:
                raise DivergenceError(
                    j + 1,
                    "LiSSA increments grew for 5 consecutive steps; increase lissa_scale",
                )
        else:
            growing = 0
        prev_increment = increment
        r = r_next
    return r / scale


def lissa_inverse_hvp(
    m: ModelState, d: Dataset, v: np.ndarray, cfg: InfluenceConfig
) -> np.ndarray:
    """LiSSA estimate of (H + eps I)^-1 v with H over the given data.

    Each step estimates the Hessian on a fresh seeded draw of batch_r
    samples; when batch_r covers the dataset the recursion is deterministic
    full-batch, which is the path the dense-solve oracle checks.
    """
    if len(d) == 0:
        raise ValueError("lissa needs a nonempty dataset")
    X, y = d.features, d.labels
    n = len(d)
    if cfg.batch_r >= n:
        apply_hvp = lambda r: _hvp_arrays(m.arch, m.theta, X, y, r, cfg.ridge)
    else:
        rng = np.random.default_rng(mix_seed(cfg.seed, "lissa"))

        def apply_hvp(r):
            idx = rng.choice(n, size=cfg.batch_r, replace=False)
            return _hvp_arrays(m.arch, m.theta, X[idx], y[idx], r, cfg.ridge)

    return lissa_solve(apply_hvp, v, cfg.lissa_depth, cfg.lissa_scale, cfg.damping)


def cg_solve(apply_op, v: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """Conjugate gradient for SPD apply_op, stopping at ||r||/||v|| <= tol.

    Hitting max_iter returns the best iterate with a RuntimeWarning instead
    of raising: a half-converged inverse-HVP is still a usable update.
    """
    v = np.asarray(v, dtype=np.float64)
    v_norm = float(np.linalg.norm(v))
    if v_norm == 0.0:
        return np.zeros_like(v)
    x = np.zeros_like(v)
    r = v.copy()
    p = r.copy()
    rs = float(r @ r)
    for _ in range(max_iter):
        if np.sqrt(rs) / v_norm <= tol:
            return x
        Ap = apply_op(p)
        alpha = rs / float(p @ Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    if np.sqrt(rs) / v_norm > tol:
        warnings.warn(
            f"cg stopped at max_iter={max_iter} with relative residual "
            f"{np.sqrt(rs) / v_norm:.3e}",
            RuntimeWarning,
        )
    return x


def cg_inverse_hvp(
    m: ModelState, d_r: Dataset, v: np.ndarray, cfg: InfluenceConfig
) -> np.ndarray:
    """Conjugate gradient solve of (H + eps I) x = v, full batch."""
    if len(d_r) == 0:
        raise ValueError("cg needs a nonempty dataset")
    X, y = d_r.features, d_r.labels

    def apply_op(r):
        return _hvp_arrays(m.arch, m.theta, X, y, r, cfg.ridge) + cfg.damping * r

    return cg_solve(apply_op, v, cfg.cg_tol, cfg.cg_max_iter)


def forget_gradient_sum(m: ModelState, d_u: Dataset, batch_f: int, ridge: float):
    """Sum of per-sample gradients over the forget set, chunked by batch_f."""
    v = np.zeros_like(m.theta)
    for start in range(0, len(d_u), batch_f):
        chunk = d_u.select(range(start, min(start + batch_f, len(d_u))))
        v += len(chunk) * grad(m, chunk, ridge=ridge)
    return v


def _influence_step(m: ModelState, d_full: Dataset, d_u_ids, cfg: InfluenceConfig):
    ids = list(d_u_ids)
    forget_samples = samples_by_ids(d_full, ids)
    info = {"step_norm": 0.0, "clip_applied": False}
    if not ids:
        return m.theta, d_full, info
    d_r = remove_by_ids(d_full, ids)
    d_u = Dataset(forget_samples, d_full.num_classes, d_full.feature_dim)
    v = forget_gradient_sum(m, d_u, cfg.batch_f, cfg.ridge)
    if cfg.solver == "lissa":
        x = lissa_inverse_hvp(m, d_r, v, cfg)
    else:
        x = cg_inverse_hvp(m, d_r, v, cfg)
    if cfg.sign == SIGN_AS_PAPER:
        step = -x
    else:
        step = x / len(d_full)
    step, clipped = _clip_step(step, cfg.clip_norm)
    info = {"step_norm": float(np.linalg.norm(step)), "clip_applied": clipped}
    theta = m.theta + step
    _check_finite(theta, "influence_update")
    return theta, d_r, info


def influence_update(
    m: ModelState, d_full: Dataset, d_u_ids, cfg: InfluenceConfig
) -> ModelState:
    """One-shot influence unlearning of the given ids (hash-checked).

    The Hessian is estimated over the remaining data; the summed forget-set
    gradient is pushed through the configured inverse-HVP solver.
    """
    theta, _, _ = _influence_step(m, d_full, d_u_ids, cfg)
    return m.with_theta(theta)


def sequential_unlearn(
    m: ModelState,
    d: Dataset,
    d_u_ids,
    method: str,
    cfg,
    minibatch_size: int,
    log_path=None,
    eval_data: Dataset | None = None,
) -> ModelState:
    """Apply an approximate unlearning method over consecutive id minibatches.

    Threads the evolving model and the shrinking remaining set through each
    step; per-step seeds are derived so repeated noise draws differ. When
    log_path is given, one JSON line per step records method, minibatch
    index, step norm, clip flag and (if eval_data is given) accuracy.
    """
    if minibatch_size < 1:
        raise ValueError("minibatch_size must be >= 1")
    if method not in ("fisher", "influence"):
        raise ValueError(f"unknown method {method!r}")
    ids = list(d_u_ids)
    chunks = [ids[b : b + minibatch_size] for b in range(0, len(ids), minibatch_size)]
    current = m
    data = d
    records = []
    for index, chunk in enumerate(chunks):
        step_cfg = replace(cfg, seed=mix_seed(cfg.seed, "seq", index))
        if method == "influence":
            theta, data, info = _influence_step(current, data, chunk, step_cfg)
            current = current.with_theta(theta)
        else:
            data = remove_by_ids(data, chunk)
            theta, info = _fisher_step(current, data, step_cfg)
            current = current.with_theta(theta)
        record = {"method": method, "minibatch": index, **info}
        if eval_data is not None:
            record["accuracy"] = accuracy(current, eval_data)
        records.append(record)
    if log_path is not None:
        with open(Path(log_path), "w") as f:
            for record in records:
                f.write(json.dumps(record) + "\n")
    return current
