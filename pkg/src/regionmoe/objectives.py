"""Training objective: class-balanced cross-entropy + gate entropy + expert diversity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StratificationError

PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-12


@dataclass
class LossConfig:
    lambda_sparsity: float = 0.01
    lambda_diversity: float = 0.01
    class_weighting: str = "balanced"  # or "none"
    class_weights: np.ndarray | None = None  # explicit weights override class_weighting

    def __post_init__(self):
        if self.lambda_sparsity < 0 or self.lambda_diversity < 0:
            raise ValueError("penalty coefficients must be >= 0")
        if self.class_weighting not in ("balanced", "none"):
            raise ValueError(f"class_weighting must be 'balanced' or 'none', got {self.class_weighting!r}")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if not (np.all(np.isfinite(w)) and np.all(w > 0)):
                raise ValueError("class weights must be positive and finite")
            self.class_weights = w

    def weights_for(self, labels, num_classes: int) -> np.ndarray:
        if self.class_weights is not None:
            return self.class_weights
        if self.class_weighting == "none":
            return np.ones(num_classes)
        return class_weights_from_counts(np.bincount(labels, minlength=num_classes))


@dataclass
class LossBreakdown:
    total: float
    ce: float
    sparsity: float
    diversity: float


def class_weights_from_counts(counts) -> np.ndarray:
    """Inverse-frequency weights with mean 1 under the empirical class mix."""
    counts = np.asarray(counts)
    if np.any(counts < 1):
        raise StratificationError(
            f"class counts {counts.tolist()} include an empty class; use stratified folds or a smaller k"
        )
    return counts.sum() / (len(counts) * counts.astype(np.float64))


def weighted_ce(probs, y, w) -> np.ndarray:
    """Per-sample ``-w_y ln max(p_y, 1e-12)``; accepts a single sample or a batch."""
    probs = np.atleast_2d(probs)
    y = np.atleast_1d(y)
    w = np.asarray(w, dtype=np.float64)
    py = probs[np.arange(len(y)), y]
    out = -w[y] * np.log(np.maximum(py, PROB_FLOOR))
    return out


def weighted_ce_grad(probs: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """d(per-sample CE)/d(logits) = w_y (p - onehot(y)); zero where the clamp is active."""
    n = len(y)
    grad = probs.copy()
    grad[np.arange(n), y] -= 1.0
    grad *= w[y][:, None]
    grad[probs[np.arange(n), y] < PROB_FLOOR] = 0.0
    return grad


def gate_entropy(g) -> np.ndarray:
    """Shannon entropy over positive entries, per row."""
    g = np.atleast_2d(g)
    pos = g > 0
    logs = np.log(np.where(pos, g, 1.0))
    return -(g * logs).sum(axis=1)


def gate_entropy_grad(g: np.ndarray) -> np.ndarray:
    pos = g > 0
    return np.where(pos, -(np.log(np.where(pos, g, 1.0)) + 1.0), 0.0)


def _unit_centered(h: np.ndarray):
    hc = h - h.mean(axis=-1, keepdims=True)
    r = np.linalg.norm(hc, axis=-1)
    ok = r >= NORM_FLOOR
    U = np.where(ok[..., None], hc / np.where(ok, r, 1.0)[..., None], 0.0)
    return U, r, ok


def _pair_weights(active: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = active.astype(np.float64)
    W = a[:, :, None] * a[:, None, :]
    N = active.shape[1]
    W[:, np.arange(N), np.arange(N)] = 0.0
    A = a.sum(axis=1)
    pairs = A * (A - 1) / 2
    return W, pairs


def diversity_penalty(h, active_mask) -> np.ndarray:
    """Per-sample mean over active pairs i<j of cos^2 between mean-centred expert logits."""
    h = np.asarray(h, dtype=np.float64)
    active = np.asarray(active_mask, dtype=bool)
    if h.ndim == 2:
        h, active = h[None], active[None]
    U, _, _ = _unit_centered(h)
    G = U @ U.transpose(0, 2, 1)
    W, pairs = _pair_weights(active)
    total = 0.5 * (W * G**2).sum(axis=(1, 2))
    return np.where(pairs > 0, total / np.maximum(pairs, 1.0), 0.0)


def diversity_with_grad(h: np.ndarray, active: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample diversity and its gradient w.r.t. h, shape (n, N, C)."""
    U, r, ok = _unit_centered(h)
    G = U @ U.transpose(0, 2, 1)
    W, pairs = _pair_weights(active)
    WG = W * G
    value = np.where(pairs > 0, 0.5 * (WG * G).sum(axis=(1, 2)) / np.maximum(pairs, 1.0), 0.0)
    scale = np.where(pairs > 0, 2.0 / np.maximum(pairs, 1.0), 0.0)
    dU = scale[:, None, None] * (WG @ U)
    radial = (U * dU).sum(axis=-1, keepdims=True)
    dhc = np.where(ok[..., None], (dU - U * radial) / np.where(ok, r, 1.0)[..., None], 0.0)
    return value, dhc - dhc.mean(axis=-1, keepdims=True)


def diversity_grad(h: np.ndarray, active: np.ndarray) -> np.ndarray:
    """d(per-sample diversity)/dh, shape (n, N, C)."""
    return diversity_with_grad(h, active)[1]


@dataclass
class LossGrads:
    fused: np.ndarray  # (n, C)
    gate: np.ndarray | None = None  # (n, N)
    experts: np.ndarray | None = None  # (n, N, C)


def total_loss(prediction, labels, cfg: LossConfig, class_weights, need_grads: bool = True) -> tuple[LossBreakdown, LossGrads]:
    """Batch-mean objective and its gradient w.r.t. fused logits, final gate
    weights and expert logits. ``prediction`` is a MoE ``Prediction`` or any
    object with ``class_probs`` (baselines: penalties are zero)."""
    y = np.asarray(labels)
    n = len(y)
    if n == 0:
        raise ValueError("empty batch")
    w = np.asarray(class_weights, dtype=np.float64)
    probs = prediction.class_probs
    ce = weighted_ce(probs, y, w)
    grads = LossGrads(weighted_ce_grad(probs, y, w) / n)
    gate = getattr(prediction, "gate", None)
    sparsity = diversity = 0.0
    if gate is not None:
        g = gate.weights
        sparsity = float(gate_entropy(g).mean())
        if cfg.lambda_sparsity:
            grads.gate = cfg.lambda_sparsity * gate_entropy_grad(g) / n
        if cfg.lambda_diversity and need_grads:
            div, dgrad = diversity_with_grad(prediction.expert_logits, gate.active_mask)
            grads.experts = cfg.lambda_diversity * dgrad / n
        else:
            div = diversity_penalty(prediction.expert_logits, gate.active_mask)
        diversity = float(div.mean())
    ce_mean = float(ce.mean())
    total = ce_mean + cfg.lambda_sparsity * sparsity + cfg.lambda_diversity * diversity
    return LossBreakdown(total, ce_mean, sparsity, diversity), grads
