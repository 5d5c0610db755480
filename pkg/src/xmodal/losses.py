"""Distillation and teacher objectives.

Torch functions accept a single logit vector ``(C,)`` or a batch ``(B, C)``;
batched losses are averaged over the batch.  Every softmax goes through
``log_softmax`` (log-sum-exp stabilised).

The ``*_grad`` functions give closed-form gradients for single instances in
float64 numpy.  Training relies on autograd; the closed forms exist so the two
can be checked against each other and against finite differences.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateInputError, InputError


@dataclass(frozen=True)
class KDConfig:
    tau: float = 4.0
    lambda_kd: float = 1.0
    lambda_hier: float = 0.1
    lambda_cosreg: float = 0.01

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        for name in ("lambda_kd", "lambda_hier", "lambda_cosreg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _reduce(per_sample: torch.Tensor) -> torch.Tensor:
    return per_sample if per_sample.dim() == 0 else per_sample.mean()


def average_logits(z_tm: torch.Tensor, z_tx: torch.Tensor) -> torch.Tensor:
    _check_same_shape(z_tm, z_tx, "average_logits")
    return (z_tm + z_tx) / 2


def kd_loss(z_s: torch.Tensor, z_bar: torch.Tensor, tau: float) -> torch.Tensor:
    """``-tau^2 * sum_c softmax(z_bar/tau)_c * log softmax(z_s/tau)_c``."""
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    _check_same_shape(z_s, z_bar, "kd_loss")
    log_p_s = F.log_softmax(z_s / tau, dim=-1)
    p_t = F.softmax(z_bar / tau, dim=-1)
    return _reduce(-(tau**2) * (p_t * log_p_s).sum(dim=-1))


def as_onehot(y, num_classes: int, dtype=torch.float64) -> torch.Tensor:
    """Integer labels become one-hot rows; one-hot input is validated and passed through."""
    y = torch.as_tensor(y)
    if y.is_floating_point():
        if y.shape[-1] != num_classes:
            raise InputError(f"one-hot target has length {y.shape[-1]}, expected {num_classes}")
        ok = ((y == 0) | (y == 1)).all() and (y.sum(dim=-1) == 1).all()
        if not ok:
            raise InputError("target is not a valid one-hot vector")
        return y.to(dtype)
    if ((y < 0) | (y >= num_classes)).any():
        raise InputError("label out of range")
    return F.one_hot(y.long(), num_classes).to(dtype)


def cross_entropy(z: torch.Tensor, y) -> torch.Tensor:
    target = as_onehot(y, z.shape[-1], dtype=z.dtype)
    _check_same_shape(z, target, "cross_entropy")
    return _reduce(-(target * F.log_softmax(z, dim=-1)).sum(dim=-1))


def student_total(z_s: torch.Tensor, z_bar: torch.Tensor, y_onehot, cfg: KDConfig) -> torch.Tensor:
    """Supervised cross-entropy plus ``lambda_kd`` times the KD term."""
    ce = cross_entropy(z_s, y_onehot)
    if cfg.lambda_kd == 0:
        return ce
    return ce + cfg.lambda_kd * kd_loss(z_s, z_bar, cfg.tau)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise ``1 - cos(a, b)`` (not reduced)."""
    _check_same_shape(a, b, "cosine_distance")
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateInputError("cosine of a zero vector is undefined")
    return 1 - (a * b).sum(dim=-1) / (na * nb)


def hierarchical_loss(n_gt: torch.Tensor, n_relaxed: torch.Tensor) -> torch.Tensor:
    """Distance of the relaxed embedding from the exact class-name embedding."""
    return _reduce(cosine_distance(n_gt, n_relaxed))


def cosreg_loss(n_pretrained: torch.Tensor, n_relaxed: torch.Tensor) -> torch.Tensor:
    """Distance of the relaxed embedding from its pretrained snapshot."""
    return _reduce(cosine_distance(n_pretrained, n_relaxed))


def teacher_total(
    z_tx: torch.Tensor,
    y,
    n_gt: torch.Tensor | None,
    n_relaxed: torch.Tensor | None,
    n_pretrained: torch.Tensor | None,
    cfg: KDConfig,
    relaxed_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cross-entropy plus the two semantic regularizers.

    The regularizers are averaged over the rows flagged in ``relaxed_mask``
    (the samples whose text came from the noun bank); with no such rows, or
    ``n_relaxed=None``, they contribute nothing.
    """
    loss = cross_entropy(z_tx, y)
    if n_relaxed is None or (cfg.lambda_hier == 0 and cfg.lambda_cosreg == 0):
        return loss
    if relaxed_mask is not None:
        if not bool(relaxed_mask.any()):
            return loss
        n_gt, n_relaxed, n_pretrained = n_gt[relaxed_mask], n_relaxed[relaxed_mask], n_pretrained[relaxed_mask]
    if cfg.lambda_hier:
        loss = loss + cfg.lambda_hier * hierarchical_loss(n_gt, n_relaxed)
    if cfg.lambda_cosreg:
        loss = loss + cfg.lambda_cosreg * cosreg_loss(n_pretrained, n_relaxed)
    return loss


# --- closed-form gradients (single instance, float64 numpy) ---------------


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max()
    return s - np.log(np.exp(s).sum())


def kd_loss_grad(z_s, z_bar, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`kd_loss` w.r.t. ``z_s`` and ``z_bar``."""
    z_s = np.asarray(z_s, dtype=np.float64)
    z_bar = np.asarray(z_bar, dtype=np.float64)
    p_s = _softmax(z_s / tau)
    p_t = _softmax(z_bar / tau)
    log_p_s = _log_softmax(z_s / tau)
    g_s = tau * (p_s - p_t)
    g_bar = -tau * p_t * (log_p_s - np.dot(p_t, log_p_s))
    return g_s, g_bar


def cross_entropy_grad(z, y_onehot) -> np.ndarray:
    return _softmax(np.asarray(z, dtype=np.float64)) - np.asarray(y_onehot, dtype=np.float64)


def student_total_grad(z_s, z_bar, y_onehot, cfg: KDConfig) -> tuple[np.ndarray, np.ndarray]:
    g_s, g_bar = kd_loss_grad(z_s, z_bar, cfg.tau)
    return cross_entropy_grad(z_s, y_onehot) + cfg.lambda_kd * g_s, cfg.lambda_kd * g_bar


def cosine_distance_grad(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``1 - cos(a, b)`` w.r.t. ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    cos = np.dot(a, b) / (na * nb)
    g_a = -(b / (na * nb) - cos * a / na**2)
    g_b = -(a / (na * nb) - cos * b / nb**2)
    return g_a, g_b


def teacher_total_grad(z_tx, y_onehot, n_gt, n_relaxed, n_pretrained, cfg: KDConfig) -> dict[str, np.ndarray]:
    g_gt, g_rel_h = cosine_distance_grad(n_gt, n_relaxed)
    g_pre, g_rel_c = cosine_distance_grad(n_pretrained, n_relaxed)
    return {
        "z_tx": cross_entropy_grad(z_tx, y_onehot),
        "n_gt": cfg.lambda_hier * g_gt,
        "n_relaxed": cfg.lambda_hier * g_rel_h + cfg.lambda_cosreg * g_rel_c,
        "n_pretrained": cfg.lambda_cosreg * g_pre,
    }
