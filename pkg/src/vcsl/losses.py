"""Swapped-prediction clustering losses over shared prototypes."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codes import Prototypes, score, sinkhorn_codes


@dataclass
class LossConfig:
    """``tau_3d`` is the temperature of the volume loss; ``None`` reuses ``tau``."""

    tau: float = 0.1
    eps: float = 0.05
    sinkhorn_iters: int = 3
    sinkhorn_tol: float = 1e-3
    tau_3d: float | None = 0.3

    def __post_init__(self):
        if self.tau <= 0 or (self.tau_3d is not None and self.tau_3d <= 0):
            raise ValueError(f"temperatures must be positive, got {self.tau} and {self.tau_3d}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    def for_volumes(self) -> LossConfig:
        """Same settings with the volume temperature in ``tau``."""
        return self if self.tau_3d is None else replace(self, tau=self.tau_3d, tau_3d=None)


def _weight(prototypes) -> Tensor:
    return prototypes.weight if isinstance(prototypes, Prototypes) else ad.as_tensor(prototypes)


def fit_loss(z: Tensor, q: np.ndarray, prototypes, tau: float) -> Tensor:
    """Mean over rows of ``-sum_k q^k log softmax(z^T C / tau)^k``.

    ``z`` is ``(M, d_z)`` and ``q`` is ``(M, H)``; each row of ``q`` is
    renormalized to sum to one and treated as a constant target.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    totals = q.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise ValueError("code column sums to zero")
    q = q / totals
    logits = ad.matmul(z, _weight(prototypes)) * (1.0 / tau)
    log_p = ad.log_softmax(logits)
    return ad.scale(ad.sum(ad.mul(log_p, q)), -1.0 / z.shape[0])


def code_fit_loss(z: Tensor, q, prototypes, tau: float) -> Tensor:
    """Fit between a single feature ``z (d_z,)`` and a code ``q (H,)``."""
    z = ad.reshape(ad.as_tensor(z), (1, -1))
    return fit_loss(z, np.reshape(q, (1, -1)), prototypes, tau)


def intra_loss(z_t: Tensor, q_t, z_s: Tensor, q_s, prototypes, tau: float) -> Tensor:
    """Swapped prediction: view t predicts the code of s and vice versa."""
    return fit_loss(z_t, q_s, prototypes, tau) + fit_loss(z_s, q_t, prototypes, tau)


# same swapped structure; the 3D variant takes holistic volume features
inter_loss = intra_loss


def solve_codes(z_t: Tensor, z_s: Tensor, prototypes, cfg: LossConfig):
    """Codes for both views, solved jointly over the stacked ``2B`` features."""
    s_t = score(_weight(prototypes), z_t.detach()).data
    s_s = score(_weight(prototypes), z_s.detach()).data
    codes = sinkhorn_codes(np.concatenate([s_t, s_s], axis=1), cfg.eps, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    q = codes.distributions()
    b = z_t.shape[0]
    return q[:b], q[b:], codes


def swapped_loss(z_t: Tensor, z_s: Tensor, prototypes, cfg: LossConfig) -> Tensor:
    if z_t.shape != z_s.shape:
        raise ad.ShapeError("swapped_loss", None, f"view shapes differ: {z_t.shape} vs {z_s.shape}")
    if z_t.shape[0] < 2:
        raise ValueError("swapped loss needs a batch of at least 2 items")
    q_t, q_s, _ = solve_codes(z_t, z_s, prototypes, cfg)
    return intra_loss(z_t, q_t, z_s, q_s, prototypes, cfg.tau)


def batch_intra_loss(view_t: np.ndarray, view_s: np.ndarray, encoder, prototypes, cfg: LossConfig) -> Tensor:
    """2D clustering loss for two augmented views of a batch of slices ``(B, H, W)``."""
    if len(view_t) < 2:
        raise ValueError("batch_intra_loss needs at least 2 slices")
    z_t = encoder.encode(view_t)
    z_s = encoder.encode(view_s)
    return swapped_loss(z_t, z_s, prototypes, cfg)


def batch_inter_loss(view_t: np.ndarray, view_s: np.ndarray, encoder, stack, prototypes, cfg: LossConfig) -> Tensor:
    """3D clustering loss for two augmented views of a batch of volumes ``(B, n, H, W)``."""
    if view_t.ndim != 4 or view_t.shape[1] < 1:
        raise ValueError("volumes must carry at least one slice")
    if len(view_t) < 2:
        raise ValueError("batch_inter_loss needs at least 2 volumes")
    z_t = stack.volume_embed(encoder.encode_volume_slices(view_t))
    z_s = stack.volume_embed(encoder.encode_volume_slices(view_s))
    return swapped_loss(z_t, z_s, prototypes, cfg.for_volumes())
