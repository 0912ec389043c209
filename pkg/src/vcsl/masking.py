"""Masked slice-feature prediction through the deformable stack."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def mask_count(n: int, ratio: float) -> int:
    # the epsilon keeps e.g. 0.1 * 30 = 3.0000000000000004 from rounding up to 4
    return max(1, math.ceil(ratio * n - 1e-9))


@dataclass(frozen=True)
class MaskPlan:
    mask: np.ndarray
    ratio: float
    seed: int

    @property
    def n(self) -> int:
        return self.mask.size

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def sample_mask(n: int, ratio: float = 0.10, seed: int = 0) -> MaskPlan:
    """Mask exactly ``max(1, ceil(ratio * n))`` positions drawn uniformly without replacement."""
    if n < 1:
        raise ValueError("need at least one position to mask")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=mask_count(n, ratio), replace=False)] = True
    return MaskPlan(mask, ratio, seed)


class MaskToken:
    def __init__(self, width: int, rng: np.random.Generator):
        self.value = Tensor(rng.normal(0.0, 0.02, size=width), requires_grad=True, name="mask_token")

    def parameters(self) -> dict[str, Tensor]:
        return {"mask_token": self.value}


class Decoder:
    """Affine map from a stack output row to one slice's multi-level feature, with per-position bias."""

    def __init__(self, width: int, out_width: int, positions: int, rng: np.random.Generator):
        self.weight = Tensor(rng.normal(0.0, 1.0 / math.sqrt(width), size=(width, out_width)),
                             requires_grad=True, name="decoder.w")
        self.bias = Tensor(np.zeros((positions, out_width)), requires_grad=True, name="decoder.b")

    def parameters(self) -> dict[str, Tensor]:
        return {"decoder.w": self.weight, "decoder.b": self.bias}

    def __call__(self, h: Tensor) -> Tensor:
        """``h`` is ``(..., n, width)``; returns ``(..., n, out_width)``."""
        return ad.matmul(h, self.weight) + self.bias


def _row_mask(plans, levels: int) -> np.ndarray:
    if isinstance(plans, MaskPlan):
        return np.repeat(plans.mask, levels)
    return np.stack([np.repeat(p.mask, levels) for p in plans])


def apply_mask(y: Tensor, plans, token, levels: int = 1) -> Tensor:
    """Replace every level row of each masked slice by the mask token.

    ``y`` is ``(n * levels, F)`` with one plan, or ``(V, n * levels, F)`` with a
    sequence of ``V`` plans.
    """
    token = token.value if isinstance(token, MaskToken) else token
    rows = _row_mask(plans, levels)
    if rows.shape != ad.as_tensor(y).shape[:-1]:
        raise ValueError(f"mask covers {rows.shape} rows but features have shape {ad.as_tensor(y).shape}")
    return ad.mask_rows(y, rows, token)


def predict_slices(y_masked: Tensor, stack, decoder: Decoder, n: int, levels: int) -> Tensor:
    """Decoded per-slice predictions ``(V, n, levels * F)`` from the masked sequence."""
    h = stack.encode_sequence(y_masked)
    centres = np.arange(n) * levels + (levels - 1) / 2.0
    coords = np.broadcast_to(stack.output_coordinates(centres), (h.shape[0], n)).copy()
    return decoder(ad.interp1d(h, Tensor(coords)))


def masked_residual_loss(pred: Tensor, targets: np.ndarray, plans, squared: bool = False) -> Tensor:
    """Per-volume sum of residual norms at masked slices, averaged over volumes."""
    mask = np.stack([p.mask for p in plans])
    if not mask.any(axis=1).all():
        raise ValueError("every volume needs at least one masked slice")
    v, n, width = pred.shape
    flat = np.flatnonzero(mask.reshape(-1))
    residual = ad.take(ad.reshape(pred, (v * n, width)), flat) - targets.reshape(v * n, width)[flat]
    if squared:
        per_slice = ad.sum(ad.mul(residual, residual), axis=1)
    else:
        per_slice = ad.norm(residual, axis=1)
    return ad.sum(per_slice) * (1.0 / v)


def mask_loss(views: np.ndarray, encoder, stack, decoder: Decoder, token, plans,
              squared: bool = False, train_encoder: bool = True, targets: np.ndarray | None = None) -> Tensor:
    """Masked-embedding prediction loss for a batch of volume views ``(V, n, H, W)``.

    Targets are the encoder's own multi-level slice features ``(V, n, L * F)``
    and are treated as constants; pass ``targets`` to pin them explicitly.
    With ``train_encoder=False`` the encoder runs outside the graph
    altogether (frozen backbone).
    """
    views = np.asarray(views, dtype=np.float64)
    if views.ndim == 3:
        views = views[None]
    if isinstance(plans, MaskPlan):
        plans = [plans]
    levels = encoder.cfg.levels
    v, n = views.shape[:2]
    if len(plans) != v or any(p.n != n for p in plans):
        raise ValueError("one mask plan of matching length is required per volume")
    if train_encoder:
        y = encoder.encode_volume_slices(views)
    else:
        with ad.no_grad():
            y = encoder.encode_volume_slices(views)
    if targets is None:
        targets = y.data.reshape(v, n, levels * y.shape[-1])
    pred = predict_slices(apply_mask(y, plans, token, levels), stack, decoder, n, levels)
    return masked_residual_loss(pred, targets, plans, squared)
