"""Shared prototype matrix and entropic-transport code assignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class SinkhornError(ValueError):
    pass


class Prototypes:
    """Trainable ``(d_z, H)`` matrix whose columns are unit-norm cluster centroids."""

    def __init__(self, weight: np.ndarray):
        self.weight = Tensor(weight, requires_grad=True, name="prototypes")
        self.renormalize()

    @classmethod
    def init(cls, dim: int, count: int, rng: np.random.Generator) -> Prototypes:
        return cls(rng.normal(size=(dim, count)))

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @property
    def count(self) -> int:
        return self.weight.shape[1]

    def renormalize(self) -> None:
        w = self.weight.data
        w /= np.sqrt((w**2).sum(axis=0, keepdims=True))

    def parameters(self) -> dict[str, Tensor]:
        return {"prototypes": self.weight}


def score(prototypes: Prototypes | Tensor, features: Tensor) -> Tensor:
    """Score matrix ``C^T Z`` of shape ``(H, M)`` for row features ``(M, d_z)``."""
    c = prototypes.weight if isinstance(prototypes, Prototypes) else ad.as_tensor(prototypes)
    z = ad.as_tensor(features)
    if z.ndim != 2 or z.shape[1] != c.shape[0]:
        raise ad.ShapeError("score", None, f"features {z.shape} do not match prototype width {c.shape[0]}")
    return ad.matmul(ad.transpose(c), ad.transpose(z))


@dataclass
class CodeMatrix:
    q: np.ndarray
    eps: float
    iterations: int
    residual: float
    converged: bool
    history: list[float] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.q.shape

    def distributions(self) -> np.ndarray:
        """Per-feature code distributions, shape ``(M, H)``, each summing to one."""
        return (self.q / _col_sums(self.q)).T


# numpy's pairwise reductions can differ in the last bit with memory
# alignment; strictly sequential sums over sorted values do not depend on
# element order, which keeps the solver exactly equivariant under column
# permutations.
def _ordered_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.take(np.add.accumulate(np.sort(x, axis=axis), axis=axis), -1, axis=axis)


def _row_sums(q: np.ndarray) -> np.ndarray:
    return _ordered_sum(q, axis=1)


def _col_sums(q: np.ndarray) -> np.ndarray:
    return np.add.accumulate(q, axis=0)[-1]


def marginal_residual(q: np.ndarray) -> float:
    """L1 distance of the row and column sums from their uniform targets."""
    h, m = q.shape
    return float(_ordered_sum(np.abs(_row_sums(q) - 1.0 / h)) + _ordered_sum(np.abs(_col_sums(q) - 1.0 / m)))


def sinkhorn_codes(scores, eps: float = 0.05, max_iters: int = 3, tol: float = 1e-3) -> CodeMatrix:
    """Solve ``max_Q Tr(Q^T S) + eps * H(Q)`` under uniform marginals.

    Alternating row/column rescaling of ``exp(S / eps)``. The input is always
    treated as a constant: no gradient flows back through the codes.
    Column permutations of ``scores`` permute the result bit-exactly.
    """
    s = np.array(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if eps <= 0:
        raise SinkhornError(f"eps must be positive, got {eps}")
    if s.ndim != 2 or s.size == 0:
        raise SinkhornError(f"scores must be a non-empty matrix, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise SinkhornError("scores contain non-finite values")
    h, m = s.shape
    q = np.exp((s - s.max(axis=0, keepdims=True)) / eps)
    rows = _row_sums(q)
    if np.any(rows == 0.0) or not np.all(np.isfinite(rows)):
        raise SinkhornError(f"exp(scores / eps) degenerates at eps={eps}; use a larger eps")
    q /= _ordered_sum(rows)

    history = [marginal_residual(q)]
    iterations = 0
    while iterations < max_iters and history[-1] >= tol:
        q /= _row_sums(q)[:, None] * h
        q /= _col_sums(q) * m
        iterations += 1
        history.append(marginal_residual(q))
    return CodeMatrix(q=q, eps=eps, iterations=iterations, residual=history[-1],
                      converged=history[-1] < tol, history=history)
