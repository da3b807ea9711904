"""Cross-sample invariance penalty on X_G and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError
from .tensor import Tensor


@dataclass
class LossReport:
    ce: float
    causal: float
    total: float
    per_layer_var: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"ce": self.ce, "causal": self.causal, "total": self.total,
                "per_layer_var": list(self.per_layer_var)}


def shared_positions(valid_mask) -> np.ndarray:
    """Query positions valid in every sample of the batch."""
    valid_mask = np.asarray(valid_mask, dtype=bool)
    return valid_mask.all(axis=0)


def layer_variance(xg: Tensor, valid_mask=None, pool: str = "none") -> Tensor:
    """Mean over (head, position, feature) of the across-batch population variance.

    xg: [batch, heads, q_len, head_dim]; valid_mask: [batch, q_len].
    """
    b, h, q, d = xg.shape
    if b == 0:
        raise DataError("causal loss needs a batch of at least one sample")
    if valid_mask is None:
        valid_mask = np.ones((b, q), dtype=bool)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if valid_mask.shape != (b, q):
        raise DataError(f"valid mask shape {valid_mask.shape} does not match X_G {xg.shape}")
    keep = shared_positions(valid_mask)
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise DataError("no query position is valid in every sample")
    weights = keep.astype(np.float64)[None, :, None]  # [1, q, 1]
    if pool == "mean":
        pooled = T.scale(T.sum(xg * weights[None], axis=2), 1.0 / n_keep)  # [b, h, d]
        return T.mean(T.variance(pooled, axis=0))
    if pool != "none":
        raise ValueError(f"unknown pooling {pool!r}")
    var = T.variance(xg, axis=0)  # [h, q, d]
    return T.scale(T.sum(var * weights), 1.0 / (h * n_keep * d))


def causal_loss(xg_per_layer, valid_mask=None, pool: str = "none") -> tuple[Tensor, list[Tensor]]:
    """Arithmetic mean over layers of ``layer_variance``. Returns (loss, per-layer terms)."""
    xg_per_layer = list(xg_per_layer)
    if not xg_per_layer:
        raise DataError("causal loss needs at least one layer of X_G")
    terms = [layer_variance(xg, valid_mask, pool) for xg in xg_per_layer]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.scale(total, 1.0 / len(terms)), terms


def total_loss(ce: Tensor, causal: Tensor, alpha: float, per_layer=()) -> tuple[Tensor, LossReport]:
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    total = ce if alpha == 0 else ce + T.scale(causal, alpha)
    report = LossReport(
        ce=ce.item(), causal=causal.item(), total=total.item(),
        per_layer_var=[t.item() for t in per_layer],
    )
    return total, report
