"""First fusion stage: modality projection, factorised bilinear fusion and the
cross-modal contrastive regulariser."""

from __future__ import annotations

from itertools import combinations
from typing import Sequence

from . import tensor as T
from .tensor import Tensor

# (s, v), (s, t), (v, t)
MODALITY_PAIRS = (("s", "v"), ("s", "t"), ("v", "t"))


def project_latent(features, projection) -> Tensor:
    """``ReLU(e_k @ M_k)`` for a single row or a batch of rows."""
    features, projection = T.constant(features), T.constant(projection)
    squeeze = features.ndim == 1
    if squeeze:
        features = features.reshape(1, -1)
    out = T.relu(features @ projection)
    return out.reshape(-1) if squeeze else out


def fuse(latents: Sequence, core_factors: Sequence) -> Tensor:
    """Element-wise product of each latent pushed through its core factor.

    With three modalities this is ``(s @ Ms) * (v @ Mv) * (t @ Mt)``, i.e. a
    4-mode Tucker product whose core is super-diagonal in the output mode.
    Works on single vectors or on row batches.
    """
    if len(latents) != len(core_factors) or not latents:
        raise ValueError("need one core factor per latent and at least one latent")
    out = None
    for latent, factor in zip(latents, core_factors):
        latent, factor = T.constant(latent), T.constant(factor)
        squeeze = latent.ndim == 1
        if squeeze:
            latent = latent.reshape(1, -1)
        part = latent @ factor
        if squeeze:
            part = part.reshape(-1)
        out = part if out is None else out * part
    return out


def contrastive_loss(latents: dict[str, Tensor], pairs: Sequence[tuple[str, str]] | None = None) -> Tensor:
    """Cross-modal contrastive loss averaged over the ``N`` batch entities.

    For entity ``i`` and each modality pair ``(p, q)``::

        sum_j [ d(p_i, q_i) - d(p_i, q_j) + 2 ]  with  d(u, v) = -cos(u, v)

    summed over pairs and scaled by ``1 / (|pairs| * N)``. ``j`` runs over the
    whole batch including ``i``. Each bracket lies in ``[0, 4]``.
    """
    if pairs is None:
        pairs = [p for p in MODALITY_PAIRS if p[0] in latents and p[1] in latents]
        if not pairs:
            pairs = list(combinations(sorted(latents), 2))
    if not pairs:
        raise ValueError("contrastive loss needs at least two modalities")
    n = None
    total = None
    for p, q in pairs:
        a, b = latents[p], latents[q]
        if a.shape != b.shape:
            raise T.ShapeError(f"latent batches differ: {p}{a.shape} vs {q}{b.shape}")
        n = a.shape[0]
        if n == 0:
            raise ValueError("contrastive loss needs a non-empty batch")
        positive = -T.cosine_rows(a, b)  # d(p_i, q_i), shape (N,)
        negative = -T.cosine_matrix(a, b)  # d(p_i, q_j), shape (N, N)
        # sum_j [pos_i - neg_ij + 2] = N * pos_i - sum_j neg_ij + 2N
        per_entity = positive * float(n) - negative.sum(axis=1) + 2.0 * n
        total = per_entity if total is None else total + per_entity
    return (total * (1.0 / (len(pairs) * n))).mean()
