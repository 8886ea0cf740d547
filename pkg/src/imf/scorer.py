"""Relation-conditioned scorers producing 1-vs-all predictions per modality."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCORERS = ("contextual", "transe", "distmult")


def contextual_embed(entity, relation, W, bias) -> Tensor:
    """``e^T (W x_3 r) + b``.

    ``entity`` is ``D`` or ``B x D``, ``relation`` is ``d_r`` or ``B x d_r``,
    ``W`` is ``D x D x d_r`` and ``bias`` is ``D``.
    """
    entity, relation, W, bias = (T.constant(x) for x in (entity, relation, W, bias))
    squeeze = entity.ndim == 1
    if squeeze:
        entity = entity.reshape(1, -1)
    if relation.ndim == 1:
        relation = relation.reshape(1, -1)
    if W.ndim != 3 or W.shape[0] != entity.shape[1] or W.shape[2] != relation.shape[1]:
        raise T.ShapeError(
            f"contextual_embed: W {W.shape} incompatible with entity {entity.shape} and relation {relation.shape}"
        )
    # contract the entity first: B x D x d_r is the cheapest intermediate
    partial = T.einsum("bi,ijl->bjl", entity, W)
    if relation.shape[0] != entity.shape[0]:
        if relation.shape[0] != 1:
            raise T.ShapeError(f"{relation.shape[0]} relations for {entity.shape[0]} entities")
        out = T.einsum("bjl,l->bj", partial, relation.reshape(-1))
    else:
        out = T.einsum("bjl,bl->bj", partial, relation)
    out = out + bias
    return out.reshape(-1) if squeeze else out


def score_all(context, candidates, scale: float = 1.0) -> Tensor:
    """``sigmoid(scale * cos(candidate_i, context))`` for every candidate row.

    ``context`` may be a single ``D`` vector (result ``|E|``) or ``B x D``
    (result ``B x |E|``).
    """
    context, candidates = T.constant(context), T.constant(candidates)
    if context.ndim == 1:
        cos = T.cosine_rows(candidates, context.reshape(1, -1))
    else:
        cos = T.cosine_matrix(context, candidates)
    return T.sigmoid(cos * scale if scale != 1.0 else cos)


def bce_loss(scores, targets) -> Tensor:
    """Binary cross-entropy averaged over candidates and then over queries."""
    scores = T.constant(scores)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != scores.shape:
        raise T.ShapeError(f"bce_loss: scores {scores.shape} vs targets {targets.shape}")
    terms = T.log(scores) * targets + T.log(1.0 - scores) * (1.0 - targets)
    return -terms.mean()


def alternate_score(kind: str, head, relation, candidates) -> Tensor:
    """TransE (``sigmoid(-||h + r - t||_1)``) or DistMult (``sigmoid(<h, r, t>)``)
    scores against all candidates. Accepts single vectors or ``B x D`` batches."""
    head, relation, candidates = T.constant(head), T.constant(relation), T.constant(candidates)
    squeeze = head.ndim == 1
    if squeeze:
        head = head.reshape(1, -1)
        relation = relation.reshape(1, -1)
    if kind == "transe":
        query = (head + relation).reshape(head.shape[0], 1, head.shape[1])
        diff = query - candidates.reshape(1, candidates.shape[0], candidates.shape[1])
        out = T.sigmoid(-T.abs_(diff).sum(axis=-1))
    elif kind == "distmult":
        out = T.sigmoid((head * relation) @ candidates.T)
    else:
        raise ValueError(f"unknown scorer kind {kind!r}; expected 'transe' or 'distmult'")
    return out.reshape(-1) if squeeze else out
