"""Graph-attention structural encoder pretrained with a translational hinge loss.

The encoder attends over each entity's training neighbourhood (both edge
directions plus a self-loop), scores triples with the L1 energy
``||h + r - t||`` and is trained so that true triples beat corrupted ones by a
margin. After training only the entity matrix is kept; it becomes the frozen
structural modality.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import ModalityFeatures, corrupt_triples, write_feature_file
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class GatConfig:
    dim: int = 256
    layers: int = 2
    heads: int = 2
    margin: float = 1.0
    slope: float = 0.2
    epochs: int = 10
    batch_size: int = 512
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.layers < 1 or self.heads < 1:
            raise ValueError("need at least one layer and one head")


@dataclass
class Graph:
    """Edge list with ``dst`` aggregating messages from ``src``."""

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray

    @classmethod
    def from_triples(cls, triples: np.ndarray, num_nodes: int) -> "Graph":
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        loops = np.arange(num_nodes)
        src = np.concatenate([triples[:, 0], triples[:, 2], loops])
        dst = np.concatenate([triples[:, 2], triples[:, 0], loops])
        pairs = np.unique(np.stack([dst, src], axis=1), axis=0)
        return cls(num_nodes, pairs[:, 1].copy(), pairs[:, 0].copy())


def xavier(rng: np.random.Generator, shape, fan_in=None, fan_out=None) -> np.ndarray:
    fan_in = shape[0] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(num_entities: int, num_relations: int, config: GatConfig, rng: np.random.Generator) -> dict:
    """Parameter arrays: node inputs ``x``, per layer/head ``W``, ``a_src``, ``a_dst`` and ``rel``."""
    d = config.dim
    params = {"x": xavier(rng, (num_entities, d))}
    d_in = d
    for layer in range(config.layers):
        last = layer == config.layers - 1
        d_out = d if last else max(1, d // config.heads)
        for h in range(config.heads):
            params[f"W{layer}_{h}"] = xavier(rng, (d_in, d_out))
            params[f"a_src{layer}_{h}"] = xavier(rng, (d_out, 1), fan_in=2 * d_out, fan_out=1)
            params[f"a_dst{layer}_{h}"] = xavier(rng, (d_out, 1), fan_in=2 * d_out, fan_out=1)
        d_in = d if last else d_out * config.heads
    params["rel"] = xavier(rng, (num_relations, d))
    return params


def attention(x: Tensor, graph: Graph, W: Tensor, a_src: Tensor, a_dst: Tensor, slope: float):
    """One attention head. Returns ``(aggregated, alpha)``; ``alpha`` has one entry per edge."""
    wh = x @ W
    logits = T.leaky_relu(T.take(wh @ a_dst, graph.dst) + T.take(wh @ a_src, graph.src), slope)
    seg_max = np.full((graph.num_nodes, 1), -np.inf)
    np.maximum.at(seg_max, graph.dst, logits.data)
    weights = T.exp(logits - seg_max[graph.dst])
    denom = T.segment_sum(weights, graph.dst, graph.num_nodes)
    alpha = weights / T.take(denom, graph.dst)
    messages = alpha * T.take(wh, graph.src)
    return T.segment_sum(messages, graph.dst, graph.num_nodes), alpha


def gat_forward(graph: Graph, params: dict[str, Tensor], config: GatConfig) -> Tensor:
    """Entity embeddings ``|E| x dim``: heads concatenated on hidden layers,
    averaged on the output layer, ELU after every layer."""
    h = params["x"]
    for layer in range(config.layers):
        outs = [
            attention(
                h,
                graph,
                params[f"W{layer}_{k}"],
                params[f"a_src{layer}_{k}"],
                params[f"a_dst{layer}_{k}"],
                config.slope,
            )[0]
            for k in range(config.heads)
        ]
        if layer == config.layers - 1:
            merged = outs[0]
            for o in outs[1:]:
                merged = merged + o
            h = T.elu(merged * (1.0 / config.heads)) if config.heads > 1 else T.elu(merged)
        else:
            h = T.elu(T.concat(outs, axis=1) if len(outs) > 1 else outs[0])
    return h


def energy(h_emb, r_emb, t_emb) -> Tensor:
    """L1 translational energy per row: ``sum |h + r - t|``."""
    h_emb, r_emb, t_emb = T.constant(h_emb), T.constant(r_emb), T.constant(t_emb)
    diff = h_emb + r_emb - t_emb
    return T.abs_(diff).sum(axis=-1)


def hinge_loss(pos_energy, neg_energy, margin: float) -> Tensor:
    """Mean of ``max(0, margin + E(pos) - E(neg))`` over aligned pairs."""
    pos_energy, neg_energy = T.constant(pos_energy), T.constant(neg_energy)
    if pos_energy.shape != neg_energy.shape:
        raise ValueError(f"misaligned batches: {pos_energy.shape} vs {neg_energy.shape}")
    return T.relu(margin + pos_energy - neg_energy).mean()


def _batch_energy(emb: Tensor, rel: Tensor, triples: np.ndarray) -> Tensor:
    return energy(T.take(emb, triples[:, 0]), T.take(rel, triples[:, 1]), T.take(emb, triples[:, 2]))


@dataclass
class PretrainResult:
    features: ModalityFeatures
    losses: list[float]
    initial_loss: float


def pretrain(
    train: np.ndarray,
    num_entities: int,
    num_relations: int,
    config: GatConfig | None = None,
    out_path: str | Path | None = None,
) -> PretrainResult:
    """Train the encoder on ``train`` triples and export frozen entity features.

    ``losses`` holds the mean hinge loss of each epoch; ``initial_loss`` is the
    loss of the untrained encoder on the first sampled negatives.
    """
    config = config or GatConfig()
    rng = np.random.default_rng(config.seed)
    train = np.asarray(train, dtype=np.int64).reshape(-1, 3)
    graph = Graph.from_triples(train, num_entities)
    params = T.parameters(*zip(*init_params(num_entities, num_relations, config, rng).items()))
    opt = T.Adam(lr=config.lr)

    def step_loss(p, pos, neg):
        emb = gat_forward(graph, p, config)
        return hinge_loss(_batch_energy(emb, p["rel"], pos), _batch_energy(emb, p["rel"], neg), config.margin)

    initial_loss = float("nan")
    if len(train):
        probe_neg = corrupt_triples(train, num_entities, np.random.default_rng(config.seed + 1))
        initial_loss = float(step_loss(params, train, probe_neg).data)

    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for start in range(0, len(train), config.batch_size):
            pos = train[order[start : start + config.batch_size]]
            neg = corrupt_triples(pos, num_entities, rng)
            with Tape() as tape:
                loss = step_loss(params, pos, neg)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"hinge loss became {loss.data} at epoch {epoch}, batch starting {start}")
            grads = tape.backward(loss)
            params = opt.step(params, {n: grads[p] for n, p in params.items()})
            total += float(loss.data) * len(pos)
            seen += len(pos)
        losses.append(total / max(seen, 1))
        logger.info("gat epoch %d hinge %.5f", epoch + 1, losses[-1])

    emb = gat_forward(graph, params, config).data.copy()
    features = ModalityFeatures("structural", emb)
    if out_path is not None:
        write_feature_file(out_path, emb)
    return PretrainResult(features, losses, initial_loss)
