"""The two-stage fusion model: per-modality scorers plus a fused modality, tied
together by learned decision weights."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .fusion import MODALITY_PAIRS, contrastive_loss, fuse, project_latent
from .gat import xavier
from .scorer import SCORERS, alternate_score, bce_loss, contextual_embed, score_all
from .tensor import Tensor

CHECKPOINT_VERSION = 1

# which frozen inputs feed the model, which modalities get a scorer, and
# whether the fused modality / contrastive term exist
ABLATIONS = {
    "S+V+T": {"inputs": ("s", "v", "t"), "scorers": ("s", "v", "t", "m"), "contrastive": True},
    "S": {"inputs": ("s",), "scorers": ("s",), "contrastive": False},
    "S+V": {"inputs": ("s", "v"), "scorers": ("s", "v", "m"), "contrastive": True},
    "S+T": {"inputs": ("s", "t"), "scorers": ("s", "t", "m"), "contrastive": True},
    "no-DF": {"inputs": ("s", "v", "t"), "scorers": ("m",), "contrastive": True},
    "no-CL": {"inputs": ("s", "v", "t"), "scorers": ("s", "v", "t", "m"), "contrastive": False},
}
_ALIASES = {"full": "S+V+T", "imf": "S+V+T", "IMF": "S+V+T", "w/o MF": "S", "w/o DF": "no-DF", "w/o CL": "no-CL"}

WEIGHT_PRIORS = ("normalized", "log", "none")

# softplus(x) == 1
UNIT_WEIGHT = math.log(math.e - 1.0)


def canonical_mode(mode: str) -> str:
    mode = _ALIASES.get(mode, mode)
    if mode not in ABLATIONS:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {sorted(ABLATIONS)}")
    return mode


class CheckpointError(ValueError):
    """Checkpoint incompatible with the requested model or features."""


@dataclass
class ModelConfig:
    dim: int = 256
    rel_dim: int = 64
    mode: str = "S+V+T"
    scorer: str = "contextual"
    contrastive_weight: float = 1.0
    label_smoothing: float = 0.0
    share_relations: bool = True
    cosine_scale: float = 10.0
    weight_prior: str = "normalized"

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        if self.scorer not in SCORERS:
            raise ValueError(f"unknown scorer {self.scorer!r}; expected one of {SCORERS}")
        if self.dim < 1 or self.rel_dim < 1:
            raise ValueError("dim and rel_dim must be positive")
        if self.weight_prior not in WEIGHT_PRIORS:
            raise ValueError(f"weight_prior must be one of {WEIGHT_PRIORS}, got {self.weight_prior!r}")

    @property
    def inputs(self) -> tuple[str, ...]:
        return ABLATIONS[self.mode]["inputs"]

    @property
    def scorers(self) -> tuple[str, ...]:
        return ABLATIONS[self.mode]["scorers"]

    @property
    def fused(self) -> bool:
        return "m" in self.scorers

    @property
    def uses_contrastive(self) -> bool:
        return ABLATIONS[self.mode]["contrastive"] and self.contrastive_weight > 0


def decision_weights(raw: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Effective positive weights ``softplus(w_k)``."""
    return {k: T.softplus(w) for k, w in raw.items()}


def joint_loss(
    losses: Mapping[str, Tensor],
    contrastive: Tensor | None,
    raw_weights: Mapping[str, Tensor],
    contrastive_weight: float = 1.0,
    weight_prior: str = "none",
) -> Tensor:
    """``sum_k g_k * L_k + contrastive_weight * L_CL`` with ``g_k = softplus(w_k)``.

    Taken literally this is minimised by driving every ``g_k`` to zero, which
    starves the scorers of gradient. ``weight_prior`` selects a correction:

    * ``"none"``: the literal sum;
    * ``"normalized"``: ``g_k`` is replaced by ``K g_k / sum_j g_j`` so only the
      relative weighting is learned;
    * ``"log"``: ``-sum_k log g_k`` is added (stationary at ``g_k = 1 / L_k``).

    All three agree when every ``g_k == 1``.
    """
    if weight_prior not in WEIGHT_PRIORS:
        raise ValueError(f"weight_prior must be one of {WEIGHT_PRIORS}, got {weight_prior!r}")
    for name, value in list(losses.items()) + [("contrastive", contrastive)]:
        if value is not None and not np.all(np.isfinite(T.constant(value).data)):
            raise FloatingPointError(f"non-finite {name} loss: {T.constant(value).data}")
    gammas = {k: T.softplus(raw_weights[k]) for k in losses}
    if weight_prior == "normalized" and gammas:
        norm = None
        for g in gammas.values():
            norm = g if norm is None else norm + g
        gammas = {k: g * (len(gammas) / norm) for k, g in gammas.items()}
    total = None
    for k, loss in losses.items():
        term = gammas[k] * loss
        if weight_prior == "log":
            term = term - T.log(gammas[k])
        total = term if total is None else total + term
    if contrastive is not None and contrastive_weight:
        term = contrastive * contrastive_weight if contrastive_weight != 1.0 else T.constant(contrastive)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("joint loss needs at least one term")
    return total.reshape(())


def joint_predict(scores: Sequence[np.ndarray] | Mapping[str, np.ndarray], weights) -> np.ndarray:
    """Weighted average ``sum_k g_k y_k / sum_k g_k`` of per-modality scores.

    ``weights`` are the effective (positive) weights, aligned with ``scores``.
    """
    if isinstance(scores, Mapping):
        keys = list(scores)
        scores = [scores[k] for k in keys]
        weights = [weights[k] for k in keys] if isinstance(weights, Mapping) else weights
    arrays = [np.asarray(T.constant(s).data if isinstance(s, Tensor) else s, dtype=np.float64) for s in scores]
    gammas = np.asarray([float(T.constant(g).data) for g in weights], dtype=np.float64)
    if len(arrays) != len(gammas) or not arrays:
        raise ValueError(f"{len(arrays)} score vectors for {len(gammas)} weights")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise T.ShapeError(f"misaligned score vectors: {[a.shape for a in arrays]}")
    if np.any(gammas <= 0):
        raise ValueError("decision weights must be positive")
    total = np.zeros(shape)
    for g, a in zip(gammas, arrays):
        total += g * a
    return total / gammas.sum()


@dataclass
class Batch:
    anchors: np.ndarray
    relations: np.ndarray
    targets: np.ndarray


@dataclass
class ForwardResult:
    loss: Tensor
    losses: dict[str, Tensor]
    contrastive: Tensor | None
    scores: dict[str, Tensor] = field(default_factory=dict)


class IMFModel:
    """Parameters and forward computations.

    ``features`` maps ``"s"``, ``"v"``, ``"t"`` to frozen ``|E| x d_k`` arrays.
    Head queries address relation rows ``num_relations .. 2 * num_relations - 1``.
    """

    def __init__(
        self,
        config: ModelConfig,
        features: Mapping[str, np.ndarray],
        num_relations: int,
        params: Mapping[str, np.ndarray] | None = None,
        seed: int = 0,
    ):
        missing = [k for k in config.inputs if k not in features]
        if missing:
            raise ValueError(f"mode {config.mode} needs features for {missing}")
        self.config = config
        self.features = {k: np.asarray(features[k], dtype=np.float64) for k in config.inputs}
        self.num_entities = next(iter(self.features.values())).shape[0]
        if any(f.shape[0] != self.num_entities for f in self.features.values()):
            raise ValueError("feature matrices disagree on the number of entities")
        self.num_relations = num_relations
        shapes = self.param_shapes()
        if params is None:
            params = self._init(shapes, np.random.default_rng(seed))
        else:
            bad = {n: (np.shape(params.get(n)), s) for n, s in shapes.items() if np.shape(params.get(n)) != s}
            if bad:
                raise CheckpointError(f"parameter shapes do not match this model/features: {bad}")
        self.params = T.parameters(shapes, (params[n] for n in shapes))

    # parameters -------------------------------------------------------------

    def _relation_key(self, k: str) -> str:
        return "rel" if self.config.share_relations else f"rel_{k}"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        D, dr, R2 = c.dim, c.rel_dim, 2 * self.num_relations
        rel_width = dr if c.scorer == "contextual" else D
        shapes = {}
        for k in c.scorers:
            if k != "m":
                shapes[f"adapt_{k}"] = (self.features[k].shape[1], D)
        if c.fused:
            for k in c.inputs:
                shapes[f"proj_{k}"] = (self.features[k].shape[1], D)
                shapes[f"core_{k}"] = (D, D)
        for k in c.scorers:
            if c.scorer == "contextual":
                shapes[f"W_{k}"] = (D, D, dr)
                shapes[f"b_{k}"] = (D,)
            shapes[self._relation_key(k)] = (R2, rel_width)
        for k in c.scorers:
            shapes[f"w_{k}"] = ()
        return shapes

    def _init(self, shapes, rng) -> dict[str, np.ndarray]:
        out = {}
        for name, shape in shapes.items():
            if name.startswith("w_"):
                out[name] = np.array(UNIT_WEIGHT)
            elif name.startswith("b_"):
                # non-zero so an all-zero entity row still yields a usable context vector
                bound = 1.0 / math.sqrt(shape[0])
                out[name] = rng.uniform(-bound, bound, size=shape)
            elif name.startswith("W_"):
                D, _, dr = shape
                out[name] = xavier(rng, shape, fan_in=D * dr, fan_out=D)
            else:
                out[name] = xavier(rng, shape)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def gammas(self) -> dict[str, float]:
        return {k: float(T.softplus(self.params[f"w_{k}"]).data) for k in self.config.scorers}

    # forward ----------------------------------------------------------------

    def latents(self, params=None) -> dict[str, Tensor]:
        p = params or self.params
        return {k: project_latent(self.features[k], p[f"proj_{k}"]) for k in self.config.inputs}

    def entity_matrices(self, params=None) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        """Candidate matrices ``E_k`` for every scorer modality, plus fusion latents."""
        p = params or self.params
        mats = {k: T.matmul(self.features[k], p[f"adapt_{k}"]) for k in self.config.scorers if k != "m"}
        latents = {}
        if self.config.fused:
            latents = self.latents(p)
            mats["m"] = fuse([latents[k] for k in self.config.inputs], [p[f"core_{k}"] for k in self.config.inputs])
        return mats, latents

    def relation_rows(self, k: str, relations: np.ndarray, params=None) -> Tensor:
        p = params or self.params
        return T.take(p[self._relation_key(k)], relations)

    def contextual(self, k: str, anchors, relations, mats, params=None) -> Tensor:
        p = params or self.params
        return contextual_embed(
            T.take(mats[k], anchors), self.relation_rows(k, relations, p), p[f"W_{k}"], p[f"b_{k}"]
        )

    def modality_scores(self, k: str, anchors, relations, mats, params=None) -> Tensor:
        p = params or self.params
        if self.config.scorer == "contextual":
            return score_all(self.contextual(k, anchors, relations, mats, p), mats[k], self.config.cosine_scale)
        return alternate_score(
            self.config.scorer, T.take(mats[k], anchors), self.relation_rows(k, relations, p), mats[k]
        )

    def forward(self, batch: Batch, params=None) -> ForwardResult:
        """Joint training loss for a batch of 1-vs-all queries."""
        p = params or self.params
        c = self.config
        mats, latents = self.entity_matrices(p)
        targets = batch.targets
        if c.label_smoothing:
            targets = (1.0 - c.label_smoothing) * targets + c.label_smoothing / self.num_entities
        scores, losses = {}, {}
        for k in c.scorers:
            scores[k] = self.modality_scores(k, batch.anchors, batch.relations, mats, p)
            losses[k] = bce_loss(scores[k], targets)
        cl = None
        if c.uses_contrastive:
            rows = np.unique(batch.anchors)
            pairs = [pq for pq in MODALITY_PAIRS if pq[0] in c.inputs and pq[1] in c.inputs]
            cl = contrastive_loss({k: T.take(latents[k], rows) for k in c.inputs}, pairs)
        raw = {k: p[f"w_{k}"] for k in c.scorers}
        loss = joint_loss(losses, cl, raw, c.contrastive_weight, c.weight_prior)
        return ForwardResult(loss, losses, cl, scores)

    def predict(self, anchors, relations, mats=None, per_modality: bool = False):
        """Decision-fused scores ``B x |E|`` (no gradient tracking)."""
        if mats is None:
            mats, _ = self.entity_matrices()
        anchors = np.asarray(anchors, dtype=np.int64)
        relations = np.asarray(relations, dtype=np.int64)
        scores = {k: self.modality_scores(k, anchors, relations, mats).data for k in self.config.scorers}
        gammas = self.gammas()
        joint = joint_predict(scores, gammas)
        return (joint, scores) if per_modality else joint

    def scorer_fn(self):
        """Snapshot of the current parameters as ``(anchors, relations) -> scores``."""
        mats, _ = self.entity_matrices()
        return lambda anchors, relations: self.predict(anchors, relations, mats)

    # persistence ------------------------------------------------------------

    def save(self, path: str | Path, extra: Mapping | None = None) -> None:
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "num_relations": self.num_relations,
            "num_entities": self.num_entities,
            "feature_dims": {k: int(f.shape[1]) for k, f in self.features.items()},
            "extra": dict(extra or {}),
        }
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **self.state_dict())

    @staticmethod
    def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
        with np.load(path, allow_pickle=False) as npz:
            if "__meta__" not in npz.files:
                raise CheckpointError(f"{path}: not a model checkpoint")
            meta = json.loads(npz["__meta__"].tobytes().decode())
            params = {n: npz[n] for n in npz.files if n != "__meta__"}
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        return meta, params

    @classmethod
    def load(cls, path: str | Path, features: Mapping[str, np.ndarray]) -> "IMFModel":
        meta, params = cls.read_checkpoint(path)
        config = ModelConfig(**meta["config"])
        for k, d in meta["feature_dims"].items():
            if k not in features:
                raise CheckpointError(f"checkpoint needs {k!r} features")
            if features[k].shape[1] != d or features[k].shape[0] != meta["num_entities"]:
                raise CheckpointError(
                    f"{k!r} features have shape {features[k].shape}, checkpoint expects ({meta['num_entities']}, {d})"
                )
        return cls(config, features, meta["num_relations"], params=params)
