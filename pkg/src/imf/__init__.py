"""Interactive multimodal fusion for knowledge-graph link prediction.

Modality-specific entity features are fused with a factorised bilinear
product, regularised by a cross-modal contrastive loss, scored per modality
by relation-conditioned scorers and combined through learned decision weights.
"""

from .data import (
    AnswerIndex,
    ModalityFeatures,
    TripleStore,
    Vocab,
    build_filter,
    build_targets,
    corrupt_triples,
    load_dataset,
    load_features,
    load_triples,
)
from .evaluation import MetricsReport, evaluate, rank_one
from .fusion import contrastive_loss, fuse, project_latent
from .model import ABLATIONS, IMFModel, ModelConfig, joint_loss, joint_predict
from .scorer import alternate_score, bce_loss, contextual_embed, score_all
from .trainer import TrainConfig, TrainResult, train

__version__ = "0.1.0"
