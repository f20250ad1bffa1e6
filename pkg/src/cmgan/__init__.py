"""Cross-modal GAN common-representation learning.

Image and text feature vectors are mapped by two generative pathways into a
shared space, trained adversarially against intra- and inter-modality
discriminators, and evaluated with cosine-similarity retrieval MAP.
"""

from .data import FeatureDataset, SynthSpec, generate_synthetic, load_features, split
from .eval import RetrievalReport, evaluate
from .model import CmGanModel, ModelDims, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "CmGanModel", "FeatureDataset", "ModelDims", "RetrievalReport", "SynthSpec",
    "TrainConfig", "TrainLog", "evaluate", "generate_synthetic", "load_checkpoint",
    "load_features", "save_checkpoint", "split", "train",
]
