"""Two-stream detector, losses and training."""
from .losses import TripletBatch, batch_triplet_loss, bce_loss, mine_triplets, total_loss, triplet_loss
from .model import (Detector, DetectorConfig, DetectorOutput, FeatureFusionDecoder, Heads, ShapeError, l2_normalize,
                    sinusoidal_2d)
from .training import (
    Checkpoint,
    CheckpointError,
    FeatureSet,
    NumericalError,
    predict,
    synthetic_features,
    train,
)
