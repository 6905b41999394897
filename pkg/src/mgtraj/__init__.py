"""Multi-generator adversarial trajectory forecasting with a fused spatiotemporal graph encoder."""

from mgtraj.datamodel import (
    AgentTrack,
    ModelConfig,
    PredictionSample,
    PredictionSet,
    SceneGrid,
    TrajectoryEpisode,
    validate_episode,
)

__version__ = "0.1.0"

__all__ = [
    "AgentTrack",
    "ModelConfig",
    "PredictionSample",
    "PredictionSet",
    "SceneGrid",
    "TrajectoryEpisode",
    "validate_episode",
]
