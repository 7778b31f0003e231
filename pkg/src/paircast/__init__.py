"""Scene-centric multi-agent trajectory forecasting with agent-pair
covariance prediction.

The package trains an encoder-decoder network that, per future step
and per ego-other agent pair, outputs multimodal joint trajectories
together with a structurally positive-definite 4x4 covariance over the
pair's positions, learned with a multivariate Gaussian negative
log-likelihood and analyzed through cross-covariance dependency
scores.
"""

from .config import RunConfig, TrainingConfig, load_run_config
from .errors import (CheckpointError, ConfigError, DimensionError, NumericError,
                     PaircastError, ParseError, ValidationError)
from .interaction import (DependencyRecord, dependency_score, export_scene_plot,
                          rank_pairs, scene_dependency_records)
from .metrics import (MetricsReport, constant_velocity_baseline, evaluate_scenes,
                      min_sade, min_sfde, smr)
from .model import Forecaster, ModelConfig, PredictionOutput
from .paircov import (CovParams, GaussianMixture, PairCovariance, build_sigma,
                      density, marginal_blocks, mgnll, mixture_combine, sample)
from .scenedata import (SceneSample, SynthConfig, Track, TrackPoint, load_tracks,
                        synth_roundabout, synth_roundabout_labeled, window_scenes)
from .scenegraph import RoadGraph, SceneGraph, attach_agents, build_road_graph

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "CovParams", "DependencyRecord",
    "DimensionError", "Forecaster", "GaussianMixture", "MetricsReport",
    "ModelConfig", "NumericError", "PairCovariance", "PaircastError",
    "ParseError", "PredictionOutput", "RoadGraph", "RunConfig", "SceneGraph",
    "SceneSample", "SynthConfig", "Track", "TrackPoint", "TrainingConfig",
    "ValidationError", "attach_agents", "build_road_graph", "build_sigma",
    "constant_velocity_baseline", "density", "dependency_score",
    "evaluate_scenes", "export_scene_plot", "load_run_config", "load_tracks",
    "marginal_blocks", "mgnll", "min_sade", "min_sfde", "mixture_combine",
    "rank_pairs", "sample", "scene_dependency_records", "smr",
    "synth_roundabout", "synth_roundabout_labeled", "window_scenes",
]
