"""Two-stage generative downscaling: mean regression plus residual diffusion."""

__version__ = "0.1.0"

from .diffusion import (  # noqa: E402
    EnsembleForecast, GaussianOracleDenoiser, NoiseSchedule, ResidualDiffusion, heun_sample,
    resdiff_sample, score_from_denoiser, sigma_steps,
)
from .grid import ChannelSpec, Field, interp_bilinear, pool_average  # noqa: E402
from .network import NetSpec, build_network  # noqa: E402
from .optim import TrainConfig  # noqa: E402
from .preprocessing import ChannelNormalizer  # noqa: E402
from .regression import MeanRegressor, predict_mean, train_regression  # noqa: E402
from .synth import ScenarioParams, make_dataset, synth_scene  # noqa: E402

__all__ = [
    "ChannelNormalizer", "ChannelSpec", "EnsembleForecast", "Field", "GaussianOracleDenoiser",
    "MeanRegressor", "NetSpec", "NoiseSchedule", "ResidualDiffusion", "ScenarioParams",
    "TrainConfig", "build_network", "heun_sample", "interp_bilinear", "make_dataset",
    "pool_average", "predict_mean", "resdiff_sample", "score_from_denoiser", "sigma_steps",
    "synth_scene", "train_regression",
]
