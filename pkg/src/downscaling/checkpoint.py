"""Save and load fitted stage models as grid containers."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .diffusion import NoiseSchedule, ResidualDiffusion
from .io import FormatError, file_sha256, read_container, write_container
from .network import Denoiser, NetSpec
from .optim import TrainConfig
from .preprocessing import ChannelNormalizer
from .regression import DataError, MeanRegressor


def _params_out(prefix: str, params: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def _params_in(prefix: str, arrays: dict) -> "OrderedDict[str, np.ndarray]":
    p = prefix + "/"
    return OrderedDict((k[len(p):], v) for k, v in arrays.items() if k.startswith(p))


def save_regressor(path, model: MeanRegressor, extra: dict | None = None) -> str:
    header = {
        "mode": "regression",
        "net_spec": model.net_.spec.to_dict(),
        "train_config": (model.config or TrainConfig()).to_dict(),
        "seed": int(model.seed),
        "x_norm": model.x_norm_.to_dict(),
        "y_norm": model.y_norm_.to_dict(),
        "fine_shape": list(model.fine_shape_),
        "cond_names": list(model.cond_names_),
        "target_names": list(model.target_names_),
        "train_seeds": model.train_seeds_,
        "n_samples_seen": int(model.n_samples_seen_),
        **(extra or {}),
    }
    arrays = _params_out("ema", model.net_.params)
    arrays["loss_curve"] = model.loss_curve_
    return write_container(path, arrays, header)


def load_regressor(path) -> MeanRegressor:
    arrays, h = read_container(path)
    if h.get("mode") != "regression":
        raise FormatError(f"{path}: not a regression checkpoint (mode={h.get('mode')!r})")
    spec = NetSpec.from_dict(h["net_spec"])
    m = MeanRegressor(spec=spec, config=TrainConfig(**h["train_config"]), seed=h["seed"],
                      sqrt_channels=tuple(h["y_norm"]["sqrt_channels"]),
                      cond_names=tuple(h["cond_names"]), target_names=tuple(h["target_names"]))
    m.x_norm_ = ChannelNormalizer.from_dict(h["x_norm"])
    m.y_norm_ = ChannelNormalizer.from_dict(h["y_norm"])
    m.fine_shape_ = tuple(h["fine_shape"])
    m.cond_names_, m.target_names_ = tuple(h["cond_names"]), tuple(h["target_names"])
    m.train_seeds_ = h["train_seeds"]
    m.n_samples_seen_ = h["n_samples_seen"]
    m.net_ = Denoiser(spec, _params_in("ema", arrays), "regression")
    m.loss_curve_ = arrays["loss_curve"].astype(np.float64)
    return m


def save_diffusion(path, model: ResidualDiffusion, reg_path=None, extra: dict | None = None) -> str:
    header = {
        "mode": "diffusion",
        "net_spec": model.net_.spec.to_dict(),
        "train_config": (model.config or TrainConfig()).to_dict(),
        "seed": int(model.seed),
        "res_mean": model.res_mean_.tolist(),
        "res_scale": model.res_scale_.tolist(),
        "train_seeds": model.train_seeds_,
        "schedule": model.schedule.to_dict() if model.schedule else None,
        "regressor_sha256": file_sha256(reg_path) if reg_path else None,
        **(extra or {}),
    }
    arrays = _params_out("ema", model.net_.params)
    arrays["loss_curve"] = model.loss_curve_
    return write_container(path, arrays, header)


def load_diffusion(path, regressor: MeanRegressor, reg_path=None) -> ResidualDiffusion:
    arrays, h = read_container(path)
    if h.get("mode") != "diffusion":
        raise FormatError(f"{path}: not a diffusion checkpoint (mode={h.get('mode')!r})")
    if reg_path is not None and h.get("regressor_sha256") not in (None, file_sha256(reg_path)):
        raise DataError(f"{path} was trained on a different regression checkpoint")
    spec = NetSpec.from_dict(h["net_spec"])
    d = ResidualDiffusion(regressor, spec=spec, config=TrainConfig(**h["train_config"]), seed=h["seed"],
                          schedule=NoiseSchedule(**h["schedule"]) if h.get("schedule") else None)
    d.res_mean_ = np.asarray(h["res_mean"], dtype=np.float64)
    d.res_scale_ = np.asarray(h["res_scale"], dtype=np.float64)
    d.train_seeds_ = h["train_seeds"]
    d.net_ = Denoiser(spec, _params_in("ema", arrays), "diffusion", sigma_data=1.0)
    d.loss_curve_ = arrays["loss_curve"].astype(np.float64)
    return d
