"""Model zoo behind one interface (see :mod:`tmhmc.models.base`)."""

from tmhmc.models.base import (
    Dataset,
    GaussSummary,
    StateSpaceModel,
    joint_derivs,
    log_joint,
    log_meas,
    log_state,
    measurement_summary,
    n_obs,
    prior_gauss_summary,
    simulate,
    transform_logjac,
)
from tmhmc.models.cev import CEVModel
from tmhmc.models.gamma import GammaModel
from tmhmc.models.lingauss import LinGaussModel, kalman_loglik, kalman_smoother
from tmhmc.models.sv import SVModel
from tmhmc.models.wishart import WishartData, WishartModel

MODELS = {
    "sv": SVModel,
    "gamma": GammaModel,
    "cev": CEVModel,
    "wishart": WishartModel,
    "lingauss": LinGaussModel,
}


def get_model(name, **kwargs):
    """Instantiate a model by name; ``wishart`` accepts ``r``."""
    try:
        cls = MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(**kwargs)


__all__ = [
    "CEVModel",
    "Dataset",
    "GammaModel",
    "GaussSummary",
    "LinGaussModel",
    "MODELS",
    "SVModel",
    "StateSpaceModel",
    "WishartData",
    "WishartModel",
    "get_model",
    "joint_derivs",
    "kalman_loglik",
    "kalman_smoother",
    "log_joint",
    "log_meas",
    "log_state",
    "measurement_summary",
    "n_obs",
    "prior_gauss_summary",
    "simulate",
    "transform_logjac",
]
