"""Per-sample consistency signals: SRDF agreement and photometric agreement.

Both signals are products over the cameras of a group of
``exp(-residual**2 / sigma) + gamma``. Cameras that cannot observe a sample
(behind, out of view, or a lookup touching background) contribute the bare
``gamma`` factor and no gradient.

Batched functions take arrays shaped ``(samples, cameras, ...)`` plus a
boolean validity array ``(samples, cameras)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class ConfigError(ValueError):
    pass


class NoVisibility(ValueError):
    """No camera of the group observes the sample."""


@dataclass(frozen=True)
class ConsistencyParams:
    sigma_d: float = 0.01
    sigma_c: float = 0.02
    gamma_srdf: float = 0.05
    gamma_phi: float = 0.05
    even_median: str = "lower"

    def __post_init__(self):
        if not self.sigma_d > 0:
            raise ConfigError("sigma_d must be > 0")
        if not self.sigma_c > 0:
            raise ConfigError("sigma_c must be > 0")
        for name in ("gamma_srdf", "gamma_phi"):
            g = getattr(self, name)
            if not 0 < g < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.even_median not in ("lower", "average"):
            raise ConfigError("even_median must be 'lower' or 'average'")

    def with_sigma_d(self, sigma_d: float) -> ConsistencyParams:
        return ConsistencyParams(sigma_d, self.sigma_c, self.gamma_srdf, self.gamma_phi, self.even_median)


@dataclass
class PerSampleEvaluation:
    c_srdf: float
    c_phi: float
    srdf: np.ndarray
    valid: np.ndarray
    partials: np.ndarray


# -- SRDF consistency -----------------------------------------------------------


def c_srdf_batch(s: np.ndarray, valid: np.ndarray, sigma_d: float, gamma: float):
    """Batched SRDF consistency and its partials w.r.t. each camera's SRDF.

    Returns ``(value (N,), partials (N, n))``.
    """
    s = np.where(valid, s, 0.0)
    kernel = np.exp(-(s * s) / sigma_d)
    factors = np.where(valid, kernel + gamma, gamma)
    value = np.prod(factors, axis=1)
    # factors >= gamma > 0, so dividing out one factor is safe
    partials = np.where(valid, (value[:, None] / factors) * (-2.0 * s / sigma_d) * kernel, 0.0)
    return value, partials


def c_srdf(srdf_values, params: ConsistencyParams, valid=None):
    """SRDF consistency of one sample.

    Args:
        srdf_values: signed ray distance per camera of the group; NaN marks
            an occluded camera unless ``valid`` is given.
        params: consistency hyper-parameters.
        valid: optional per-camera validity flags.

    Returns:
        ``(value, partials)`` with one partial per camera (0 for invalid ones).
    """
    s = np.asarray(srdf_values, dtype=np.float64).reshape(1, -1)
    v = np.isfinite(s) if valid is None else np.asarray(valid, dtype=bool).reshape(1, -1) & np.isfinite(s)
    if not v.any():
        raise NoVisibility("no camera observes the sample")
    value, partials = c_srdf_batch(s, v, params.sigma_d, params.gamma_srdf)
    return float(value[0]), partials[0]


# -- photometric consistency ----------------------------------------------------


def median_colors(colors: np.ndarray, valid: np.ndarray, even: str = "lower") -> np.ndarray:
    """Channel-wise median over the valid cameras of each sample.

    With an even number of valid cameras, ``even="lower"`` picks the lower of
    the two middle values (an observed color), ``"average"`` their mean.
    """
    filled = np.where(valid[..., None], colors, np.inf)
    ordered = np.sort(filled, axis=1)
    count = valid.sum(axis=1)
    lo = np.maximum(count - 1, 0) // 2
    rows = np.arange(len(colors))
    med = ordered[rows, lo]
    if even == "average":
        hi = np.maximum(count, 1) // 2
        upper = ordered[rows, np.minimum(hi, colors.shape[1] - 1)]
        med = np.where((count % 2 == 0)[:, None], 0.5 * (med + upper), med)
    return med


def median_color(colors, even: str = "lower") -> np.ndarray:
    c = np.asarray(colors, dtype=np.float64)
    if c.ndim == 1:
        c = c[:, None]
    if len(c) == 0:
        raise NoVisibility("no colors")
    return median_colors(c[None], np.ones((1, len(c)), dtype=bool), even)[0]


def c_phi_median_batch(colors: np.ndarray, valid: np.ndarray, params: ConsistencyParams) -> np.ndarray:
    """Median-based photo-consistency for ``(N, n, 3)`` colors."""
    med = median_colors(colors, valid, params.even_median)
    resid = np.where(valid[..., None], colors - med[:, None], 0.0)
    kernel = np.exp(-np.sum(resid * resid, axis=-1) / params.sigma_c)
    return np.prod(np.where(valid, kernel + params.gamma_phi, params.gamma_phi), axis=1)


def c_phi_baseline(colors, params: ConsistencyParams, valid=None) -> float:
    c = np.asarray(colors, dtype=np.float64)
    v = np.ones(len(c), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not v.any():
        raise NoVisibility("no camera observes the sample")
    return float(c_phi_median_batch(c[None], v[None], params)[0])


# -- pluggable priors -----------------------------------------------------------

PhotoPrior = Callable[[np.ndarray, np.ndarray, ConsistencyParams], np.ndarray]

_PRIORS: dict[str, PhotoPrior] = {"median-baseline": c_phi_median_batch}


def register_prior(name: str, fn: PhotoPrior) -> None:
    """Make ``fn(colors (N,n,3), valid (N,n), params) -> scores (N,)`` selectable by name."""
    _PRIORS[name] = fn


def get_prior(name: str) -> PhotoPrior:
    try:
        return _PRIORS[name]
    except KeyError:
        raise ConfigError(f"unknown photo-consistency prior {name!r}; available: {sorted(_PRIORS)}") from None


def available_priors() -> list[str]:
    return sorted(_PRIORS)
