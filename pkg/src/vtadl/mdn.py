"""Gaussian mixture density head over encoded patch features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .model import EncodedPatches, linear
from .tensor import ShapeError, Tensor

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class MixtureParams:
    """Per-patch diagonal-covariance mixture parameters.

    ``log_weights`` is ``[..., N, K]``; ``means`` and ``scales`` are ``[..., N, K, d]``.
    """

    log_weights: Tensor
    means: Tensor
    scales: Tensor

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights.data)

    @property
    def num_components(self) -> int:
        return self.log_weights.shape[-1]

    def validate(self) -> None:
        # NaN is left to the caller's finiteness checks
        if np.any(self.scales.data <= 0):
            raise ValueError("mixture scales must be strictly positive")


class MixtureHead:
    """Three linear heads shared across patch positions: weight logits, means, scales."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.Generator(np.random.Philox(rng))
        dt = np.dtype(config.dtype)
        self.config = config
        D, K, d = config.embed_dim, config.mixture_components, config.density_dim
        bound = 1.0 / math.sqrt(D)

        def u(shape):
            return rng.uniform(-bound, bound, size=shape).astype(dt)

        p = {
            "mdn.pi.W": u((D, K)), "mdn.pi.b": np.zeros(K, dt),
            "mdn.mu.W": u((D, K * d)), "mdn.mu.b": np.zeros(K * d, dt),
            "mdn.sigma.W": u((D, K * d)), "mdn.sigma.b": np.zeros(K * d, dt),
        }
        if config.mdn_dim:
            p["mdn.reduce.W"] = u((D, d))
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def target(self, features: Tensor) -> Tensor:
        """Density target: the features themselves, or their learned reduction."""
        if "mdn.reduce.W" in self.params:
            return T.matmul(features, self.params["mdn.reduce.W"])
        return features

    def predict_params(self, encoded: EncodedPatches | Tensor) -> MixtureParams:
        x = encoded.features if isinstance(encoded, EncodedPatches) else encoded
        D = self.config.embed_dim
        if x.shape[-1] != D:
            raise ShapeError(f"feature dimension {x.shape[-1]} does not match head input {D}")
        K, d = self.config.mixture_components, self.config.density_dim
        p = self.params
        log_w = T.log_softmax(linear(x, p["mdn.pi.W"], p["mdn.pi.b"]), axis=-1)
        mu = linear(x, p["mdn.mu.W"], p["mdn.mu.b"]).reshape(*x.shape[:-1], K, d)
        pre = linear(x, p["mdn.sigma.W"], p["mdn.sigma.b"]).reshape(*x.shape[:-1], K, d)
        sigma = T.activation("softplus", pre, beta=1.0) + self.config.sigma_floor
        return MixtureParams(log_w, mu, sigma)


def nll(params: MixtureParams, y: Tensor) -> tuple[Tensor, Tensor]:
    """Per-patch negative log-likelihood and its mean over all patches."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    if y.shape != params.means.shape[:-2] + params.means.shape[-1:]:
        raise ShapeError(f"target {y.shape} does not conform to means {params.means.shape}")
    params.validate()
    sigma = params.scales
    diff = (y.reshape(*y.shape[:-1], 1, y.shape[-1]) - params.means) / sigma
    comp = (T.log(sigma) + diff * diff * 0.5).sum(axis=-1) * -1.0 - y.shape[-1] * _HALF_LOG_2PI
    per_patch = -T.logsumexp(params.log_weights + comp, axis=-1)
    return per_patch, per_patch.mean()


def perturb_features(encoded: EncodedPatches, noise_std: float, rng: np.random.Generator | None,
                     training: bool = True) -> EncodedPatches:
    """Add i.i.d. zero-mean Gaussian noise to every feature entry (training only)."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if not training or noise_std == 0:
        return encoded
    if rng is None:
        raise ValueError("training-mode noise needs a random generator")
    f = encoded.features
    noise = rng.standard_normal(f.shape).astype(f.dtype) * f.dtype.type(noise_std)
    return EncodedPatches(f + noise, encoded.grid_rows, encoded.grid_cols)
