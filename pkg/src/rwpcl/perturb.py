"""Random weighted perturbation of named parameter tensors.

Each included tensor w gets element-wise Gaussian noise whose standard
deviation scales with the tensor's own L2 norm: sigma = epsilon * ||w||_2.
Tensors with larger norms therefore receive proportionally stronger noise.
The alternative reading of the scale as a variance is available via
``noise_scale="variance"`` (sigma = sqrt(epsilon * ||w||_2)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fnmatch import fnmatch

import numpy as np

from .errors import ConfigError
from .numcore import Tensor


@dataclass(frozen=True)
class PerturbationConfig:
    epsilon: float
    seed: int
    include: tuple = ("*",)  # name patterns; everything by default
    noise_scale: str = "std"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.noise_scale not in ("std", "variance"):
            raise ConfigError(f"noise_scale must be 'std' or 'variance', got {self.noise_scale!r}")


@dataclass
class PerturbedParams:
    """Shifted copies of a parameter set plus the noise provenance."""

    tensors: dict[str, Tensor]
    seed: int
    epsilon: float
    noise_scale: str = "std"
    sigmas: dict[str, float] = field(default_factory=dict)


def tensor_l2_norm(t: Tensor) -> float:
    """Frobenius norm over all elements, accumulated in float64."""
    return float(np.sqrt(np.sum(t.data.astype(np.float64) ** 2)))


def noise_sigma(t: Tensor, cfg: PerturbationConfig) -> float:
    """Noise standard deviation configured for one tensor."""
    scale = cfg.epsilon * tensor_l2_norm(t)
    return float(np.sqrt(scale)) if cfg.noise_scale == "variance" else scale


def _included(name: str, cfg: PerturbationConfig) -> bool:
    return any(fnmatch(name, pat) for pat in cfg.include)


def perturb(params: dict[str, Tensor], cfg: PerturbationConfig) -> PerturbedParams:
    """Return noise-shifted copies of ``params``; the source is left untouched.

    Deterministic under (params, cfg): tensors are visited in sorted name
    order and noise is drawn from one generator seeded with ``cfg.seed``.
    With epsilon == 0 the copies are bit-identical to the source.
    """
    rng = np.random.default_rng(cfg.seed)
    out: dict[str, Tensor] = {}
    sigmas: dict[str, float] = {}
    for name in sorted(params):
        src = params[name]
        if cfg.epsilon > 0 and _included(name, cfg):
            sigma = noise_sigma(src, cfg)
            sigmas[name] = sigma
            # draw in float64 so the stream is identical under replay at
            # either precision, then cast to the tensor's dtype
            noise = rng.standard_normal(src.shape) * sigma
            data = (src.data + noise).astype(src.dtype)
        else:
            data = src.data.copy()
        out[name] = Tensor(data, requires_grad=False, name=name, dtype=src.dtype)
    return PerturbedParams(tensors=out, seed=cfg.seed, epsilon=cfg.epsilon,
                           noise_scale=cfg.noise_scale, sigmas=sigmas)
