"""Projection head and redundancy-reduction loss between two embedding streams.

The projection maps CLS representations through linear -> 1-D batch norm ->
ReLU -> linear into a low-dimensional space. The loss drives the column
cross-correlation matrix of the clean and perturbed embeddings toward the
identity: diagonal entries toward 1 (invariance) and off-diagonal entries
toward 0 (redundancy reduction), weighted by ``beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore
from .errors import ConfigError, ContractError, ShapeError
from .numcore import BatchNormState, Tensor

DEFAULT_BETA = 0.005  # redundancy-reduction trade-off default


@dataclass(frozen=True)
class ProjectionConfig:
    in_dim: int
    hidden_dim: int = 1024
    out_dim: int = 300

    def __post_init__(self):
        if min(self.in_dim, self.hidden_dim, self.out_dim) <= 0:
            raise ConfigError(f"projection dims must be positive, got {self}")


@dataclass
class ProjectionParams:
    config: ProjectionConfig
    linear1_w: Tensor
    linear1_b: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    linear2_w: Tensor
    linear2_b: Tensor
    bn_state: BatchNormState

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "projection.linear1.weight": self.linear1_w,
            "projection.linear1.bias": self.linear1_b,
            "projection.bn.gamma": self.bn_gamma,
            "projection.bn.beta": self.bn_beta,
            "projection.linear2.weight": self.linear2_w,
            "projection.linear2.bias": self.linear2_b,
        }


def init_projection(cfg: ProjectionConfig, seed: int) -> ProjectionParams:
    rng = np.random.default_rng(seed)

    def glorot(shape):
        limit = math.sqrt(6.0 / (shape[0] + shape[-1]))
        return Tensor(rng.uniform(-limit, limit, size=shape).astype(np.float32), requires_grad=True)

    return ProjectionParams(
        config=cfg,
        linear1_w=glorot((cfg.in_dim, cfg.hidden_dim)),
        linear1_b=Tensor(np.zeros(cfg.hidden_dim, dtype=np.float32), requires_grad=True),
        bn_gamma=Tensor(np.ones(cfg.hidden_dim, dtype=np.float32), requires_grad=True),
        bn_beta=Tensor(np.zeros(cfg.hidden_dim, dtype=np.float32), requires_grad=True),
        linear2_w=glorot((cfg.hidden_dim, cfg.out_dim)),
        linear2_b=Tensor(np.zeros(cfg.out_dim, dtype=np.float32), requires_grad=True),
        bn_state=BatchNormState(cfg.hidden_dim),
    )


def project(proj: ProjectionParams, cls: Tensor, training: bool = True) -> Tensor:
    """linear -> batchnorm -> ReLU -> linear; needs batch size >= 2 in training."""
    h = numcore.add(numcore.matmul(cls, proj.linear1_w), proj.linear1_b)
    h = numcore.batchnorm1d(h, proj.bn_gamma, proj.bn_beta, state=proj.bn_state, training=training)
    h = numcore.relu(h)
    return numcore.add(numcore.matmul(h, proj.linear2_w), proj.linear2_b)


def cross_correlation(clean: Tensor, perturbed: Tensor, centering: bool = False) -> Tensor:
    """Column cross-correlation matrix between the two embedding batches.

    Follows the un-centered form by default (no column mean subtraction);
    ``centering=True`` subtracts per-column means first, matching the
    original redundancy-reduction formulation. Zero-norm columns yield
    entries of 0 rather than a division by zero.
    """
    if clean.shape != perturbed.shape:
        raise ShapeError(f"embedding shapes disagree: {clean.shape} vs {perturbed.shape}")
    if clean.data.ndim != 2 or clean.shape[0] < 2:
        raise ContractError(f"cross_correlation needs a [batch >= 2, dim] input, got shape {clean.shape}")
    if centering:
        clean = _center_columns(clean)
        perturbed = _center_columns(perturbed)
    return numcore.column_correlation(clean, perturbed)


def _center_columns(e: Tensor) -> Tensor:
    n, d = e.shape
    ones_row = Tensor(np.full((1, n), 1.0 / n), dtype=e.dtype)
    mean = numcore.reshape(numcore.matmul(ones_row, e), (d,))
    return numcore.sub(e, mean)


def bt_loss(corr: Tensor, beta: float = DEFAULT_BETA) -> Tensor:
    """Invariance + beta * redundancy penalty of a correlation matrix.

    sum_i (1 - A_ii)^2 + beta * sum_{i != j} A_ij^2, as a scalar tensor.
    """
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    diag = numcore.diag_part(corr)
    residual = 1.0 - diag
    invariance = numcore.tsum(numcore.mul(residual, residual))
    total_sq = numcore.tsum(numcore.mul(corr, corr))
    diag_sq = numcore.tsum(numcore.mul(diag, diag))
    off_diag = numcore.sub(total_sq, diag_sq)
    return numcore.add(invariance, numcore.affine(off_diag, beta, 0.0))
