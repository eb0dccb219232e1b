"""
losses.py - 探索・学習の損失関数

- mixge: 位相再構成損失（画像 MSE + 空間勾配 MSE）
- binary_loss: 接続重みを 0/1 に押しやるエントロピー損失
- sparsity_loss: 接続重みの平均（大域的な疎性制約）
- synthesized_loss: mixge + α·binary + β·sparsity
"""

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


logger = logging.getLogger(__name__)


@dataclass
class LossConfig:
    """損失の比率（alpha: 二値化、beta: 疎性、mixge_lambda: 勾配項）"""
    alpha: float = 0.005
    beta: float = 0.0005
    mixge_lambda: float = 1.0
    clamp_eps: float = 1e-7

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss ratios must be ≥ 0, got alpha={self.alpha} beta={self.beta}")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ConfigError(f"clamp_eps must lie in (0, 0.5), got {self.clamp_eps}")
        if self.mixge_lambda < 0:
            raise ConfigError(f"mixge_lambda must be ≥ 0, got {self.mixge_lambda}")

    @classmethod
    def from_dict(cls, d: Mapping) -> 'LossConfig':
        cfg = cls(**{k: float(d[k]) for k in ('alpha', 'beta', 'mixge_lambda', 'clamp_eps') if k in d})
        cfg.validate()
        return cfg


Weights = Union[Tensor, Sequence]


def _as_row(weights: Weights) -> Tensor:
    if isinstance(weights, Tensor):
        return weights
    return T.stack_scalars(list(weights))


def mixge(pred: Tensor, gt: Tensor, lam: float = 1.0) -> Tensor:
    """
    Mixed Gradient Error

    MSE(pred, gt) + λ·[MSE(∂x pred, ∂x gt) + MSE(∂y pred, ∂y gt)]
    空間勾配は前進差分。
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"mixge: prediction shape {pred.shape} does not match ground truth {gt.shape}")
    err = pred - gt
    loss = T.mean(T.square(err))
    if lam == 0.0:
        return loss
    grad_term = (T.mean(T.square(T.spatial_diff(err, 'x')))
                 + T.mean(T.square(T.spatial_diff(err, 'y'))))
    return loss + lam * grad_term


def binary_loss(weights: Weights, eps: float = 1e-7) -> Tensor:
    """
    mean( −w·log w − (1−w)·log(1−w) )、w は [ε, 1−ε] に切り詰める

    Args:
        weights: スカラーテンソル（または実数）の列、もしくは [1,1,1,K] テンソル
        eps: 切り詰め幅
    """
    w = T.clamp(_as_row(weights), eps, 1.0 - eps)
    entropy = T.mul(w, T.log(w)) + T.mul(1.0 - w, T.log(1.0 - w))
    return -T.mean(entropy)


def sparsity_loss(weights: Weights) -> Tensor:
    """全接続重みの平均"""
    return T.mean(_as_row(weights))


def synthesized_loss(pred: Tensor, gt: Tensor, weights: Weights, cfg: LossConfig) -> Tensor:
    """Loss_* = mixge + α·binary_loss + β·sparsity_loss"""
    return add_weight_terms(mixge(pred, gt, cfg.mixge_lambda), weights, cfg)


def add_weight_terms(recon: Tensor, weights: Weights, cfg: LossConfig) -> Tensor:
    """計算済みの再構成損失に α·binary_loss + β·sparsity_loss を加える"""
    row = _as_row(weights)
    total = recon + cfg.alpha * binary_loss(row, cfg.clamp_eps)
    return total + cfg.beta * sparsity_loss(row)
