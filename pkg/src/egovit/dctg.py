"""Dynamic class token generation from hand-object features.

Per frame the 2M detection features are reduced to one vector (masked mean, or
slot-wise self-attention followed by a masked mean), projected to the model
width, and aggregated over frames (2-layer LSTM keeping the last state, or
temporal self-attention followed by a frame mean).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DctgConfig
from .numerics import (
    LinearParams,
    LstmParams,
    MhaParams,
    Tensor,
    as_tensor,
    init_linear,
    init_lstm,
    init_mha,
    linear_forward,
    lstm_forward,
    multi_head_attention,
)
from .numerics import tensor as tt


@dataclass
class DctgParams:
    input_proj: LinearParams
    temporal: LstmParams | MhaParams
    feature_attn: MhaParams | None = None


def init_dctg(rng: np.random.Generator, cfg: DctgConfig, D: int, std: float = 0.02) -> DctgParams:
    proj = init_linear(rng, cfg.F_det, D, std)
    if cfg.inter_frame == "lstm":
        temporal = init_lstm(rng, D, D, cfg.lstm_layers, std)
    else:
        temporal = init_mha(rng, D, cfg.heads if D % cfg.heads == 0 else 1, std)
    feat = init_mha(rng, cfg.F_det, cfg.heads, std) if cfg.inter_feature == "qkv" else None
    return DctgParams(proj, temporal, feat)


def dctg_param_count(cfg: DctgConfig, D: int) -> int:
    """Closed-form scalar count of :class:`DctgParams`."""
    n = cfg.F_det * D + D
    if cfg.inter_frame == "lstm":
        n += 4 * D * (D + D + 1) + (cfg.lstm_layers - 1) * 4 * D * (2 * D + 1)
    else:
        n += 4 * (D * D + D)
    if cfg.inter_feature == "qkv":
        n += 4 * (cfg.F_det * cfg.F_det + cfg.F_det)
    return n


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    m = np.asarray(mask, dtype=np.float64)
    count = np.maximum(m.sum(axis=-1, keepdims=True), 1.0)  # all-masked frame -> zero vector
    return tt.tsum(x * m[..., None], axis=-2) / count


def inter_feature_reduce(f, mask, cfg: DctgConfig, params: DctgParams | None = None) -> Tensor:
    """[..., T, 2M, F_det] -> [..., T, F_det]."""
    f = as_tensor(f)
    mask = np.asarray(mask)
    if cfg.inter_feature == "avg":
        return _masked_mean(f, mask)
    attended, _ = multi_head_attention(f, params.feature_attn, key_mask=mask)
    return _masked_mean(attended, mask)


def inter_frame_aggregate(seq, cfg: DctgConfig, params: DctgParams) -> Tensor:
    """[..., T, D] -> [..., D]."""
    seq = as_tensor(seq)
    if cfg.inter_frame == "lstm":
        _, last = lstm_forward(seq, params.temporal)
        return last
    attended, _ = multi_head_attention(seq, params.temporal)
    return tt.mean(attended, axis=-2)


def generate_class_token(ho, mask, cfg: DctgConfig, params: DctgParams) -> Tensor:
    """Hand-object features [..., T, 2M, F_det] (+ mask [..., T, 2M]) -> class token [..., D]."""
    ho = as_tensor(ho)
    if ho.ndim < 3 or ho.shape[-2] != 2 * cfg.M or ho.shape[-1] != cfg.F_det:
        raise ValueError(f"DCTG expects [..., T, {2 * cfg.M}, {cfg.F_det}] features, got {ho.shape}")
    per_frame = inter_feature_reduce(ho, mask, cfg, params)
    return inter_frame_aggregate(linear_forward(per_frame, params.input_proj), cfg, params)
