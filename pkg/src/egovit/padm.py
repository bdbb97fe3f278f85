"""Phase partitioning, temporal pooling and dynamic merging of per-phase class tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, ShapeError, Tensor, as_tensor
from .numerics import tensor as tt

NORM_FLOOR = 1e-8


@dataclass
class MergeScores:
    alpha: np.ndarray  # [..., G, S] raw similarity scores
    weights: np.ndarray  # [..., G, S] softmax over G


def depth_split(total_depth: int, DR: float) -> tuple[int, int]:
    """Split ``total_depth`` blocks so that stage1/stage2 ~= DR (round half up, both >= 1)."""
    if total_depth < 2:
        raise ConfigError(f"total_depth must be >= 2, got {total_depth}")
    if DR <= 0:
        raise ConfigError(f"depth ratio must be positive, got {DR}")
    l1 = math.floor(total_depth * DR / (1.0 + DR) + 0.5)
    l1 = min(max(l1, 1), total_depth - 1)
    return l1, total_depth - l1


def partition_phases(x, G: int, axis: int = 1) -> list[Tensor]:
    """Split along the temporal axis into G consecutive equal groups."""
    x = as_tensor(x)
    T = x.shape[axis]
    if G < 1 or T % G:
        raise ShapeError(f"cannot split temporal length {T} into {G} phases")
    step = T // G
    index = [slice(None)] * x.ndim
    out = []
    for g in range(G):
        index[axis] = slice(g * step, (g + 1) * step)
        out.append(x[tuple(index)])
    return out


def temporal_pool_concat(group_tokens, axis: int = 1) -> Tensor:
    """Mean of each group over time, stacked on a new temporal axis of length G."""
    return tt.stack([tt.mean(as_tensor(g), axis=axis) for g in group_tokens], axis=axis)


def dynamic_merge(ctmaps, eps: float = NORM_FLOOR) -> tuple[Tensor, MergeScores]:
    """Weight per-phase class tokens by cross-phase cosine agreement and sum over phases.

    ``ctmaps`` is [..., G, S, D]. The score of token (g, s) is the sum over other
    phases g' and all positions s' of its cosine with (g', s'); weights are a
    softmax over g at each s. Norms are floored at ``eps``. For G = 1 every
    score is zero, so the weight is 1 and the input passes through unchanged.
    """
    x = as_tensor(ctmaps)
    norms = tt.clamp_min(tt.sqrt(tt.tsum(x * x, axis=-1, keepdims=True)), eps)
    unit = x / norms  # [..., G, S, D]
    per_phase = tt.tsum(unit, axis=-2, keepdims=True)  # [..., G, 1, D]
    total = tt.tsum(per_phase, axis=-3, keepdims=True)  # [..., 1, 1, D]
    others = total - per_phase
    alpha = tt.tsum(unit * others, axis=-1)  # [..., G, S]
    weights = tt.softmax(alpha, axis=-2)
    merged = tt.tsum(x * weights.reshape(*weights.shape, 1), axis=-3)  # [..., S, D]
    return merged, MergeScores(alpha.data.copy(), weights.data.copy())


def stage1_forward(groups, blocks, cls_tokens, backbone: str = "windowed", window_hw=(2, 2),
                   shift: bool = True, traces: list | None = None) -> tuple[list[Tensor], list[Tensor]]:
    """Run the shared stage-1 blocks on every phase.

    ``groups`` is a list of G grids [B, t, H, W, D]; ``cls_tokens`` is [B, G, D]
    (one seed token per phase). The temporal window equals the phase length t.
    Returns per-phase token grids and per-phase class-token maps.
    """
    from .backbones import class_token_map_init, run_stage, window_grid

    groups = [as_tensor(g) for g in groups]
    G = len(groups)
    B, t, H, W, D = groups[0].shape
    x = tt.stack(groups, axis=1).reshape(B * G, t, H, W, D)
    cls = as_tensor(cls_tokens).reshape(B * G, D)
    window = (t, *window_hw)
    grid_wi = window_grid((t, H, W), window) if backbone == "windowed" else (1, 1, 1)
    ctmap = class_token_map_init(cls, grid_wi)
    x, ctmap = run_stage(x, ctmap, blocks, backbone, window, shift, 0, "stage1", traces)
    x = x.reshape(B, G, t, H, W, D)
    ctmap = ctmap.reshape(B, G, *ctmap.shape[1:])
    return [x[:, g] for g in range(G)], [ctmap[:, g] for g in range(G)]


def stage2_forward(tokens, ctmap, blocks, merges=(), backbone: str = "windowed", window_hw=(2, 2),
                   shift: bool = True, start_index: int = 0, traces: list | None = None
                   ) -> tuple[Tensor, Tensor]:
    """Merge steps (patch + class-token map), then blocks whose temporal window spans the whole input."""
    from .backbones import broadcast_ctmap, class_token_map_merge, patch_merge, run_stage, window_grid

    x, ctmap = as_tensor(tokens), as_tensor(ctmap)
    for m in merges:
        x = patch_merge(x, m.patch)
        ctmap = class_token_map_merge(ctmap, m.cls)
    B, T, H, W, D = x.shape
    window = (T, *window_hw)
    if backbone == "windowed":
        ctmap = broadcast_ctmap(ctmap, window_grid((T, H, W), window))
    return run_stage(x, ctmap, blocks, backbone, window, shift, start_index, "stage2", traces)
