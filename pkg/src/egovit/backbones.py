"""Patch embedding, global class-token blocks and windowed blocks with a class-token map.

Informative tokens are carried as grids ``[B, T, H, W, D]``; a class-token map is
``[B, T_wi, H_wi, W_wi, D]`` with one token per attention window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ConfigError,
    LayerNormParams,
    LinearParams,
    MhaParams,
    MlpParams,
    ShapeError,
    Tensor,
    as_tensor,
    init_layer_norm,
    init_linear,
    init_mha,
    init_mlp,
    layer_norm,
    linear_forward,
    mlp_forward,
    multi_head_attention,
    parameter,
    trunc_normal,
)
from .numerics import tensor as tt


@dataclass
class EmbeddingParams:
    patch_proj: LinearParams  # [(P_T*P_H*P_W*C) -> D]
    x_pos: Tensor  # [H_P, W_P, D]
    x_temp: Tensor  # [T_P, D]


@dataclass
class BlockParams:
    ln1: LayerNormParams
    attn: MhaParams
    ln2: LayerNormParams
    mlp: MlpParams


@dataclass
class BlockTrace:
    """Detached attention of one block; ``cls_grid`` holds head-averaged class-token
    query weights over informative tokens laid out on the token grid [B, T, H, W]."""

    stage: str
    index: int
    attn: np.ndarray
    cls_grid: np.ndarray


def init_embedding(rng, patch: tuple[int, int, int], C: int, grid: tuple[int, int, int], D: int,
                   std: float = 0.02) -> EmbeddingParams:
    pt, ph, pw = patch
    tp, hp, wp = grid
    return EmbeddingParams(init_linear(rng, pt * ph * pw * C, D, std),
                           parameter(trunc_normal(rng, (hp, wp, D), std)),
                           parameter(trunc_normal(rng, (tp, D), std)))


def init_block(rng, D: int, heads: int, mlp_ratio: int, std: float = 0.02) -> BlockParams:
    return BlockParams(init_layer_norm(D), init_mha(rng, D, heads, std), init_layer_norm(D),
                       init_mlp(rng, D, mlp_ratio * D, std))


def block_param_count(D: int, mlp_ratio: int) -> int:
    hidden = mlp_ratio * D
    return 4 * D + 4 * (D * D + D) + (D * hidden + hidden) + (hidden * D + D)


# ------------------------------------------------------------------ embeddings

def patchify(clip: np.ndarray, patch: tuple[int, int, int]) -> np.ndarray:
    """[..., T, H, W, C] -> [..., T_P, H_P, W_P, P_T*P_H*P_W*C] (non-overlapping patches)."""
    clip = np.asarray(clip, dtype=np.float64)
    *lead, T, H, W, C = clip.shape
    pt, ph, pw = patch
    if T % pt or H % ph or W % pw:
        raise ConfigError(f"patch embedding: clip {T}x{H}x{W} not divisible by patch {pt}x{ph}x{pw}")
    nl = len(lead)
    x = clip.reshape(*lead, T // pt, pt, H // ph, ph, W // pw, pw, C)
    perm = list(range(nl)) + [nl + i for i in (0, 2, 4, 1, 3, 5, 6)]
    x = x.transpose(perm)
    return x.reshape(*lead, T // pt, H // ph, W // pw, pt * ph * pw * C)


def patch_embed(clip, patch: tuple[int, int, int], params: EmbeddingParams) -> Tensor:
    return linear_forward(Tensor(patchify(clip, patch)), params.patch_proj)


def add_embeddings(xhat, params: EmbeddingParams) -> Tensor:
    """x[t, a, b] + x_temp[t] + x_pos[a, b]."""
    xhat = as_tensor(xhat)
    tp, hp, wp = xhat.shape[-4:-1]
    if params.x_temp.shape[0] != tp or params.x_pos.shape[:2] != (hp, wp):
        raise ShapeError(f"embedding tables {params.x_temp.shape}/{params.x_pos.shape} "
                         f"do not match grid {(tp, hp, wp)}")
    temp = params.x_temp.reshape(tp, 1, 1, xhat.shape[-1])
    return xhat + temp + params.x_pos


# --------------------------------------------------------------- global blocks

def transformer_block(x, p: BlockParams) -> tuple[Tensor, Tensor]:
    """Pre-norm block over [..., N, D]: x + MSA(LN x), then + MLP(LN .)."""
    x = as_tensor(x)
    a, attn = multi_head_attention(layer_norm(x, p.ln1), p.attn)
    x = x + a
    x = x + mlp_forward(layer_norm(x, p.ln2), p.mlp)
    return x, attn


def global_block_forward(tokens, p: BlockParams) -> tuple[Tensor, Tensor]:
    """Joint attention over ``[cls, patches...]`` ([..., 1+N, D]); row 0 is the class token."""
    return transformer_block(tokens, p)


def global_cls_grid(attn: np.ndarray, grid: tuple[int, int, int]) -> np.ndarray:
    """Head-averaged class-token query weights on informative tokens -> [..., T, H, W]."""
    row = attn[..., 0, 1:].mean(axis=-2)
    return row.reshape(*row.shape[:-1], *grid)


# ------------------------------------------------------------- window plumbing

def _shift_amounts(grid, window, shift: bool) -> tuple[int, ...]:
    if not shift:
        return (0, 0, 0)
    return tuple(w // 2 if w < g else 0 for g, w in zip(grid, window))


def window_partition(x, window: tuple[int, int, int], shift: bool = False) -> Tensor:
    """[B, T, H, W, D] -> [B, nW, wt*wh*ww, D]; windows ordered row-major over (T, H, W).

    With ``shift`` the grid is cyclically rolled by -window//2 (along axes where the
    window is smaller than the grid) before partitioning.
    """
    x = as_tensor(x)
    B, T, H, W, D = x.shape
    wt, wh, ww = window
    if T % wt or H % wh or W % ww:
        raise ShapeError(f"grid {(T, H, W)} not divisible by window {window}")
    sh = _shift_amounts((T, H, W), window, shift)
    if any(sh):
        x = tt.roll(x, tuple(-s for s in sh), (1, 2, 3))
    x = x.reshape(B, T // wt, wt, H // wh, wh, W // ww, ww, D)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(B, (T // wt) * (H // wh) * (W // ww), wt * wh * ww, D)


def window_reverse(windows, grid: tuple[int, int, int], window: tuple[int, int, int], shift: bool = False) -> Tensor:
    """Inverse of :func:`window_partition`."""
    windows = as_tensor(windows)
    B, _, _, D = windows.shape
    T, H, W = grid
    wt, wh, ww = window
    x = windows.reshape(B, T // wt, H // wh, W // ww, wt, wh, ww, D)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6, 7).reshape(B, T, H, W, D)
    sh = _shift_amounts(grid, window, shift)
    if any(sh):
        x = tt.roll(x, sh, (1, 2, 3))
    return x


def window_grid(grid, window) -> tuple[int, int, int]:
    return tuple(g // w for g, w in zip(grid, window))


def class_token_map_init(x_cls, grid_wi: tuple[int, int, int]) -> Tensor:
    """Copy one class token (or a batch [B, D]) into every window slot -> [B, T_wi, H_wi, W_wi, D]."""
    x_cls = as_tensor(x_cls)
    if x_cls.ndim == 1:
        x_cls = x_cls.reshape(1, x_cls.shape[0])
    B, D = x_cls.shape
    return tt.broadcast_to(x_cls.reshape(B, 1, 1, 1, D), (B, *grid_wi, D))


def windowed_block(x, ctmap, p: BlockParams, window: tuple[int, int, int], shift: bool = False
                   ) -> tuple[Tensor, Tensor, Tensor]:
    """One (S)W-MSA + MLP block on a grid with a per-window class token.

    Window i's class token is prepended to its tokens, giving (1 + wt*wh*ww) tokens
    per attention call; the class token stays bound to window index i under a shift.
    Returns ``(x', ctmap', attn [B, nW, h, 1+n, 1+n])``.
    """
    x, ctmap = as_tensor(x), as_tensor(ctmap)
    B, T, H, W, D = x.shape
    grid_wi = window_grid((T, H, W), window)
    if tuple(ctmap.shape[1:4]) != grid_wi or ctmap.shape[0] != B or ctmap.shape[-1] != D:
        raise ShapeError(f"class-token map {ctmap.shape} does not match window grid {grid_wi} (B={B}, D={D})")
    wins = window_partition(x, window, shift)
    nW, n = wins.shape[1], wins.shape[2]
    cls = ctmap.reshape(B, nW, 1, D)
    seq = tt.concat([cls, wins], axis=2)
    seq, attn = transformer_block(seq, p)
    new_cls = seq[:, :, 0, :].reshape(B, *grid_wi, D)
    new_x = window_reverse(seq[:, :, 1:, :], (T, H, W), window, shift)
    return new_x, new_cls, attn


def windowed_cls_grid(attn: np.ndarray, grid, window, shift: bool) -> np.ndarray:
    """Scatter each window's class-token query weights back onto the token grid -> [B, T, H, W]."""
    w = attn[..., 0, 1:].mean(axis=-2)  # [B, nW, n]
    placed = window_reverse(Tensor(w[..., None]), grid, window, shift).data
    return placed[..., 0]


def windowed_block_pair(x, ctmap, p1: BlockParams, p2: BlockParams, window, shift: bool = True):
    """W-MSA block followed by an SW-MSA block. Returns ``(x', ctmap', [attn1, attn2])``."""
    x, ctmap, a1 = windowed_block(x, ctmap, p1, window, False)
    x, ctmap, a2 = windowed_block(x, ctmap, p2, window, shift)
    return x, ctmap, [a1, a2]


# -------------------------------------------------------------------- merging

def merge_2x2(x, proj: LinearParams) -> Tensor:
    """[B, T, H, W, D] -> [B, T, H/2, W/2, 2D]: concat 2x2 neighbours row-major then project 4D->2D."""
    x = as_tensor(x)
    B, T, H, W, D = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"2x2 merge needs even spatial dims, got {H}x{W}")
    if proj.in_dim != 4 * D:
        raise ShapeError(f"merge projection expects {proj.in_dim} inputs, tokens give 4*{D}")
    x = x.reshape(B, T, H // 2, 2, W // 2, 2, D).transpose(0, 1, 2, 4, 3, 5, 6)
    return linear_forward(x.reshape(B, T, H // 2, W // 2, 4 * D), proj)


def class_token_map_merge(ctmap, proj: LinearParams) -> Tensor:
    return merge_2x2(ctmap, proj)


def patch_merge(x, proj: LinearParams) -> Tensor:
    return merge_2x2(x, proj)


def init_merge(rng, D: int, std: float = 0.02) -> LinearParams:
    return init_linear(rng, 4 * D, 2 * D, std)


def broadcast_ctmap(ctmap, grid_wi: tuple[int, int, int]) -> Tensor:
    """Repeat each map entry so the map covers ``grid_wi`` (each target dim a multiple of the source)."""
    ctmap = as_tensor(ctmap)
    B, *src, D = ctmap.shape
    if tuple(src) == tuple(grid_wi):
        return ctmap
    if any(g % s for s, g in zip(src, grid_wi)):
        raise ShapeError(f"cannot broadcast class-token map {tuple(src)} to window grid {grid_wi}")
    rt, rh, rw = (g // s for s, g in zip(src, grid_wi))
    st, sh, sw = src
    x = ctmap.reshape(B, st, 1, sh, 1, sw, 1, D)
    x = tt.broadcast_to(x, (B, st, rt, sh, rh, sw, rw, D))
    return x.reshape(B, *grid_wi, D)


# ---------------------------------------------------------------- stage runner

def run_stage(x, ctmap, blocks: list[BlockParams], backbone: str, window=None, shift: bool = True,
              start_index: int = 0, stage: str = "", traces: list | None = None) -> tuple[Tensor, Tensor]:
    """Apply ``blocks`` to a grid ``x`` [B, T, H, W, D] carrying class-token map ``ctmap``.

    Windowed: block l (counted from ``start_index``) is shifted when l is odd and
    ``shift`` is set. Global: the map must hold a single token per clip, which is
    prepended to the flattened grid for joint attention.
    """
    x, ctmap = as_tensor(x), as_tensor(ctmap)
    B, T, H, W, D = x.shape
    if backbone == "windowed":
        for i, p in enumerate(blocks):
            sh = shift and (start_index + i) % 2 == 1
            x, ctmap, attn = windowed_block(x, ctmap, p, window, sh)
            if traces is not None:
                traces.append(BlockTrace(stage, start_index + i, attn.data,
                                         windowed_cls_grid(attn.data, (T, H, W), window, sh)))
        return x, ctmap
    if ctmap.size != B * D:
        raise ShapeError(f"global stage expects one class token per clip, got map {ctmap.shape}")
    seq = tt.concat([ctmap.reshape(B, 1, D), x.reshape(B, T * H * W, D)], axis=1)
    for i, p in enumerate(blocks):
        seq, attn = global_block_forward(seq, p)
        if traces is not None:
            traces.append(BlockTrace(stage, start_index + i, attn.data, global_cls_grid(attn.data, (T, H, W))))
    return seq[:, 1:, :].reshape(B, T, H, W, D), seq[:, 0, :].reshape(B, 1, 1, 1, D)
