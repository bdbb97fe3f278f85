"""Full forward pass: embeddings, class tokens, stage 1, phase merge, stage 2, head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbones as bb
from . import padm
from .config import EgoViTConfig
from .dctg import DctgParams, dctg_param_count, generate_class_token, init_dctg
from .numerics import (
    ConfigError,
    LinearParams,
    Tensor,
    as_tensor,
    count_parameters,
    init_linear,
    linear_forward,
    parameter,
    trunc_normal,
)
from .numerics import tensor as tt


class ForwardError(RuntimeError):
    """Shape or configuration failure, tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class MergeParams:
    patch: LinearParams
    cls: LinearParams


@dataclass
class EgoViTParams:
    embed: bb.EmbeddingParams
    stage1: list[bb.BlockParams]
    stage2: list[bb.BlockParams]
    merges: list[MergeParams]
    head: LinearParams
    dctg: DctgParams | None = None
    static_token: Tensor | None = None


@dataclass
class ForwardTrace:
    blocks: list[bb.BlockTrace] = field(default_factory=list)
    merge_scores: padm.MergeScores | None = None
    phase_ctmaps: np.ndarray | None = None  # [B, G, S, D] stage-1 class tokens fed to the merge
    class_tokens: np.ndarray | None = None  # [B, G, D] seed tokens per phase
    last_tokens: np.ndarray | None = None  # [B, T', H', W', D'] informative tokens after the last block
    final_ctmap: np.ndarray | None = None
    G: int = 1


def init_params(cfg: EgoViTConfig, seed: int = 0) -> EgoViTParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    std = cfg.init_std
    l1, l2 = cfg.depths
    embed = bb.init_embedding(rng, tuple(cfg.patch), cfg.clip.C, cfg.grid, cfg.D, std)
    stage1 = [bb.init_block(rng, cfg.D, cfg.heads, cfg.mlp_ratio, std) for _ in range(l1)]
    merges = []
    d = cfg.D
    if cfg.backbone == "windowed":
        for _ in range(cfg.merges):
            merges.append(MergeParams(bb.init_merge(rng, d, std), bb.init_merge(rng, d, std)))
            d *= 2
    stage2 = [bb.init_block(rng, d, cfg.heads, cfg.mlp_ratio, std) for _ in range(l2)]
    head = init_linear(rng, d, cfg.num_classes, std)
    params = EgoViTParams(embed, stage1, stage2, merges, head)
    if cfg.use_dctg:
        params.dctg = init_dctg(rng, cfg.dctg, cfg.D, std)
    else:
        params.static_token = parameter(trunc_normal(rng, (cfg.D,), std))
    return params


def param_count(params) -> int:
    return count_parameters(params)


def expected_param_count(cfg: EgoViTConfig) -> int:
    """Closed-form parameter count for ``cfg`` (mirrors :func:`init_params`)."""
    pt, ph, pw = cfg.patch
    tp, hp, wp = cfg.grid
    D = cfg.D
    n = (pt * ph * pw * cfg.clip.C) * D + D + hp * wp * D + tp * D
    l1, l2 = cfg.depths
    n += l1 * bb.block_param_count(D, cfg.mlp_ratio)
    d = D
    if cfg.backbone == "windowed":
        for _ in range(cfg.merges):
            n += 2 * (4 * d * 2 * d + 2 * d)
            d *= 2
    n += l2 * bb.block_param_count(d, cfg.mlp_ratio)
    n += d * cfg.num_classes + cfg.num_classes
    n += dctg_param_count(cfg.dctg, D) if cfg.use_dctg else D
    return n


def make_baseline(cfg: EgoViTConfig, family: str) -> EgoViTConfig:
    """Toggle the class-token / pyramid flags: baseline, +dctg, +padm or full."""
    flags = {"baseline": (False, False), "+dctg": (True, False), "+padm": (False, True), "full": (True, True)}
    if family not in flags:
        raise ConfigError(f"unknown model family {family!r}; expected one of {sorted(flags)}")
    use_dctg, use_padm = flags[family]
    return cfg.replace(use_dctg=use_dctg, use_padm=use_padm)


def classify_head(ctmap, head: LinearParams) -> Tensor:
    """Average a class-token map [B, ..., D] over all positions, then apply the head."""
    ctmap = as_tensor(ctmap)
    B, D = ctmap.shape[0], ctmap.shape[-1]
    if ctmap.size == 0:
        raise ValueError("empty class-token map")
    pooled = tt.mean(ctmap.reshape(B, ctmap.size // (B * D), D), axis=1)
    return linear_forward(pooled, head)


def _class_tokens(ho, mask, cfg: EgoViTConfig, params: EgoViTParams, B: int, G: int) -> Tensor:
    if cfg.use_dctg:
        if ho is None:
            raise ValueError("use_dctg=true requires hand-object features")
        ho = np.asarray(ho, dtype=np.float64)
        mask = np.asarray(mask)
        T = ho.shape[1]
        ho = ho.reshape(B, G, T // G, *ho.shape[2:])
        mask = mask.reshape(B, G, T // G, mask.shape[-1])
        return generate_class_token(Tensor(ho), mask, cfg.dctg, params.dctg)  # [B, G, D]
    return tt.broadcast_to(params.static_token.reshape(1, 1, cfg.D), (B, G, cfg.D))


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValueError, IndexError) as exc:
        raise ForwardError(name, exc) from exc


def forward(video, ho, mask, cfg: EgoViTConfig, params: EgoViTParams, retain_trace: bool = False
            ) -> tuple[Tensor, ForwardTrace | None]:
    """Logits [B, num_classes] for a batch (or [num_classes] for a single unbatched clip)."""
    video = np.asarray(video, dtype=np.float64)
    single = video.ndim == 4
    if single:
        video = video[None]
        ho = None if ho is None else np.asarray(ho)[None]
        mask = None if mask is None else np.asarray(mask)[None]
    B = video.shape[0]
    if tuple(video.shape[1:]) != (cfg.clip.T, cfg.clip.H, cfg.clip.W, cfg.clip.C):
        raise ForwardError("input", ValueError(f"video shape {video.shape[1:]} != config clip "
                                               f"{(cfg.clip.T, cfg.clip.H, cfg.clip.W, cfg.clip.C)}"))
    trace = ForwardTrace() if retain_trace else None
    traces = trace.blocks if trace else None
    G = cfg.padm.G if cfg.use_padm else 1
    l1 = len(params.stage1)
    wt = cfg.window.t

    x = _stage("patch_embed", bb.patch_embed, video, tuple(cfg.patch), params.embed)
    x = _stage("add_embeddings", bb.add_embeddings, x, params.embed)
    cls = _stage("dctg", _class_tokens, ho, mask, cfg, params, B, G)
    if trace:
        trace.class_tokens = cls.data.copy()
        trace.G = G

    if cfg.use_padm:
        groups = _stage("phase_partition", padm.partition_phases, x, G)
        tokens, maps = _stage("stage1", padm.stage1_forward, groups, params.stage1, cls, cfg.backbone,
                              tuple(cfg.window.hw), cfg.shift, traces)
        stacked = tt.stack([m.reshape(B, m.size // (B * cfg.D), cfg.D) for m in maps], axis=1)  # [B,G,S,D]
        merged, scores = _stage("dynamic_merge", padm.dynamic_merge, stacked)
        if trace:
            trace.merge_scores = scores
            trace.phase_ctmaps = stacked.data.copy()
        ctmap = merged.reshape(B, *maps[0].shape[1:])
        if G > 1:
            x = _stage("temporal_pool", padm.temporal_pool_concat, tokens)
        else:
            x = tokens[0]
        x, ctmap = _stage("stage2", padm.stage2_forward, x, ctmap, params.stage2, params.merges, cfg.backbone,
                          tuple(cfg.window.hw), cfg.shift, l1, traces)
    else:
        tp, hp, wp = cfg.grid
        window = (wt or tp, *cfg.window.hw)
        grid_wi = bb.window_grid((tp, hp, wp), window) if cfg.backbone == "windowed" else (1, 1, 1)
        ctmap = bb.class_token_map_init(cls.reshape(B, cfg.D), grid_wi)
        x, ctmap = _stage("stage1", bb.run_stage, x, ctmap, params.stage1, cfg.backbone, window, cfg.shift,
                          0, "stage1", traces)

        def _rest(x, ctmap):
            for m in params.merges:
                x = bb.patch_merge(x, m.patch)
                ctmap = bb.class_token_map_merge(ctmap, m.cls)
            w = (wt or x.shape[1], *cfg.window.hw)
            if cfg.backbone == "windowed":
                ctmap = bb.broadcast_ctmap(ctmap, bb.window_grid(x.shape[1:4], w))
            return bb.run_stage(x, ctmap, params.stage2, cfg.backbone, w, cfg.shift, l1, "stage2", traces)

        x, ctmap = _stage("stage2", _rest, x, ctmap)

    logits = _stage("head", classify_head, ctmap, params.head)
    if trace:
        trace.last_tokens = x.data.copy()
        trace.final_ctmap = ctmap.data.copy()
    if single:
        logits = logits.reshape(cfg.num_classes)
    return logits, trace


def forward_clips(clips, cfg: EgoViTConfig, params: EgoViTParams, retain_trace: bool = False):
    from .features import stack_clips

    video, ho, mask, _ = stack_clips(clips)
    return forward(video, ho, mask, cfg, params, retain_trace)
