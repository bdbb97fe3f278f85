"""Diagnostics over forward traces: spatial attention maps, phase scores, temporal PCA, cost counts."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import EgoViTConfig
from .model import ForwardTrace


class TraceError(RuntimeError):
    pass


def _need(trace: ForwardTrace | None, what: str):
    if trace is None:
        raise TraceError("no forward trace; rerun forward with retain_trace=True")
    value = getattr(trace, what)
    if value is None or (isinstance(value, list) and not value):
        raise TraceError(f"trace does not hold {what}")
    return value


# ------------------------------------------------------------------ attention

def normalize_spatial(grid: np.ndarray) -> np.ndarray:
    """Scale each frame of [..., T, H, W] to sum to one; an all-zero frame becomes uniform."""
    g = np.asarray(grid, dtype=np.float64)
    s = g.sum(axis=(-2, -1), keepdims=True)
    uniform = np.full_like(g, 1.0 / (g.shape[-1] * g.shape[-2]))
    return np.where(s > 0, g / np.where(s > 0, s, 1.0), uniform)


def extract_spatial_attention(trace: ForwardTrace, clip: int = 0) -> np.ndarray:
    """Class-token query attention of the last block as a per-frame spatial map [T', H', W']."""
    blocks = _need(trace, "blocks")
    return normalize_spatial(blocks[-1].cls_grid[clip])


def region_hit_rate(amap: np.ndarray, cells: list[tuple[int, int]]) -> float:
    """Fraction of map frames whose mean mass on the given cells beats uniform.

    ``cells`` holds one (row, col) per input frame; input frames are split into
    equal consecutive runs, one run per map frame.
    """
    Tq, H, W = amap.shape
    if not cells or len(cells) % Tq:
        raise ValueError(f"{len(cells)} cell entries cannot be split over {Tq} map frames")
    per = len(cells) // Tq
    hits = 0
    for t in range(Tq):
        region = set(cells[t * per:(t + 1) * per])
        hits += np.mean([amap[t, r, c] for r, c in region]) > 1.0 / (H * W)
    return hits / Tq


# ----------------------------------------------------------------- phase scores

def phase_scores(trace: ForwardTrace, clip: int = 0) -> np.ndarray:
    """Merge weights averaged over spatial positions -> [G]."""
    if trace is None:
        raise TraceError("no forward trace; rerun forward with retain_trace=True")
    if trace.merge_scores is None:
        raise TraceError("phase scores need a model with use_padm=true")
    return trace.merge_scores.weights[clip].mean(axis=-1)


# ------------------------------------------------------------------------ PCA

def temporal_feature_vectors(trace: ForwardTrace, clip: int = 0) -> np.ndarray:
    """Mean last-block token at each temporal position -> [T', D']."""
    tokens = _need(trace, "last_tokens")[clip]
    return tokens.mean(axis=(1, 2))


def pca_project(vectors, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Center, eigendecompose the covariance (N-1 normalisation), keep the top k components.

    Each component is signed so that its first non-negligible loading is positive.
    Returns ``(coords [N, k], explained_variance [k])``.
    """
    X = np.asarray(vectors, dtype=np.float64)
    N, D = X.shape
    if N < 2:
        raise ValueError("PCA needs at least two vectors")
    if not 1 <= k <= min(N, D):
        raise ValueError(f"k={k} must be in [1, min(N, D)={min(N, D)}]")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (N - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order]
    tol = 1e-12 * max(1.0, np.abs(comps).max())
    for j in range(k):
        nz = np.flatnonzero(np.abs(comps[:, j]) > tol)
        if nz.size and comps[nz[0], j] < 0:
            comps[:, j] = -comps[:, j]
    return Xc @ comps, evals


# ----------------------------------------------------------------- cost model

def attention_block_macs(n_tokens: int, dim: int) -> int:
    """Scores (n^2 d) + attention-weighted values (n^2 d) + q/k/v/o projections (4 n d^2)."""
    return 2 * n_tokens * n_tokens * dim + 4 * n_tokens * dim * dim


def mlp_block_macs(n_tokens: int, dim: int, mlp_ratio: int) -> int:
    return 2 * n_tokens * dim * mlp_ratio * dim


@dataclass
class StageCost:
    stage: str
    blocks: int
    calls_per_block: int
    tokens_per_call: int
    dim: int
    attention_macs: int
    mlp_macs: int


@dataclass
class CostReport:
    family: str
    stages: list[StageCost] = field(default_factory=list)
    merge_macs: int = 0

    @property
    def attention_total(self) -> int:
        return sum(s.attention_macs for s in self.stages)

    @property
    def mlp_total(self) -> int:
        return sum(s.mlp_macs for s in self.stages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention_total"] = self.attention_total
        d["mlp_total"] = self.mlp_total
        return d


def _stage_cost(name, blocks, calls, tokens, dim, mlp_ratio, informative) -> StageCost:
    return StageCost(name, blocks, calls, tokens, dim,
                     blocks * calls * attention_block_macs(tokens, dim),
                     blocks * mlp_block_macs(informative, dim, mlp_ratio))


def attention_cost(cfg: EgoViTConfig) -> CostReport:
    """Analytic multiply-accumulate counts per stage.

    Only attention scores, attention-value products and linear projections are
    counted; normalisation, softmax and activations are excluded.
    """
    tp, hp, wp = cfg.grid
    D, r = cfg.D, cfg.mlp_ratio
    l1, l2 = cfg.depths
    G = cfg.padm.G if cfg.use_padm else 1
    family = ("pyramid" if cfg.use_padm else "plain") + "-" + cfg.backbone
    rep = CostReport(family)

    if cfg.backbone == "global":
        if cfg.use_padm:
            rep.stages.append(_stage_cost("stage1", l1, G, 1 + (tp // G) * hp * wp, D, r, tp * hp * wp + G))
            t2 = G if G > 1 else tp
        else:
            rep.stages.append(_stage_cost("stage1", l1, 1, 1 + tp * hp * wp, D, r, 1 + tp * hp * wp))
            t2 = tp
        rep.stages.append(_stage_cost("stage2", l2, 1, 1 + t2 * hp * wp, D, r, 1 + t2 * hp * wp))
        return rep

    wh, ww = cfg.window.hw
    if cfg.use_padm:
        t1 = tp // G
        calls1 = G * (hp // wh) * (wp // ww)
        rep.stages.append(_stage_cost("stage1", l1, calls1, 1 + t1 * wh * ww, D, r, calls1 * (1 + t1 * wh * ww)))
        t2 = G if G > 1 else tp
        wt2 = t2
    else:
        wt1 = cfg.window.t or tp
        calls1 = (tp // wt1) * (hp // wh) * (wp // ww)
        rep.stages.append(_stage_cost("stage1", l1, calls1, 1 + wt1 * wh * ww, D, r, calls1 * (1 + wt1 * wh * ww)))
        t2 = tp
        wt2 = cfg.window.t or tp
    h, w, d = hp, wp, D
    ct_t = 1 if cfg.use_padm else tp // (cfg.window.t or tp)
    ct_h, ct_w = hp // wh, wp // ww
    for _ in range(cfg.merges):
        h, w, ct_h, ct_w = h // 2, w // 2, ct_h // 2, ct_w // 2
        rep.merge_macs += (t2 * h * w + ct_t * ct_h * ct_w) * 4 * d * 2 * d
        d *= 2
    calls2 = (t2 // wt2) * (h // wh) * (w // ww)
    rep.stages.append(_stage_cost("stage2", l2, calls2, 1 + wt2 * wh * ww, d, r, calls2 * (1 + wt2 * wh * ww)))
    return rep


# ------------------------------------------------------------------ emitters

def to_pgm(frame: np.ndarray) -> bytes:
    """Binary P5 greyscale image, values rescaled linearly to 0..255."""
    f = np.asarray(frame, dtype=np.float64)
    lo, hi = f.min(), f.max()
    scaled = np.zeros_like(f) if hi <= lo else (f - lo) / (hi - lo)
    pix = np.round(scaled * 255.0).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def attention_map_csv(amap: np.ndarray) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["frame", "row", "col", "weight"])
    for t, r, c in np.ndindex(*amap.shape):
        wr.writerow([t, r, c, repr(float(amap[t, r, c]))])
    return buf.getvalue()


def cost_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["family", "stage", "blocks", "calls_per_block", "tokens_per_call", "dim",
                 "attention_macs", "mlp_macs"])
    for rep in reports:
        for s in rep.stages:
            wr.writerow([rep.family, s.stage, s.blocks, s.calls_per_block, s.tokens_per_call, s.dim,
                         s.attention_macs, s.mlp_macs])
        wr.writerow([rep.family, "total", "", "", "", "", rep.attention_total, rep.mlp_total])
    return buf.getvalue()


def dumps(obj) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(type(o))

    return json.dumps(obj, default=default, indent=2, sort_keys=True) + "\n"
