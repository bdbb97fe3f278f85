"""``egovit`` command line: synthesis, training, evaluation, ablation grids and analyses.

Every command writes its outputs atomically. Exit codes: 0 success, 1 usage,
2 validation (bad config / data / files), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .config import EgoViTConfig, RunConfig, TrainConfig, load_run_config, tiny_config
from .features import (
    HofError,
    SyntheticSpec,
    atomic_write_bytes,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
    stack_clips,
)
from .model import ForwardError, forward, init_params, make_baseline, param_count
from .numerics import ConfigError, no_grad
from .training import (
    NumericDivergenceError,
    accuracy,
    gradient_check,
    load_params,
    save_params,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _run_config(args) -> RunConfig:
    rc = load_run_config(args.config) if args.config else RunConfig(tiny_config(), TrainConfig())
    if getattr(args, "seed", None) is not None:
        rc.train.seed = args.seed
    return rc


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise CliError(f"--{n.replace('_', '-')} is required for this command", EXIT_USAGE)


def _out_dir(args) -> Path:
    _require(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _trained(args, rc: RunConfig):
    _require(args, "params", "data")
    return load_params(rc.model, args.params), load_dataset(args.data)


def _traced(args, rc: RunConfig):
    params, clips = _trained(args, rc)
    if not 0 <= args.clip < len(clips):
        raise CliError(f"--clip {args.clip} out of range (dataset has {len(clips)} clips)")
    video, ho, mask, _ = stack_clips(clips[args.clip:args.clip + 1])
    with no_grad():
        _, trace = forward(video, ho, mask, rc.model, params, retain_trace=True)
    return trace, clips[args.clip]


# -------------------------------------------------------------------- commands

def cmd_gen_synth(args) -> int:
    spec = SyntheticSpec()
    if args.spec:
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    if args.seed is not None:
        spec.rng_seed = args.seed
    out = _out_dir(args)
    clips = generate_synthetic_dataset(spec)
    save_dataset(clips, out, spec)
    print(f"wrote {len(clips)} clips to {out}")
    return EXIT_OK


def _train_cell(cfg: EgoViTConfig, tc: TrainConfig, clips, out: Path) -> dict:
    params = init_params(cfg, tc.seed)
    log = train(cfg, params, clips, tc)
    acc = accuracy(cfg, params, clips)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "train_log.csv", log.to_csv())
    save_params(params, out / "params.npz")
    summary = {"train_accuracy": acc, "final_loss": log.loss[-1] if log.loss else None,
               "steps": len(log.step), "params": param_count(params), "seed": tc.seed}
    _write_text(out / "summary.json", analysis.dumps(summary))
    return summary


def cmd_train(args) -> int:
    _require(args, "data")
    rc = _run_config(args)
    out = _out_dir(args)
    clips = load_dataset(args.data)
    summary = _train_cell(rc.model, rc.train, clips, out)
    _write_text(out / "config.json", analysis.dumps({"model": rc.model.to_dict(), "train": vars(rc.train)}))
    print(f"train accuracy {summary['train_accuracy']:.4f}  final loss {summary['final_loss']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _run_config(args)
    params, clips = _trained(args, rc)
    acc = accuracy(rc.model, params, clips)
    summary = {"accuracy": acc, "clips": len(clips)}
    if args.retain_trace and rc.model.use_padm:
        video, ho, mask, _ = stack_clips(clips)
        with no_grad():
            _, trace = forward(video, ho, mask, rc.model, params, retain_trace=True)
        summary["phase_scores"] = [analysis.phase_scores(trace, i) for i in range(len(clips))]
    out = Path(args.out) if args.out else Path(args.params).parent
    _write_text(out / "eval.json", analysis.dumps(summary))
    print(f"accuracy {acc:.4f}")
    return EXIT_OK


@dataclass
class AblationCell:
    name: str
    family: str
    G: int
    DR: float
    inter_feature: str
    inter_frame: str
    cfg: EgoViTConfig


def ablation_cells(base: EgoViTConfig, grid: dict) -> list[AblationCell]:
    """Family x G x DR grid plus the class-token generator variant grid on the full model."""
    unknown = set(grid) - {"families", "G", "DR", "dctg_variants", "train", "synthetic"}
    if unknown:
        raise ConfigError(f"unknown grid key(s): {sorted(unknown)}")
    cells = []
    for family in grid.get("families", ["baseline", "+dctg", "+padm", "full"]):
        fam = make_baseline(base, family)
        if fam.use_padm:
            for G in grid.get("G", [base.padm.G]):
                for DR in grid.get("DR", [base.padm.DR]):
                    cfg = fam.replace(**{"padm.G": G, "padm.DR": DR})
                    cells.append(AblationCell(f"{family}_G{G}_DR{DR:g}", family, G, DR,
                                              cfg.dctg.inter_feature, cfg.dctg.inter_frame, cfg))
        else:
            cells.append(AblationCell(family, family, 1, fam.padm.DR, fam.dctg.inter_feature,
                                      fam.dctg.inter_frame, fam))
    for feat, frame in grid.get("dctg_variants", []):
        cfg = make_baseline(base, "full").replace(**{"dctg.inter_feature": feat, "dctg.inter_frame": frame})
        cells.append(AblationCell(f"dctg_{feat}_{frame}", "full", cfg.padm.G, cfg.padm.DR, feat, frame, cfg))
    return cells


ABLATION_COLUMNS = ["cell", "family", "G", "DR", "inter_feature", "inter_frame", "params",
                    "train_accuracy", "final_loss", "attention_macs"]


def cmd_ablate(args) -> int:
    _require(args, "grid")
    rc = _run_config(args)
    out = _out_dir(args)
    grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    tc = TrainConfig(**{**vars(rc.train), **grid.get("train", {})})
    if args.data:
        clips = load_dataset(args.data)
    else:
        clips = generate_synthetic_dataset(SyntheticSpec.from_dict(grid.get("synthetic", {})))
    cells = ablation_cells(rc.model, grid)
    threads = max(1, int(os.environ.get("EGOVIT_THREADS", "1")))

    def run(cell: AblationCell) -> list:
        s = _train_cell(cell.cfg, tc, clips, out / "cells" / cell.name)
        return [cell.name, cell.family, cell.G, cell.DR, cell.inter_feature, cell.inter_frame, s["params"],
                s["train_accuracy"], s["final_loss"], analysis.attention_cost(cell.cfg).attention_total]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(run, cells))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    w.writerows(rows)
    _write_text(out / "ablation.csv", buf.getvalue())
    print(f"wrote {len(rows)} ablation cells to {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_attn_map(args) -> int:
    rc = _run_config(args)
    out = _out_dir(args)
    trace, clip = _traced(args, rc)
    amap = analysis.extract_spatial_attention(trace)
    _write_text(out / "attn_map.csv", analysis.attention_map_csv(amap))
    for t in range(amap.shape[0]):
        atomic_write_bytes(out / f"attn_frame_{t:03d}.pgm", analysis.to_pgm(amap[t]))
    summary = {"clip": args.clip, "shape": list(amap.shape), "frame_sums": amap.sum(axis=(1, 2))}
    # sidecar cells are in synthetic-patch units, which are token cells when patch_px equals the patch size
    _, hp, wp = rc.model.grid
    if clip.object_cells and amap.shape[1:] == (hp, wp) and \
            all(r < hp and c < wp for r, c in clip.object_cells) and len(clip.object_cells) % amap.shape[0] == 0:
        summary["object_cell_hit_rate"] = analysis.region_hit_rate(amap, clip.object_cells)
    _write_text(out / "attn_map.json", analysis.dumps(summary))
    print(f"attention map {amap.shape} written to {out}")
    return EXIT_OK


def cmd_phase_scores(args) -> int:
    rc = _run_config(args)
    if not rc.model.use_padm:
        raise CliError("phase-scores needs a model with use_padm=true")
    out = _out_dir(args)
    trace, _ = _traced(args, rc)
    scores = analysis.phase_scores(trace)
    lines = ["phase,score"] + [f"{g},{float(s)!r}" for g, s in enumerate(scores)]
    _write_text(out / "phase_scores.csv", "\n".join(lines) + "\n")
    _write_text(out / "phase_scores.json", analysis.dumps({"clip": args.clip, "scores": scores}))
    print(" ".join(f"{s:.4f}" for s in scores))
    return EXIT_OK


def cmd_pca_temporal(args) -> int:
    rc = _run_config(args)
    out = _out_dir(args)
    trace, _ = _traced(args, rc)
    vecs = analysis.temporal_feature_vectors(trace)
    k = min(args.k, *vecs.shape)
    coords, var = analysis.pca_project(vecs, k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["position"] + [f"pc{j + 1}" for j in range(k)])
    for i, row in enumerate(coords):
        w.writerow([i] + [repr(float(v)) for v in row])
    _write_text(out / "pca_temporal.csv", buf.getvalue())
    _write_text(out / "pca_temporal.json", analysis.dumps({"explained_variance": var, "positions": len(vecs)}))
    return EXIT_OK


def cmd_flops(args) -> int:
    rc = _run_config(args)
    out = _out_dir(args)
    reports = [analysis.attention_cost(rc.model)]
    if rc.model.use_padm:
        reports.append(analysis.attention_cost(rc.model.replace(use_padm=False)))
    _write_text(out / "flops.csv", analysis.cost_csv(reports))
    _write_text(out / "flops.json", analysis.dumps([r.to_dict() for r in reports]))
    for r in reports:
        print(f"{r.family}: attention {r.attention_total}  mlp {r.mlp_total}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rc = _run_config(args)
    # Check at a wider init: at tiny init scales the phase merge's cosine
    # normalisation is so curved that central-difference truncation error
    # alone exceeds the tolerance.
    cfg = rc.model.replace(init_std=args.init_std)
    params = init_params(cfg, rc.train.seed)
    ph, pw = cfg.patch[1:]
    spec = SyntheticSpec(num_classes=cfg.num_classes, clips_per_class=1, T=cfg.clip.T, H=cfg.clip.H,
                         W=cfg.clip.W, C=cfg.clip.C, M=cfg.dctg.M, F_det=cfg.dctg.F_det,
                         rng_seed=rc.train.seed, patch_px=ph if ph == pw else 1)
    clips = generate_synthetic_dataset(spec)
    report = gradient_check(cfg, params, stack_clips(clips))
    text = analysis.dumps({"n_params": report.n_params, "max_rel_error": report.max_rel_error,
                           "worst_param": report.worst_param, "passed": report.passed,
                           "seconds": report.seconds, "per_param": report.per_param})
    if args.out:
        _write_text(Path(args.out) / "grad_check.json", text)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} max relative error {report.max_rel_error:.3e} ({report.worst_param}), "
          f"{report.n_params} params, {report.seconds:.1f}s")
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "gen-synth": (cmd_gen_synth, "write a planted-signal synthetic dataset"),
    "train": (cmd_train, "train on a dataset directory; writes train_log.csv and params.npz"),
    "eval": (cmd_eval, "report accuracy of saved parameters on a dataset"),
    "ablate": (cmd_ablate, "train every cell of a flag / G / DR / class-token-variant grid"),
    "attn-map": (cmd_attn_map, "class-token spatial attention of the last block (CSV + PGM)"),
    "phase-scores": (cmd_phase_scores, "phase merge weights averaged over positions"),
    "pca-temporal": (cmd_pca_temporal, "PCA of mean last-block tokens per temporal position"),
    "flops": (cmd_flops, "analytic attention multiply-accumulate counts"),
    "grad-check": (cmd_grad_check, "backward vs central finite differences; exit 0 iff all pass"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egovit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="run config JSON ({'model': ..., 'train': ...}); default: tiny")
        p.add_argument("--data", help="dataset directory (clip_*.hof / .npy / .json)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the training / synthesis seed")
        p.add_argument("--retain-trace", action="store_true", help="keep forward traces (eval: add phase scores)")
        p.add_argument("--params", help="saved parameter file (.npz)")
        if name == "gen-synth":
            p.add_argument("--spec", help="synthetic spec JSON")
        if name == "ablate":
            p.add_argument("--grid", help="ablation grid JSON")
        if name in ("attn-map", "phase-scores", "pca-temporal"):
            p.add_argument("--clip", type=int, default=0, help="clip index in the dataset")
        if name == "grad-check":
            p.add_argument("--init-std", type=float, default=0.1, help="init scale of the checked point")
        if name == "pca-temporal":
            p.add_argument("--k", type=int, default=2, help="number of components")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn = COMMANDS[args.command][0]
    try:
        return fn(args)
    except CliError as exc:
        print(f"egovit {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (NumericDivergenceError, FloatingPointError) as exc:
        print(f"egovit {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, HofError, ForwardError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"egovit {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
