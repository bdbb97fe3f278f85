"""Model and training configuration with strict JSON loading (unknown keys rejected)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .numerics import ConfigError


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class ClipConfig:
    T: int = 8
    H: int = 16
    W: int = 16
    C: int = 3


@dataclass
class PadmConfig:
    G: int = 2
    DR: float = 1.0
    total_depth: int = 2


@dataclass
class DctgConfig:
    inter_feature: str = "avg"  # avg | qkv
    inter_frame: str = "lstm"  # lstm | qkv
    F_det: int = 32
    M: int = 2
    lstm_layers: int = 2
    heads: int = 1


@dataclass
class WindowConfig:
    hw: list[int] = field(default_factory=lambda: [2, 2])
    t: int | None = None  # None: full temporal span of the stage input


@dataclass
class EgoViTConfig:
    clip: ClipConfig = field(default_factory=ClipConfig)
    patch: list[int] = field(default_factory=lambda: [1, 4, 4])
    D: int = 16
    heads: int = 1
    mlp_ratio: int = 4
    num_classes: int = 4
    backbone: str = "windowed"  # windowed | global
    window: WindowConfig = field(default_factory=WindowConfig)
    shift: bool = True
    merges: int = 0
    use_dctg: bool = True
    use_padm: bool = True
    padm: PadmConfig = field(default_factory=PadmConfig)
    dctg: DctgConfig = field(default_factory=DctgConfig)
    init_std: float = 0.02

    # ---- derived geometry
    @property
    def grid(self) -> tuple[int, int, int]:
        pt, ph, pw = self.patch
        return self.clip.T // pt, self.clip.H // ph, self.clip.W // pw

    @property
    def num_patches(self) -> int:
        t, h, w = self.grid
        return t * h * w

    @property
    def D_final(self) -> int:
        return self.D * 2 ** self.merges if self.backbone == "windowed" else self.D

    @property
    def depths(self) -> tuple[int, int]:
        from .padm import depth_split

        return depth_split(self.padm.total_depth, self.padm.DR)

    def validate(self) -> "EgoViTConfig":
        c = self.clip
        if min(c.T, c.H, c.W, c.C) < 1:
            raise ConfigError("clip: dims must be positive")
        if len(self.patch) != 3 or any(p < 1 for p in self.patch):
            raise ConfigError("patch: expected three positive sizes [P_T, P_H, P_W]")
        for dim, p, name in zip((c.T, c.H, c.W), self.patch, "THW"):
            if dim % p:
                raise ConfigError(f"patch embedding: {name}={dim} not divisible by patch size {p}")
        if self.backbone not in ("windowed", "global"):
            raise ConfigError(f"backbone must be 'windowed' or 'global', got {self.backbone!r}")
        if self.D % self.heads:
            raise ConfigError(f"attention: D={self.D} not divisible by heads={self.heads}")
        if self.num_classes < 2:
            raise ConfigError("head: num_classes must be >= 2")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        if self.dctg.inter_feature not in ("avg", "qkv") or self.dctg.inter_frame not in ("lstm", "qkv"):
            raise ConfigError(f"dctg: unknown variant {self.dctg.inter_feature}/{self.dctg.inter_frame}")
        if self.dctg.F_det % self.dctg.heads:
            raise ConfigError("dctg: F_det not divisible by dctg.heads")
        if self.padm.total_depth < 2:
            raise ConfigError("padm: total_depth must be >= 2")
        G = self.padm.G if self.use_padm else 1
        tp, hp, wp = self.grid
        if self.use_padm:
            if G < 1 or tp % G or c.T % G:
                raise ConfigError(f"phase partition: G={G} must divide T={c.T} and T_P={tp}")
        if self.merges and self.backbone != "windowed":
            raise ConfigError("merges apply only to the windowed backbone")
        if self.backbone == "windowed":
            wh, ww = self.window.hw
            h, w = hp, wp
            for stage in range(self.merges + 1):
                if h % wh or w % ww:
                    raise ConfigError(f"windowed stage {stage}: grid {h}x{w} not divisible by window {wh}x{ww}")
                if stage < self.merges:
                    if (h // wh) % 2 or (w // ww) % 2 or h % 2 or w % 2:
                        raise ConfigError(f"merge {stage}: patch grid {h}x{w} / window grid must be even")
                    h, w = h // 2, w // 2
            if self.window.t is not None and not self.use_padm and tp % self.window.t:
                raise ConfigError(f"windowed backbone: T_P={tp} not divisible by window t={self.window.t}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EgoViTConfig":
        return _build(cls, data, "model").validate()

    def replace(self, **changes) -> "EgoViTConfig":
        """Copy with top-level or dotted ('padm.G') overrides."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *path, leaf = key.split(".")
            for p in path:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown key {key}")
            node[leaf] = value
        return EgoViTConfig.from_dict(d)


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 3e-3
    optimizer: str = "adam"  # adam | sgd
    seed: int = 0
    eval_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stop_at_full_accuracy: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigError("train: steps/batch_size/learning_rate must be non-negative (batch >= 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train: optimizer must be adam or sgd, got {self.optimizer!r}")


_NESTED = {
    (EgoViTConfig, "clip"): ClipConfig,
    (EgoViTConfig, "padm"): PadmConfig,
    (EgoViTConfig, "dctg"): DctgConfig,
    (EgoViTConfig, "window"): WindowConfig,
}


@dataclass
class RunConfig:
    model: EgoViTConfig
    train: TrainConfig


def load_run_config(path) -> RunConfig:
    """Read ``{"model": {...}, "train": {...}}`` from a UTF-8 JSON file."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    unknown = sorted(set(raw) - {"model", "train"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    model = EgoViTConfig.from_dict(raw.get("model", {}))
    train = _build(TrainConfig, raw.get("train", {}), "train")
    return RunConfig(model, train)


def tiny_config(**overrides) -> EgoViTConfig:
    """The canonical tiny config used by the gradient and overfit checks."""
    cfg = EgoViTConfig(mlp_ratio=1)
    return cfg.replace(**overrides) if overrides else cfg.validate()
