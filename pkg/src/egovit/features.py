"""Hand-object feature streams: detection selection, the HOF container, synthetic clips.

HOF layout (little-endian)::

    b"HOF1" | u32 version=1 | u32 T | u32 M | u32 F_det     (20-byte header)
    f32 payload [T, 2M, F_det]
    u8 mask [T, 2M]  (0 or 1)

Labels and provenance live in a UTF-8 JSON sidecar with the same stem.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CONFIDENCE_THRESHOLD = 0.5
HOF_MAGIC = b"HOF1"
HOF_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
HEADER_SIZE = _HEADER.size


class HofError(ValueError):
    """Base class for HOF parse failures."""


class BadMagicError(HofError):
    pass


class VersionMismatchError(HofError):
    pass


class TruncatedError(HofError):
    """File ends before the header is complete."""


class LengthMismatchError(HofError):
    """Payload byte length disagrees with the shape in the header."""


class CorruptMaskError(HofError):
    pass


@dataclass
class DetectionRecord:
    kind: str  # "hand" | "object"
    bbox: tuple[float, float, float, float]
    confidence: float
    feature: np.ndarray

    def __post_init__(self):
        if self.kind not in ("hand", "object"):
            raise ValueError(f"kind must be 'hand' or 'object', got {self.kind!r}")
        x1, y1, x2, y2 = self.bbox
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class HandObjectFeatures:
    """Packed per-clip features: M hand slots then M object slots per frame."""

    features: np.ndarray  # [T, 2M, F_det]
    mask: np.ndarray  # [T, 2M], 1 = real detection
    M: int

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        T, slots, _ = self.features.shape
        if slots != 2 * self.M or self.mask.shape != (T, slots):
            raise ValueError(f"inconsistent HO shapes: features {self.features.shape}, "
                             f"mask {self.mask.shape}, M={self.M}")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def F_det(self) -> int:
        return self.features.shape[2]

    def frames(self, start: int, stop: int) -> "HandObjectFeatures":
        return HandObjectFeatures(self.features[start:stop], self.mask[start:stop], self.M)


def select_top_m(detections: Sequence[DetectionRecord], M: int, F_det: int | None = None
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Keep the M most confident hands and objects with confidence strictly above 0.5.

    Returns ``(slots [2M, F_det], mask [2M])``; unused slots are zero rows with mask 0.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if F_det is None:
        if not detections:
            raise ValueError("F_det is required when there are no detections")
        F_det = len(detections[0].feature)
    slots = np.zeros((2 * M, F_det))
    mask = np.zeros(2 * M, dtype=np.uint8)
    for offset, kind in ((0, "hand"), (M, "object")):
        kept = [d for d in detections if d.kind == kind and d.confidence > CONFIDENCE_THRESHOLD]
        kept.sort(key=lambda d: -d.confidence)  # stable: ties keep input order
        for j, det in enumerate(kept[:M]):
            slots[offset + j] = det.feature
            mask[offset + j] = 1
    return slots, mask


def pack_frames(frames: Sequence[Sequence[DetectionRecord]], M: int, F_det: int) -> HandObjectFeatures:
    packed = [select_top_m(dets, M, F_det) for dets in frames]
    return HandObjectFeatures(np.stack([p[0] for p in packed]), np.stack([p[1] for p in packed]), M)


# ------------------------------------------------------------------ file format

def encode_hof(features: HandObjectFeatures) -> bytes:
    T, slots, F = features.features.shape
    header = _HEADER.pack(HOF_MAGIC, HOF_VERSION, T, features.M, F)
    payload = np.ascontiguousarray(features.features, dtype="<f4").tobytes()
    mask = np.ascontiguousarray(features.mask, dtype=np.uint8).tobytes()
    return header + payload + mask


def decode_hof(blob: bytes) -> HandObjectFeatures:
    if len(blob) < HEADER_SIZE:
        raise TruncatedError(f"HOF file has {len(blob)} bytes, header needs {HEADER_SIZE}")
    magic, version, T, M, F = _HEADER.unpack_from(blob)
    if magic != HOF_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {HOF_MAGIC!r}")
    if version != HOF_VERSION:
        raise VersionMismatchError(f"HOF version {version} not supported (expected {HOF_VERSION})")
    n_slots = T * 2 * M
    expected = n_slots * F * 4 + n_slots
    actual = len(blob) - HEADER_SIZE
    if T == 0 or M == 0 or F == 0 or actual != expected:
        raise LengthMismatchError(f"header T={T} M={M} F_det={F} implies {expected} payload bytes, "
                                  f"file holds {actual}")
    feats = np.frombuffer(blob, dtype="<f4", count=n_slots * F, offset=HEADER_SIZE)
    mask = np.frombuffer(blob, dtype=np.uint8, count=n_slots, offset=HEADER_SIZE + n_slots * F * 4)
    if np.any(mask > 1):
        raise CorruptMaskError("mask bytes must be 0 or 1")
    return HandObjectFeatures(feats.reshape(T, 2 * M, F).astype(np.float64), mask.reshape(T, 2 * M).copy(), M)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_hof(features: HandObjectFeatures, path, meta: dict | None = None) -> None:
    path = Path(path)
    atomic_write_bytes(path, encode_hof(features))
    if meta is not None:
        text = json.dumps(meta, sort_keys=True, indent=2) + "\n"
        atomic_write_bytes(path.with_suffix(".json"), text.encode("utf-8"))


def load_hof(path) -> HandObjectFeatures:
    return decode_hof(Path(path).read_bytes())


def load_sidecar(path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text(encoding="utf-8"))


# ------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    """Planted-signal toy dataset.

    HO feature vectors of class c are ``signal_strength * u_c + N(0, 1)`` and the
    video carries a moving patch of colour ``signal_strength * w_c`` over N(0, 1)
    pixels, so signal_strength is the signal-to-noise ratio (0 = pure noise).
    ``plant_video`` / ``plant_ho`` switch off either channel; ``signal_frames``
    restricts both to a subset of frames (the rest is pure noise). With
    ``shared_video`` the k-th clip of every class gets the same video, so the
    frames carry no label information at all.
    """

    num_classes: int = 4
    clips_per_class: int = 8
    T: int = 8
    H: int = 16
    W: int = 16
    C: int = 3
    M: int = 2
    F_det: int = 32
    signal_strength: float = 5.0
    rng_seed: int = 0
    patch_px: int = 4
    plant_video: bool = True
    plant_ho: bool = True
    signal_frames: list[int] | None = None
    max_extra_detections: int = 2
    shared_video: bool = False

    def __post_init__(self):
        for name in ("num_classes", "clips_per_class", "T", "H", "W", "C", "M", "F_det", "patch_px"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be >= 0")
        if self.H % self.patch_px or self.W % self.patch_px:
            raise ValueError("patch_px must divide H and W")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic-spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class LabeledClip:
    video: np.ndarray  # [T, H, W, C]
    features: HandObjectFeatures
    label: int
    source_id: str = ""
    object_cells: list[tuple[int, int]] = field(default_factory=list)  # planted patch cell per frame

    def __post_init__(self):
        if self.video.shape[0] != self.features.T:
            raise ValueError(f"video has {self.video.shape[0]} frames, features {self.features.T}")


def _unit_rows(rng, n: int, d: int) -> np.ndarray:
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_box(rng, spec: SyntheticSpec) -> tuple[float, float, float, float]:
    x1 = rng.uniform(0, spec.W - 2)
    y1 = rng.uniform(0, spec.H - 2)
    return (x1, y1, rng.uniform(x1 + 1, spec.W), rng.uniform(y1 + 1, spec.H))


def generate_synthetic_dataset(spec: SyntheticSpec) -> list[LabeledClip]:
    rng = np.random.default_rng(spec.rng_seed)
    ho_dirs = _unit_rows(rng, spec.num_classes, spec.F_det)
    colors = _unit_rows(rng, spec.num_classes, spec.C)
    neutral = _unit_rows(rng, 1, spec.C)[0]
    active = set(range(spec.T) if spec.signal_frames is None else spec.signal_frames)
    gh, gw = spec.H // spec.patch_px, spec.W // spec.patch_px
    s = spec.signal_strength
    p = spec.patch_px

    clips = []
    for c in range(spec.num_classes):
        for k in range(spec.clips_per_class):
            vrng = np.random.default_rng([spec.rng_seed, 1, k]) if spec.shared_video else rng
            video = vrng.normal(size=(spec.T, spec.H, spec.W, spec.C))
            r0, c0 = int(vrng.integers(gh)), int(vrng.integers(gw))
            dr, dc = (int(v) for v in vrng.choice([-1, 0, 1], size=2))
            cells, frames = [], []
            for t in range(spec.T):
                on = t in active
                r, col = (r0 + dr * t) % gh, (c0 + dc * t) % gw
                cells.append((r, col))
                color = colors[c] if (spec.plant_video and on) else neutral
                video[t, r * p:(r + 1) * p, col * p:(col + 1) * p, :] += s * color

                dets = []
                for kind in ("hand", "object"):
                    n = 1 + int(rng.integers(spec.max_extra_detections + spec.M))
                    for j in range(n):
                        # the first detection of each kind always clears the threshold
                        conf = rng.uniform(0.55, 1.0) if j == 0 else rng.uniform(0.2, 1.0)
                        feat = rng.normal(size=spec.F_det)
                        if spec.plant_ho and on:
                            feat = feat + s * ho_dirs[c]
                        if kind == "object" and j == 0:
                            box = (col * p, r * p, (col + 1) * p, (r + 1) * p)
                        else:
                            box = _random_box(rng, spec)
                        dets.append(DetectionRecord(kind, tuple(float(b) for b in box), float(conf), feat))
                frames.append(dets)
            hof = pack_frames(frames, spec.M, spec.F_det)
            clips.append(LabeledClip(video, hof, c, f"synth-{c}-{k}", cells))
    return clips


def stack_clips(clips: Sequence[LabeledClip]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays ``(video [B,T,H,W,C], ho [B,T,2M,F], mask [B,T,2M], labels [B])``."""
    return (np.stack([c.video for c in clips]),
            np.stack([c.features.features for c in clips]),
            np.stack([c.features.mask for c in clips]),
            np.array([c.label for c in clips], dtype=np.int64))


def save_dataset(clips: Sequence[LabeledClip], out_dir, spec: SyntheticSpec | None = None) -> None:
    import io

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, clip in enumerate(clips):
        stem = out / f"clip_{i:05d}"
        write_hof(clip.features, stem.with_suffix(".hof"),
                  {"label": int(clip.label), "source_id": clip.source_id,
                   "object_cells": [list(cell) for cell in clip.object_cells]})
        buf = io.BytesIO()
        np.save(buf, clip.video.astype("<f4"), allow_pickle=False)
        atomic_write_bytes(stem.with_suffix(".npy"), buf.getvalue())
    if spec is not None:
        atomic_write_bytes(out / "spec.json", (json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n").encode())


def load_dataset(data_dir) -> list[LabeledClip]:
    data = Path(data_dir)
    hofs = sorted(data.glob("clip_*.hof"))
    if not hofs:
        raise FileNotFoundError(f"no clip_*.hof files in {data}")
    clips = []
    for path in hofs:
        meta = load_sidecar(path)
        video = np.load(path.with_suffix(".npy"), allow_pickle=False).astype(np.float64)
        clips.append(LabeledClip(video, load_hof(path), int(meta["label"]), meta.get("source_id", ""),
                                 [tuple(c) for c in meta.get("object_cells", [])]))
    return clips
