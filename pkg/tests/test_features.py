import itertools
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egovit.features import (
    HEADER_SIZE,
    BadMagicError,
    CorruptMaskError,
    DetectionRecord,
    HandObjectFeatures,
    HofError,
    LengthMismatchError,
    SyntheticSpec,
    TruncatedError,
    VersionMismatchError,
    decode_hof,
    encode_hof,
    generate_synthetic_dataset,
    load_dataset,
    load_hof,
    load_sidecar,
    save_dataset,
    select_top_m,
    write_hof,
)


def det(kind, conf, value, F=4):
    return DetectionRecord(kind, (0.0, 0.0, 1.0, 1.0), conf, np.full(F, float(value)))


def random_hof(seed=0, T=8, M=2, F=32):
    r = np.random.default_rng(seed)
    mask = (r.random((T, 2 * M)) > 0.3).astype(np.uint8)
    feats = r.normal(size=(T, 2 * M, F)).astype(np.float32).astype(np.float64) * mask[..., None]
    return HandObjectFeatures(feats, mask, M)


# ------------------------------------------------------------ detections

def test_detection_record_validation():
    with pytest.raises(ValueError):
        DetectionRecord("face", (0, 0, 1, 1), 0.9, np.zeros(2))
    with pytest.raises(ValueError):
        DetectionRecord("hand", (1, 0, 1, 1), 0.9, np.zeros(2))
    with pytest.raises(ValueError):
        DetectionRecord("hand", (0, 0, 1, 1), 1.5, np.zeros(2))


def test_threshold_is_strict():
    slots, mask = select_top_m([det("hand", 0.5, 1.0), det("object", 0.5000001, 2.0)], M=1)
    np.testing.assert_array_equal(mask, [0, 1])
    np.testing.assert_array_equal(slots[0], 0.0)
    np.testing.assert_array_equal(slots[1], 2.0)


def test_no_detections_all_padding():
    slots, mask = select_top_m([], M=2, F_det=4)
    np.testing.assert_array_equal(slots, np.zeros((4, 4)))
    np.testing.assert_array_equal(mask, np.zeros(4))


def test_top_m_picks_most_confident_hands():
    slots, mask = select_top_m([det("hand", 0.6, 6), det("hand", 0.55, 5), det("hand", 0.9, 9)], M=2)
    np.testing.assert_array_equal(slots[:2, 0], [9, 6])
    np.testing.assert_array_equal(mask, [1, 1, 0, 0])


def test_objects_fill_second_half():
    slots, mask = select_top_m([det("object", 0.8, 3), det("hand", 0.7, 1)], M=2)
    np.testing.assert_array_equal(slots[:, 0], [1, 0, 3, 0])
    np.testing.assert_array_equal(mask, [1, 0, 1, 0])


def test_ties_keep_input_order():
    slots, _ = select_top_m([det("hand", 0.7, 1), det("hand", 0.7, 2), det("hand", 0.7, 3)], M=2)
    np.testing.assert_array_equal(slots[:2, 0], [1, 2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["hand", "object"]), st.integers(0, 1000)), max_size=8,
                unique_by=lambda t: t[1]),
       st.integers(1, 3), st.randoms(use_true_random=False))
def test_selection_permutation_invariant(items, M, rnd):
    dets = [det(kind, c / 1000.0, c) for kind, c in items]
    a = select_top_m(dets, M, F_det=4)
    shuffled = list(dets)
    rnd.shuffle(shuffled)
    b = select_top_m(shuffled, M, F_det=4)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    # padded slots are zero rows exactly where the mask is 0
    assert np.all((np.abs(a[0]).sum(axis=1) > 0) | (a[1] == 0))
    np.testing.assert_array_equal(a[0][a[1] == 0], 0.0)


# ------------------------------------------------------------ file format

def test_hof_round_trip_identity(tmp_path):
    hof = random_hof()
    path = tmp_path / "a.hof"
    write_hof(hof, path, {"label": 3, "source_id": "x"})
    back = load_hof(path)
    np.testing.assert_array_equal(back.features, hof.features)
    np.testing.assert_array_equal(back.mask, hof.mask)
    assert back.M == hof.M
    assert encode_hof(back) == path.read_bytes()
    assert load_sidecar(path) == {"label": 3, "source_id": "x"}
    assert not [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]


def test_header_layout():
    blob = encode_hof(random_hof(T=8, M=2, F=32))
    assert HEADER_SIZE == 20
    assert blob[:4] == b"HOF1"
    assert struct.unpack_from("<IIII", blob, 4) == (1, 8, 2, 32)
    assert len(blob) == 20 + 8 * 4 * 32 * 4 + 8 * 4


def test_bad_magic():
    blob = bytearray(encode_hof(random_hof()))
    blob[0] = ord("X")
    with pytest.raises(BadMagicError, match="bad magic"):
        decode_hof(bytes(blob))


def test_version_mismatch():
    blob = bytearray(encode_hof(random_hof()))
    blob[4] = 2
    with pytest.raises(VersionMismatchError):
        decode_hof(bytes(blob))


def test_truncated_header():
    with pytest.raises(TruncatedError):
        decode_hof(encode_hof(random_hof())[:HEADER_SIZE - 1])


def test_payload_one_frame_short():
    full = random_hof(T=8)
    short = random_hof(T=7)
    blob = encode_hof(full)[:HEADER_SIZE] + encode_hof(short)[HEADER_SIZE:]
    with pytest.raises(LengthMismatchError):
        decode_hof(blob)


def test_corrupt_mask():
    blob = bytearray(encode_hof(random_hof()))
    blob[-1] = 7
    with pytest.raises(CorruptMaskError):
        decode_hof(bytes(blob))


def test_error_classes_distinct():
    classes = {BadMagicError, VersionMismatchError, TruncatedError, LengthMismatchError, CorruptMaskError}
    assert len(classes) == 5
    assert all(issubclass(c, HofError) for c in classes)
    for a, b in itertools.permutations(classes, 2):
        assert not issubclass(a, b)


def test_every_single_byte_header_corruption_rejected():
    blob = encode_hof(random_hof())
    for pos in range(HEADER_SIZE):
        for value in range(256):
            if value == blob[pos]:
                continue
            bad = bytearray(blob)
            bad[pos] = value
            with pytest.raises(HofError):
                decode_hof(bytes(bad))


# ------------------------------------------------------------- synthetic

def test_synthetic_deterministic():
    a = generate_synthetic_dataset(SyntheticSpec(rng_seed=7))
    b = generate_synthetic_dataset(SyntheticSpec(rng_seed=7))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.video, y.video)
        np.testing.assert_array_equal(x.features.features, y.features.features)
        assert x.label == y.label


def test_synthetic_counts_balanced():
    clips = generate_synthetic_dataset(SyntheticSpec(num_classes=4, clips_per_class=8, T=8))
    assert len(clips) == 32
    assert np.bincount([c.label for c in clips]).tolist() == [8, 8, 8, 8]
    assert all(c.video.shape == (8, 16, 16, 3) and c.features.features.shape == (8, 4, 32) for c in clips)
    assert all(c.features.mask[:, 0].all() and c.features.mask[:, 2].all() for c in clips)


def _clip_means(clips):
    out = []
    for c in clips:
        m = c.features.mask.astype(float)
        out.append((c.features.features * m[..., None]).sum(axis=(0, 1)) / m.sum())
    return np.array(out), np.array([c.label for c in clips])


def _class_gap_stat(clips, a, b):
    """Squared class-mean gap in units of its null variance per dimension (chi-square with F dof)."""
    X, y = _clip_means(clips)
    xa, xb = X[y == a], X[y == b]
    var = xa.var(axis=0, ddof=1) / len(xa) + xb.var(axis=0, ddof=1) / len(xb)
    return float(((xa.mean(axis=0) - xb.mean(axis=0)) ** 2 / var).sum())


def test_zero_signal_classes_indistinguishable():
    spec = SyntheticSpec(num_classes=2, clips_per_class=50, signal_strength=0.0, rng_seed=3)
    clips = generate_synthetic_dataset(spec)
    F = spec.F_det
    assert _class_gap_stat(clips, 0, 1) < F + 3 * np.sqrt(2 * F)


def test_planted_signal_separable_by_class_means():
    clips = generate_synthetic_dataset(SyntheticSpec())
    X, y = _clip_means(clips)
    assert _class_gap_stat(clips, 0, 1) > 100 * X.shape[1]
    centroids = np.stack([X[y == c].mean(axis=0) for c in range(4)])
    pred = np.argmin(((X[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.all(pred == y)


def test_signal_frames_restrict_planting():
    clips = generate_synthetic_dataset(SyntheticSpec(signal_frames=[2, 3], clips_per_class=20))
    X = np.stack([c.features.features[:, 0] for c in clips])  # first hand slot [N, T, F]
    y = np.array([c.label for c in clips])
    spread = [np.linalg.norm(X[y == 0, t].mean(0) - X[y == 1, t].mean(0)) for t in range(8)]
    assert min(spread[2], spread[3]) > 3 * max(spread[:2] + spread[4:])


def test_shared_video_is_label_free():
    clips = generate_synthetic_dataset(SyntheticSpec(plant_video=False, shared_video=True))
    by_k = {}
    for c in clips:
        by_k.setdefault(c.source_id.split("-")[2], []).append(c.video)
    for videos in by_k.values():
        for v in videos[1:]:
            np.testing.assert_array_equal(v, videos[0])


def test_spec_from_dict_rejects_unknown():
    with pytest.raises(ValueError, match="unknown"):
        SyntheticSpec.from_dict({"num_clases": 3})
    with pytest.raises(ValueError):
        SyntheticSpec(signal_strength=-1)


def test_dataset_save_load_round_trip(tmp_path):
    spec = SyntheticSpec(clips_per_class=2)
    clips = generate_synthetic_dataset(spec)
    save_dataset(clips, tmp_path, spec)
    back = load_dataset(tmp_path)
    assert len(back) == len(clips)
    for a, b in zip(clips, back):
        assert a.label == b.label and a.source_id == b.source_id
        np.testing.assert_array_equal(b.video, a.video.astype(np.float32))
        np.testing.assert_array_equal(b.features.features, a.features.features.astype(np.float32))
        assert b.object_cells == a.object_cells
    assert json.loads((tmp_path / "spec.json").read_text()) == spec.to_dict()
