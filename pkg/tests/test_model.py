import json

import numpy as np
import pytest

from egovit import EgoViTConfig, forward, init_params, load_run_config, tiny_config
from egovit.config import ConfigError
from egovit.dctg import dctg_param_count
from egovit.features import SyntheticSpec, generate_synthetic_dataset, stack_clips
from egovit.model import ForwardError, classify_head, expected_param_count, make_baseline, param_count
from egovit.numerics import LinearParams, named_parameters, no_grad, parameter
from egovit.training import backward, finite_diff_grad, loss_on_batch, relative_error


def micro_config(backbone="global", std=0.1, **over):
    cfg = EgoViTConfig.from_dict(dict(
        clip=dict(T=4, H=8, W=8, C=1), patch=[1, 4, 4], D=4, mlp_ratio=1, num_classes=2,
        backbone=backbone, window=dict(hw=[1, 1]), padm=dict(G=2, DR=1.0, total_depth=2),
        dctg=dict(F_det=4, M=1), init_std=std))
    return cfg.replace(**over) if over else cfg


def micro_batch():
    spec = SyntheticSpec(num_classes=2, clips_per_class=1, T=4, H=8, W=8, C=1, M=1, F_det=4, patch_px=4)
    return stack_clips(generate_synthetic_dataset(spec))


def _fd_errors(cfg, params, batch, steps):
    named = list(named_parameters(params))
    analytic = backward(loss_on_batch(cfg, params, batch), params)

    def f():
        with no_grad():
            return float(loss_on_batch(cfg, params, batch).data)

    out = []
    for h in steps:
        numeric = finite_diff_grad(f, [t.data for _, t in named], h)
        out.append((analytic, dict(zip([n for n, _ in named], numeric))))
    return out


# ------------------------------------------------------------------ shapes

def test_logits_shape_batch_and_single(tiny_cfg, synth_batch):
    video, ho, mask, _ = synth_batch
    params = init_params(tiny_cfg, 0)
    with no_grad():
        logits, _ = forward(video[:3], ho[:3], mask[:3], tiny_cfg, params)
        single, _ = forward(video[0], ho[0], mask[0], tiny_cfg, params)
    assert logits.shape == (3, 4)
    assert single.shape == (4,)
    np.testing.assert_allclose(single.data, logits.data[0], atol=1e-12)


def test_static_token_model_ignores_ho_features(tiny_cfg, synth_batch):
    cfg = tiny_cfg.replace(use_dctg=False)
    video, ho, mask, _ = synth_batch
    params = init_params(cfg, 0)
    with no_grad():
        a, _ = forward(video[:2], ho[:2], mask[:2], cfg, params)
        b, _ = forward(video[:2], ho[:2] * -3.0 + 1.0, mask[:2], cfg, params)
    np.testing.assert_array_equal(a.data, b.data)


@pytest.mark.parametrize("seed", range(5))
def test_dctg_model_responds_to_ho_features(tiny_cfg, synth_batch, seed):
    video, ho, mask, _ = synth_batch
    params = init_params(tiny_cfg, seed)
    r = np.random.default_rng(seed)
    with no_grad():
        a, _ = forward(video[:2], ho[:2], mask[:2], tiny_cfg, params)
        b, _ = forward(video[:2], r.normal(size=ho[:2].shape), mask[:2], tiny_cfg, params)
    assert not np.allclose(a.data, b.data)


def test_forward_deterministic(tiny_cfg, synth_batch):
    video, ho, mask, _ = synth_batch
    with no_grad():
        a, _ = forward(video[:4], ho[:4], mask[:4], tiny_cfg, init_params(tiny_cfg, 3))
        b, _ = forward(video[:4], ho[:4], mask[:4], tiny_cfg, init_params(tiny_cfg, 3))
    np.testing.assert_array_equal(a.data, b.data)


def test_init_same_seed_identical_and_norms_unit(tiny_cfg):
    a = dict(named_parameters(init_params(tiny_cfg, 5)))
    b = dict(named_parameters(init_params(tiny_cfg, 5)))
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
        if name.endswith("gamma"):
            np.testing.assert_array_equal(a[name].data, 1.0)
        if name.endswith(("beta", ".bias")) and "lstm" not in name:
            np.testing.assert_array_equal(a[name].data, 0.0)


# -------------------------------------------------------------- parameter counts

def test_tiny_param_count_frozen(tiny_cfg):
    params = init_params(tiny_cfg, 0)
    # patch embed 48*16+16 + pos 16*16 + time 8*16 = 1168; 2 blocks of 1696; head 68; dctg 4752
    assert param_count(params) == 9380
    assert expected_param_count(tiny_cfg) == 9380
    assert param_count(params) < 10_000


@pytest.mark.parametrize("family", ["baseline", "+dctg", "+padm", "full"])
@pytest.mark.parametrize("backbone", ["windowed", "global"])
def test_expected_count_matches_built(tiny_cfg, family, backbone):
    cfg = make_baseline(tiny_cfg.replace(backbone=backbone), family)
    assert param_count(init_params(cfg, 0)) == expected_param_count(cfg)


def test_merges_count_matches_built():
    cfg = tiny_config(**{"merges": 1, "window.hw": [1, 1]})
    assert param_count(init_params(cfg, 0)) == expected_param_count(cfg)


def test_dctg_delta_replaces_static_token(tiny_cfg):
    with_d = param_count(init_params(tiny_cfg, 0))
    without = param_count(init_params(tiny_cfg.replace(use_dctg=False), 0))
    assert with_d - without == dctg_param_count(tiny_cfg.dctg, tiny_cfg.D) - tiny_cfg.D


def test_phase_weights_shared_not_replicated(tiny_cfg):
    # stage-1 weights are shared across phases, so G does not change the count
    a = param_count(init_params(tiny_cfg.replace(**{"padm.G": 2}), 0))
    b = param_count(init_params(tiny_cfg.replace(**{"padm.G": 4}), 0))
    assert a == b


@pytest.mark.parametrize("backbone", ["windowed", "global"])
def test_single_phase_pyramid_equals_plain_model(tiny_cfg, synth_batch, backbone):
    video, ho, mask, _ = synth_batch
    cfg_p = tiny_cfg.replace(backbone=backbone, **{"padm.G": 1})
    cfg_b = cfg_p.replace(use_padm=False)
    params = init_params(cfg_p, 2)
    with no_grad():
        a, _ = forward(video[:3], ho[:3], mask[:3], cfg_p, params)
        b, _ = forward(video[:3], ho[:3], mask[:3], cfg_b, params)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


# -------------------------------------------------------------------- head

def test_head_uniform_map_is_bias_plus_token(rng):
    head = LinearParams(parameter(rng.normal(size=(4, 3))), parameter(rng.normal(size=3)))
    v = rng.normal(size=4)
    ctmap = np.broadcast_to(v, (2, 3, 5, 4))
    np.testing.assert_allclose(classify_head(ctmap, head).data, np.tile(v @ head.weight.data + head.bias.data, (2, 1)),
                               atol=1e-12)


def test_head_mean_oracle(rng):
    head = LinearParams(parameter(rng.normal(size=(4, 3))), parameter(rng.normal(size=3)))
    ctmap = rng.normal(size=(2, 1, 2, 2, 4))
    expect = ctmap.reshape(2, -1, 4).mean(axis=1) @ head.weight.data + head.bias.data
    np.testing.assert_allclose(classify_head(ctmap, head).data, expect, atol=1e-12)


def test_head_zero_weights_give_bias(rng):
    head = LinearParams(parameter(np.zeros((4, 3))), parameter(np.array([1.0, -2.0, 0.5])))
    np.testing.assert_array_equal(classify_head(rng.normal(size=(2, 6, 4)), head).data, [[1, -2, 0.5]] * 2)


# ------------------------------------------------------------------ errors

def test_wrong_video_shape_tagged_input(tiny_cfg, synth_batch):
    video, ho, mask, _ = synth_batch
    with pytest.raises(ForwardError) as info:
        forward(video[:1, :, :8], ho[:1], mask[:1], tiny_cfg, init_params(tiny_cfg, 0))
    assert info.value.stage == "input"


def test_missing_ho_tagged_dctg(tiny_cfg, synth_batch):
    video, _, _, _ = synth_batch
    with pytest.raises(ForwardError) as info:
        forward(video[:1], None, None, tiny_cfg, init_params(tiny_cfg, 0))
    assert info.value.stage == "dctg"


def test_wrong_slot_count_tagged_dctg(tiny_cfg, synth_batch):
    video, ho, mask, _ = synth_batch
    with pytest.raises(ForwardError) as info:
        forward(video[:1], ho[:1, :, :3], mask[:1, :, :3], tiny_cfg, init_params(tiny_cfg, 0))
    assert info.value.stage == "dctg"


def test_patch_translation_changes_logits(tiny_cfg, synth_batch):
    video, ho, mask, _ = synth_batch
    params = init_params(tiny_cfg, 0)
    shifted = np.roll(video[:1], 4, axis=2)
    with no_grad():
        a, _ = forward(video[:1], ho[:1], mask[:1], tiny_cfg, params)
        b, _ = forward(shifted, ho[:1], mask[:1], tiny_cfg, params)
    assert not np.allclose(a.data, b.data)


# ------------------------------------------------------------------ config

def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown"):
        EgoViTConfig.from_dict({"D": 16, "depth": 3})
    with pytest.raises(ConfigError, match="unknown"):
        EgoViTConfig.from_dict({"padm": {"G": 2, "ratio": 1}})


def test_config_validation_messages():
    with pytest.raises(ConfigError, match="G=3"):
        tiny_config(**{"padm.G": 3})
    with pytest.raises(ConfigError, match="divisible"):
        tiny_config(patch=[1, 3, 3])
    with pytest.raises(ConfigError):
        tiny_config(backbone="conv")


def test_replace_dotted_and_unknown(tiny_cfg):
    assert tiny_cfg.replace(**{"padm.G": 4}).padm.G == 4
    assert tiny_cfg.padm.G == 2
    with pytest.raises(ConfigError):
        tiny_cfg.replace(**{"padm.X": 1})


def test_run_config_round_trip(tmp_path, tiny_cfg):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": tiny_cfg.to_dict(), "train": {"steps": 7}}))
    rc = load_run_config(path)
    assert rc.model == tiny_cfg and rc.train.steps == 7
    path.write_text(json.dumps({"model": {}, "extra": 1}))
    with pytest.raises(ConfigError):
        load_run_config(path)
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_run_config(path)


def test_shipped_tiny_config_is_canonical(tiny_cfg):
    from pathlib import Path

    rc = load_run_config(Path(__file__).resolve().parents[1] / "configs" / "tiny.json")
    assert rc.model == tiny_cfg


# -------------------------------------------------------------- gradients

@pytest.mark.parametrize("std", [0.02, 0.1])
def test_global_micro_model_gradients(std):
    cfg = micro_config("global", std)
    params = init_params(cfg, 0)
    [(analytic, numeric)] = _fd_errors(cfg, params, micro_batch(), [1e-5])
    assert max(relative_error(analytic[n], numeric[n]).max() for n in analytic) < 1e-4


def test_windowed_micro_model_gradients_richardson():
    # Central differences carry an h^2 term that is large where the merge's
    # cosine normalisation is sharply curved; Richardson extrapolation cancels it.
    cfg = micro_config("windowed", 0.1)
    params = init_params(cfg, 0)
    (analytic, n1), (_, n2) = _fd_errors(cfg, params, micro_batch(), [1e-4, 5e-5])
    err = max(relative_error(analytic[n], (4 * n2[n] - n1[n]) / 3).max() for n in analytic)
    assert err < 1e-4


def test_windowed_micro_fd_error_shrinks_with_step():
    cfg = micro_config("windowed", 0.1)
    params = init_params(cfg, 0)
    runs = _fd_errors(cfg, params, micro_batch(), [1e-4, 1e-5])
    errs = [max(relative_error(a[n], num[n]).max() for n in a) for a, num in runs]
    assert errs[1] < errs[0] / 10
