"""Network tests: embeddings, receptive field, parameter count, gradients."""

import numpy as np
import pytest
import torch

from sinddm.denoiser import (
    Denoiser,
    DenoiserSpec,
    count_params,
    embed_time_scale,
    init_params,
    predict_noise,
    receptive_field,
)

SMALL = DenoiserSpec(blocks=2, convs_per_block=2, hidden_width=8, embed_dim=16)


# ------------------------------------------------------------------- spec


def test_spec_defaults_and_validation():
    spec = DenoiserSpec()
    assert (spec.blocks, spec.convs_per_block, spec.hidden_width) == (4, 4, 88)
    with pytest.raises(ValueError):
        DenoiserSpec(blocks=0)
    with pytest.raises(ValueError):
        DenoiserSpec(embed_dim=3)
    with pytest.raises(ValueError):
        DenoiserSpec(padding_mode="reflect")


def test_spec_round_trips_through_dict():
    spec = DenoiserSpec(blocks=3, convs_per_block=2, hidden_width=24)
    assert DenoiserSpec.from_dict(spec.to_dict()) == spec


def test_receptive_field_values():
    assert receptive_field(DenoiserSpec()) == 35
    assert receptive_field(SMALL) == 11
    assert receptive_field(DenoiserSpec(blocks=1, convs_per_block=1)) == 5


# ------------------------------------------------------------- embeddings


def test_embedding_is_deterministic_and_distinct():
    model = init_params(SMALL, seed=0)
    e_a = embed_time_scale(model, 10, 1)
    e_b = embed_time_scale(model, 10, 1)
    np.testing.assert_array_equal(e_a, e_b)
    assert e_a.shape == (2 * SMALL.embed_dim,)
    pairs = [(10, 1), (11, 1), (10, 2), (0, 0), (100, 3)]
    embs = [embed_time_scale(model, t, s) for t, s in pairs]
    for i in range(len(embs)):
        for j in range(i + 1, len(embs)):
            assert not np.allclose(embs[i], embs[j])


def test_embedding_feeds_both_timestep_and_scale():
    model = init_params(SMALL, seed=1, zero_init_final=False)
    x = np.zeros((16, 16, 3))
    base = predict_noise(model, x, 10, 1)
    assert not np.allclose(predict_noise(model, x, 50, 1), base)
    assert not np.allclose(predict_noise(model, x, 10, 2), base)


# ------------------------------------------------------------ shape/range


@pytest.mark.parametrize("padding_mode", ["layer", "initial"])
@pytest.mark.parametrize("shape", [(11, 11), (16, 24), (33, 17)])
def test_output_shape_matches_input(padding_mode, shape):
    spec = DenoiserSpec(
        blocks=2, convs_per_block=2, hidden_width=8, embed_dim=16, padding_mode=padding_mode
    )
    model = init_params(spec, seed=2)
    out = predict_noise(model, np.random.default_rng(0).normal(size=(*shape, 3)), 5, 0)
    assert out.shape == (*shape, 3)
    assert np.all(np.isfinite(out))


def test_zero_initialized_head_predicts_zero():
    model = init_params(SMALL, seed=3, zero_init_final=True)
    out = predict_noise(model, np.random.default_rng(1).normal(size=(16, 16, 3)), 7, 1)
    np.testing.assert_array_equal(out, np.zeros_like(out))


def test_nonfinite_output_raises():
    model = init_params(SMALL, seed=4, zero_init_final=False)
    with torch.no_grad():
        model.head.weight[:] = float("nan")
    with pytest.raises(FloatingPointError):
        predict_noise(model, np.zeros((12, 12, 3)), 5, 0)


# --------------------------------------------------------- receptive field


@pytest.mark.parametrize("padding_mode", ["layer", "initial"])
def test_single_pixel_influence_is_confined_to_rf_window(padding_mode):
    spec = DenoiserSpec(
        blocks=2, convs_per_block=2, hidden_width=8, embed_dim=16, padding_mode=padding_mode
    )
    rf = receptive_field(spec)
    model = init_params(spec, seed=5, zero_init_final=False)
    n = 3 * rf
    base = predict_noise(model, np.zeros((n, n, 3)), 5, 0)
    poked = np.zeros((n, n, 3))
    cy = cx = n // 2
    poked[cy, cx, 0] = 1.0
    diff = np.abs(predict_noise(model, poked, 5, 0) - base).sum(axis=2)
    rows = np.nonzero(diff.any(axis=1))[0]
    cols = np.nonzero(diff.any(axis=0))[0]
    half = rf // 2
    assert rows.min() >= cy - half and rows.max() <= cy + half
    assert cols.min() >= cx - half and cols.max() <= cx + half
    # strict zero outside the window, not merely small
    outside = diff.copy()
    outside[cy - half : cy + half + 1, cx - half : cx + half + 1] = 0.0
    assert not outside.any()


def test_influence_region_is_nonempty():
    model = init_params(SMALL, seed=6, zero_init_final=False)
    n = 33
    base = predict_noise(model, np.zeros((n, n, 3)), 5, 0)
    poked = np.zeros((n, n, 3))
    poked[n // 2, n // 2, :] = 1.0
    assert np.abs(predict_noise(model, poked, 5, 0) - base).max() > 0


def test_interior_translation_equivariance():
    model = init_params(SMALL, seed=7, zero_init_final=False)
    rng = np.random.default_rng(8)
    img = rng.normal(size=(40, 40, 3))
    shift = 4
    out = predict_noise(model, img, 5, 0)
    out_shifted = predict_noise(model, np.roll(img, shift, axis=1), 5, 0)
    # compare interior crops untouched by either border
    m = receptive_field(model.spec)
    a = out[m:-m, m : -m - shift]
    b = out_shifted[m:-m, m + shift : -m]
    np.testing.assert_allclose(a, b, atol=1e-4)


# ------------------------------------------------------------ param count


def test_default_parameter_count_in_budget():
    n = count_params(DenoiserSpec())
    assert n == 1_243_115
    assert 0.8e6 <= n <= 1.5e6


@pytest.mark.parametrize("width", [8, 16, 40])
def test_closed_form_count_matches_enumeration(width):
    spec = DenoiserSpec(hidden_width=width)
    model = Denoiser(spec)
    counted = sum(p.numel() for p in model.parameters())
    assert count_params(spec) == counted


def test_param_count_enumeration_small_variants():
    for spec in (SMALL, DenoiserSpec(blocks=3, convs_per_block=2, hidden_width=12)):
        model = Denoiser(spec)
        assert count_params(spec) == sum(p.numel() for p in model.parameters())


# -------------------------------------------------------------- gradients


def test_gradient_matches_finite_differences():
    spec = SMALL
    model = init_params(spec, seed=9, zero_init_final=False).double()
    rng = np.random.default_rng(10)
    x = torch.tensor(rng.normal(size=(1, 3, 12, 12)))
    t = torch.tensor([5.0], dtype=torch.float64)
    s = torch.tensor([1.0], dtype=torch.float64)

    target = torch.tensor(rng.normal(size=(1, 3, 12, 12)))
    loss = (model(x, t, s) - target).abs().mean()
    loss.backward()

    params = dict(model.named_parameters())
    picks = [
        ("lift.weight", (0, 0, 1, 1)),
        ("lift.bias", (3,)),
        ("blocks.0.convs.0.weight", (2, 1, 0, 2)),
        ("blocks.0.inject.weight", (1, 4)),
        ("blocks.1.convs.1.weight", (0, 0, 2, 2)),
        ("blocks.1.convs.1.bias", (5,)),
        ("fuse.0.weight", (3, 7)),
        ("fuse.2.bias", (2,)),
        ("head.weight", (1, 4, 0, 0)),
        ("head.bias", (0,)),
    ]
    eps = 1e-6
    for name, idx in picks:
        p = params[name]
        analytic = p.grad[idx].item()
        with torch.no_grad():
            keep = p[idx].item()
            p[idx] = keep + eps
            up = (model(x, t, s) - target).abs().mean().item()
            p[idx] = keep - eps
            dn = (model(x, t, s) - target).abs().mean().item()
            p[idx] = keep
        numeric = (up - dn) / (2 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        assert abs(analytic - numeric) / denom < 1e-2, name


def test_init_params_is_seed_deterministic():
    a = init_params(SMALL, seed=11, zero_init_final=False)
    b = init_params(SMALL, seed=11, zero_init_final=False)
    c = init_params(SMALL, seed=12, zero_init_final=False)
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), na
    assert any(
        not torch.equal(pa, pc)
        for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
    )
