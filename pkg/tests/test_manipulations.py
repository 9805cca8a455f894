"""Image injection tests: entry-point resolution, restyling, harmonization."""

import numpy as np
import pytest

from sinddm.embedders import ConstantEmbedder, LinearStubEmbedder
from sinddm.guidance import GuidanceConfig
from sinddm.manipulations import (
    InjectionSpec,
    harmonize,
    inject_sample,
    style_transfer,
    text_style_transfer,
)

from conftest import make_test_image


# ------------------------------------------------------------ InjectionSpec


def test_injection_defaults_resolve_to_second_finest_scale(tiny_ckpt):
    s, t = InjectionSpec().resolve(tiny_ckpt)
    assert s == tiny_ckpt.num_scales - 2
    limit = int(tiny_ckpt.plan.start_t[s])
    assert t == max(1, round(0.5 * limit))


def test_injection_rejects_t_zero(tiny_ckpt):
    with pytest.raises(ValueError, match="t=0"):
        InjectionSpec(t=0).resolve(tiny_ckpt)


def test_injection_rejects_out_of_range_entries(tiny_ckpt):
    with pytest.raises(ValueError):
        InjectionSpec(scale=tiny_ckpt.num_scales).resolve(tiny_ckpt)
    limit = int(tiny_ckpt.plan.start_t[1])
    with pytest.raises(ValueError):
        InjectionSpec(scale=1, t=limit + 1).resolve(tiny_ckpt)


def test_injection_explicit_entries_pass_through(tiny_ckpt):
    limit = int(tiny_ckpt.plan.start_t[2])
    assert InjectionSpec(scale=2, t=limit).resolve(tiny_ckpt) == (2, limit)
    assert InjectionSpec(scale=0, t=5).resolve(tiny_ckpt) == (0, 5)


# ------------------------------------------------------------ inject_sample


def test_inject_sample_output_follows_input_dims(tiny_ckpt):
    content = make_test_image(28, 40, seed=100)
    out = inject_sample(tiny_ckpt, content, rng=np.random.default_rng(0))
    assert out.shape == (28, 40, 3)
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_inject_sample_honors_out_dims_override(tiny_ckpt):
    content = make_test_image(48, 48, seed=101)
    out = inject_sample(
        tiny_ckpt, content, rng=np.random.default_rng(1), out_dims=(48, 64)
    )
    assert out.shape == (48, 64, 3)


def test_inject_sample_is_seed_deterministic(tiny_ckpt):
    content = make_test_image(32, 32, seed=102)
    spec = InjectionSpec(scale=2, t=3)
    a = inject_sample(tiny_ckpt, content, spec, np.random.default_rng(7))
    b = inject_sample(tiny_ckpt, content, spec, np.random.default_rng(7))
    c = inject_sample(tiny_ckpt, content, spec, np.random.default_rng(8))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_shallow_injection_stays_close_to_the_content(tiny_ckpt):
    # entering at the finest scale with tiny noise must nearly return the input
    content = make_test_image(48, 48, seed=103)
    spec = InjectionSpec(scale=tiny_ckpt.num_scales - 1, t=1)
    out = inject_sample(tiny_ckpt, content, spec, np.random.default_rng(2))
    assert np.mean((out - content) ** 2) < 0.05


def test_histogram_flag_changes_the_result(tiny_ckpt):
    content = make_test_image(32, 32, seed=104) * 0.3 - 0.5
    plain = inject_sample(
        tiny_ckpt, content, InjectionSpec(scale=2, t=2), np.random.default_rng(3)
    )
    matched = inject_sample(
        tiny_ckpt,
        content,
        InjectionSpec(scale=2, t=2, match_histogram=True),
        np.random.default_rng(3),
    )
    assert not np.array_equal(plain, matched)


# ------------------------------------------------- style_transfer/harmonize


def test_style_transfer_always_matches_histograms(tiny_ckpt):
    content = make_test_image(32, 32, seed=105) * 0.3 - 0.5
    rng_a = np.random.default_rng(4)
    rng_b = np.random.default_rng(4)
    spec = InjectionSpec(scale=2, t=2)
    via_style = style_transfer(tiny_ckpt, content, spec, rng_a)
    via_inject = inject_sample(
        tiny_ckpt, content, InjectionSpec(scale=2, t=2, match_histogram=True), rng_b
    )
    np.testing.assert_array_equal(via_style, via_inject)


def test_harmonize_never_matches_histograms(tiny_ckpt):
    composite = make_test_image(32, 32, seed=106) * 0.3 - 0.5
    rng_a = np.random.default_rng(5)
    rng_b = np.random.default_rng(5)
    spec = InjectionSpec(scale=2, t=2, match_histogram=True)
    via_harmonize = harmonize(tiny_ckpt, composite, spec, rng_a)
    via_inject = inject_sample(
        tiny_ckpt, composite, InjectionSpec(scale=2, t=2), rng_b
    )
    np.testing.assert_array_equal(via_harmonize, via_inject)


def test_style_and_harmonize_keep_content_dims(tiny_ckpt):
    content = make_test_image(30, 36, seed=107)
    spec = InjectionSpec(scale=2, t=2)
    assert style_transfer(tiny_ckpt, content, spec, np.random.default_rng(6)).shape == (
        30,
        36,
        3,
    )
    assert harmonize(tiny_ckpt, content, spec, np.random.default_rng(6)).shape == (
        30,
        36,
        3,
    )


def test_inject_sample_rejects_content_that_starves_the_coarsest_scale(tiny_ckpt):
    content = make_test_image(16, 16, seed=108)
    with pytest.raises(ValueError, match="8x8"):
        inject_sample(tiny_ckpt, content, rng=np.random.default_rng(0))


# --------------------------------------------------------- text style moves


def test_text_style_transfer_runs_on_the_training_image(tiny_ckpt):
    out = text_style_transfer(
        tiny_ckpt,
        "weathered paint",
        LinearStubEmbedder(dim=16, native_resolution=32),
        np.random.default_rng(8),
        cfg=GuidanceConfig(mode="style", prompt="weathered paint", n_crops=2),
    )
    assert out.shape == tiny_ckpt.train_image.shape
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_text_style_transfer_with_constant_embedder_is_deterministic(tiny_ckpt):
    emb = ConstantEmbedder(dim=16, native_resolution=32)
    a = text_style_transfer(tiny_ckpt, "anything", emb, np.random.default_rng(9))
    b = text_style_transfer(tiny_ckpt, "anything", emb, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    assert a.shape == tiny_ckpt.train_image.shape
