import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trap_attack.errors import DimensionMismatchError
from trap_attack.layout import (BoxSegmenter, LayoutMask, LayoutWeights, generate_mask, mask_mean,
                                refine_with_segmentation, resize_bilinear)
from trap_attack.weights_io import read_header

unit = st.floats(0.0, 1.0, allow_nan=False)


@pytest.fixture(scope="module")
def weights():
    return LayoutWeights(seed=0)


def test_architecture_shapes(weights):
    net = weights.net
    assert net.encoder[0].in_features == 1536 and net.encoder[0].out_features == 512
    assert net.encoder[2].out_features == 1024
    convs = [m for m in net.modules() if m.__class__.__name__ == "ConvTranspose2d"]
    assert len(convs) == 5
    raw = weights.raw(np.ones(64), np.ones(64))
    assert raw.shape == (64, 64)


def test_mask_in_unit_range_and_deterministic(weights, rng):
    t, v = rng.normal(size=64), rng.normal(size=64)
    a = generate_mask(t, v, weights, 48, 80)
    b = generate_mask(t, v, weights, 48, 80)
    assert a.shape == (48, 80)
    assert a.values.min() >= 0.0 and a.values.max() <= 1.0
    np.testing.assert_array_equal(a.values, b.values)


def test_saturated_inputs_stay_in_range(weights, rng):
    m = generate_mask(1e3 * rng.normal(size=64), 1e3 * rng.normal(size=64), weights)
    assert np.all(np.isfinite(m.values))
    assert m.values.min() >= 0.0 and m.values.max() <= 1.0


def test_zero_weights_give_half():
    w = LayoutWeights.zeros()
    m = generate_mask(np.ones(64), np.ones(64), w, 32, 32)
    np.testing.assert_array_equal(m.values, np.full((32, 32), 0.5))


def test_input_width_mismatch():
    w = LayoutWeights(in_width=100)
    with pytest.raises(DimensionMismatchError):
        w.raw(np.ones(64), np.ones(64))


def test_expander_pads_text_to_declared_width(weights, rng):
    t, v = rng.normal(size=64), rng.normal(size=64)
    x = weights.layout_input(t, v)
    assert x.shape == (1536,)
    np.testing.assert_array_equal(x[:64], t)  # leading block is the text itself
    np.testing.assert_array_equal(x[-64:], v)
    full = LayoutWeights(in_width=128)
    np.testing.assert_array_equal(full.layout_input(t, v), np.concatenate([t, v]))


def test_refine_examples():
    A = LayoutMask(np.full((4, 4), 0.5))
    assert refine_with_segmentation(A, LayoutMask(np.ones((4, 4)))).values.tolist() == A.values.tolist()
    assert np.all(refine_with_segmentation(A, LayoutMask(np.zeros((4, 4)))).values == 0)
    half = np.zeros((4, 4))
    half[:, :2] = 1.0
    out = refine_with_segmentation(A, LayoutMask(half))
    assert np.all(out.values[:, :2] == 0.5) and np.all(out.values[:, 2:] == 0.0)
    assert mask_mean(out) == 0.25
    with pytest.raises(DimensionMismatchError):
        refine_with_segmentation(A, LayoutMask(np.ones((3, 4))))


def test_mask_mean_examples():
    assert mask_mean(LayoutMask(np.ones((3, 5)))) == 1.0
    assert mask_mean(LayoutMask(np.zeros((3, 5)))) == 0.0
    assert mask_mean(LayoutMask(np.array([[0.0, 0.5], [0.5, 1.0]]))) == 0.5


def test_mask_rejects_out_of_range():
    with pytest.raises(ValueError):
        LayoutMask(np.array([[1.2]]))


@settings(max_examples=50)
@given(arrays(np.float64, (6, 7), elements=unit), arrays(np.float64, (6, 7), elements=unit))
def test_refinement_never_raises_mean(a, fg):
    A = LayoutMask(a)
    out = refine_with_segmentation(A, LayoutMask(fg))
    assert 0.0 <= mask_mean(out) <= mask_mean(A) + 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 8), elements=unit), st.integers(1, 70), st.integers(1, 70))
def test_resize_is_convex(raw, h, w):
    out = resize_bilinear(raw, h, w)
    assert out.shape == (h, w)
    assert out.min() >= raw.min() - 1e-12 and out.max() <= raw.max() + 1e-12


def test_box_segmenter_fraction():
    m = BoxSegmenter(0.75)(np.zeros((64, 64, 3)))
    assert mask_mean(m) == pytest.approx(48 * 48 / 64**2)
    assert m.values[32, 32] == 1.0 and m.values[0, 0] == 0.0


def test_mask_png_and_weights_round_trip(tmp_path, weights, rng):
    m = LayoutMask(np.array([[0.0, 0.5], [1.0, 0.25]]))
    m.save_png(tmp_path / "m.png")
    from PIL import Image

    px = np.asarray(Image.open(tmp_path / "m.png").convert("L"))
    assert px.tolist() == [[0, 128], [255, 64]]
    weights.save(tmp_path / "layout.bin")
    assert read_header(tmp_path / "layout.bin") == ("layout", 1536, 64, 0)
    back = LayoutWeights.load(tmp_path / "layout.bin")
    t, v = rng.normal(size=64), rng.normal(size=64)
    np.testing.assert_allclose(back.raw(t, v), weights.raw(t, v), atol=1e-6)
