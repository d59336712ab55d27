import math
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import relative_error
from mangarestore.imaging import resample
from mangarestore.restorer import (
    MRLossWeights,
    MRNet,
    MRNetConfig,
    binarization_loss,
    confidence_loss,
    convex_upsample,
    convex_weights,
    homogeneity_from_embedding,
    homogeneity_loss,
    intensity_loss,
    intensity_reference,
    mr_forward,
    mr_total_loss,
    pixel_loss,
    target_size,
)
from mangarestore.scale_estimator import he_init
from mangarestore.screentone import ScreentoneSpec, render_screentone

D = torch.float64


def tiny_net():
    torch.manual_seed(0)
    net = MRNet(MRNetConfig(base_channels=8))
    he_init(net)
    return net


def one_hot_logits(b, h, w, index, k2=9, big=1e4):
    logits = torch.zeros(b, k2, h, w, dtype=D)
    logits[:, index] = big
    return logits


def test_config_validation():
    for bad in (dict(upsample_neighborhood=8), dict(upsample_neighborhood=4), dict(noise_channels=0),
                dict(n_ram_blocks=1)):
        with pytest.raises(ValueError):
            MRNetConfig(**bad)


# -- convex upsampling ---------------------------------------------------


def test_one_hot_center_is_nearest_neighbour(rng):
    f = torch.from_numpy(rng.random((1, 1, 7, 9)))
    out = convex_upsample(f, one_hot_logits(1, 7, 9, 4), 17, 20)
    np.testing.assert_array_equal(out[0, 0].numpy(), resample(f[0, 0].numpy(), 17, 20, "nearest"))


def test_uniform_logits_average_neighbourhood(rng):
    f = torch.from_numpy(rng.random((1, 2, 6, 6)))
    out = convex_upsample(f, torch.zeros(1, 9, 6, 6, dtype=D), 6, 6)
    padded = np.pad(f[0].numpy(), ((0, 0), (1, 1), (1, 1)), mode="reflect")
    expected = sum(padded[:, dy:dy + 6, dx:dx + 6] for dy in range(3) for dx in range(3)) / 9
    np.testing.assert_allclose(out[0].numpy(), expected, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(2, 9), st.integers(2, 9), st.floats(1.0, 4.0))
def test_weights_convex_and_output_bounded(seed, h, w, s):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(1, 9, h, w, generator=g, dtype=D) * 5
    th, tw = target_size(h, w, s)
    alpha = convex_weights(logits, th, tw)
    assert (alpha >= 0).all()
    assert torch.allclose(alpha.sum(1), torch.ones(1, th, tw, dtype=D), atol=1e-6)
    f = torch.rand(1, 1, h, w, generator=g, dtype=D)
    out = convex_upsample(f, logits, th, tw)
    gathered = torch.stack([convex_upsample(f, one_hot_logits(1, h, w, i), th, tw) for i in range(9)])
    assert (out >= gathered.min(0).values - 1e-12).all()
    assert (out <= gathered.max(0).values + 1e-12).all()


def test_convex_upsample_rejects_bad_logits():
    with pytest.raises(ValueError):
        convex_upsample(torch.zeros(1, 1, 4, 4), torch.zeros(1, 8, 4, 4), 8, 8)


# -- forward -------------------------------------------------------------


def test_output_shape_rounding():
    out = mr_forward(tiny_net(), np.full((100, 80), 0.5), 1.27)
    assert out.restored.shape == (127, 102)
    assert out.confidence.shape == (100, 80)
    assert out.effective_scale == pytest.approx(1.27)


def test_forward_ranges_and_seeding(rng):
    net = tiny_net()
    img = rng.random((24, 20))
    a, b, c = (mr_forward(net, img, 2.0, rng_seed=s) for s in (1, 1, 2))
    for o in (a, c):
        assert 0 <= o.restored.min() and o.restored.max() <= 1
        assert 0 <= o.confidence.min() and o.confidence.max() <= 1
    np.testing.assert_array_equal(a.restored, b.restored)
    assert not np.array_equal(a.restored, c.restored)


def test_forced_confidence_removes_seed_dependence(rng):
    net = tiny_net()
    img = rng.random((20, 20))
    a = mr_forward(net, img, 1.5, rng_seed=1, confidence_override=1.0)
    b = mr_forward(net, img, 1.5, rng_seed=99, confidence_override=1.0)
    np.testing.assert_array_equal(a.restored, b.restored)


def test_forward_errors():
    net = tiny_net()
    with pytest.raises(ValueError):
        mr_forward(net, np.zeros((20, 20)), 4.5)
    with pytest.raises(ValueError):
        mr_forward(net, np.zeros((20, 20)), 0.9)
    with pytest.raises(ValueError):
        mr_forward(net, np.zeros((12, 40)), 2.0)


def test_out_size_override(rng):
    out = mr_forward(tiny_net(), rng.random((20, 20)), 2.0, out_size=(41, 39))
    assert out.restored.shape == (41, 39)


# -- losses ----------------------------------------------------------------


def t(arr):
    return torch.as_tensor(np.asarray(arr, dtype=np.float64)).view(1, 1, *np.shape(arr))


def test_pixel_loss_examples(rng):
    a = t(rng.random((8, 8)))
    assert pixel_loss(a, a, t(np.ones((4, 4)))).item() == 0
    assert pixel_loss(a, 1 - a, t(np.zeros((4, 4)))).item() == 0
    assert pixel_loss(t(np.zeros((8, 8))), t(np.ones((8, 8))), t(np.full((4, 4), 0.5))).item() == pytest.approx(0.5)
    with pytest.raises(ValueError):
        pixel_loss(a, t(np.zeros((8, 7))), t(np.ones((4, 4))))


def test_pixel_loss_upsamples_confidence_nearest():
    m = t([[1.0, 0.0]])
    assert pixel_loss(t(np.zeros((1, 4))), t([[1.0, 1.0, 1.0, 1.0]]), m).item() == pytest.approx(0.5)
    assert pixel_loss(t(np.zeros((1, 4))), t([[1.0, 1.0, 0.0, 0.0]]), m).item() == pytest.approx(0.5)
    assert pixel_loss(t(np.zeros((1, 4))), t([[0.0, 0.0, 1.0, 1.0]]), m).item() == 0


@pytest.mark.parametrize("value,expected", [(1.0, 0.0), (0.0, 1.0), (0.25, 0.75)])
def test_confidence_loss_examples(value, expected):
    assert confidence_loss(t(np.full((4, 4), value))).item() == pytest.approx(expected)


@pytest.mark.parametrize("value,expected", [(0.5, 0.5), (0.25, 0.25), (0.0, 0.0), (1.0, 0.0)])
def test_binarization_loss_examples(value, expected):
    assert binarization_loss(t(np.full((4, 4), value))).item() == pytest.approx(expected)


def test_intensity_loss_examples():
    yy, xx = np.mgrid[:32, :32]
    board = ((yy + xx) % 2).astype(float)
    assert intensity_loss(t(board), t(board)).item() == 0
    assert intensity_loss(t(board), t(1 - board)).item() < 0.02
    assert intensity_loss(t(np.full((16, 16), 0.3)), t(np.full((16, 16), 0.7))).item() == pytest.approx(0.4)
    with pytest.raises(ValueError):
        intensity_loss(t(board), t(board[:10]))


def test_intensity_reference_shape_and_range(rng):
    ref = intensity_reference(t(rng.random((10, 12))), (25, 30))
    assert ref.shape == (1, 1, 25, 30)
    assert ref.min() >= 0 and ref.max() <= 1


def test_homogeneity_examples():
    phi = torch.zeros(1, 4, 1, 2, dtype=D)
    phi[0, 0, 0, 1] = 2.0
    assert homogeneity_from_embedding(phi, torch.zeros(1, 1, 2, dtype=torch.long)).item() == pytest.approx(1.0)
    flat = torch.ones(1, 4, 3, 3, dtype=D)
    labels = torch.tensor([[[0, 0, 1], [0, 1, 1], [2, 2, 2]]])
    assert homogeneity_from_embedding(flat, labels).item() == 0
    with pytest.raises(ValueError):
        homogeneity_from_embedding(flat, torch.tensor([[[0, 0, 2], [0, 2, 2], [2, 2, 2]]]))


def test_homogeneity_prefers_uniform_regions():
    a = render_screentone(ScreentoneSpec("dot", 6, 45, 0.5), 64, 64)
    b = a.copy()
    b[:, 32:] = render_screentone(ScreentoneSpec("line", 10, 30, 0.3), 64, 64)[:, 32:]
    one_region = np.zeros((64, 64), dtype=np.int64)
    assert homogeneity_loss(t(a), one_region).item() < homogeneity_loss(t(b), one_region).item()
    with pytest.raises(ValueError):
        homogeneity_loss(t(a), one_region[:10])


@given(st.integers(0, 10_000))
def test_loss_bounds(seed):
    g = torch.Generator().manual_seed(seed)
    y, gt, m = (torch.rand(1, 1, 8, 8, generator=g, dtype=D) for _ in range(3))
    assert 0 <= binarization_loss(y).item() <= 0.5
    assert 0 <= confidence_loss(m).item() <= 1
    assert pixel_loss(y, gt, m).item() >= 0
    assert intensity_loss(y, gt).item() >= 0


def test_loss_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(7)

    def rand(*shape):
        return (0.05 + 0.9 * torch.rand(*shape, generator=g, dtype=D)).requires_grad_()

    y, m = rand(1, 1, 8, 8), rand(1, 1, 8, 8)
    gt = torch.rand(1, 1, 8, 8, generator=g, dtype=D)
    labels = torch.tensor(np.repeat([[0] * 4 + [1] * 4], 8, axis=0))
    checks = {
        "pix": (lambda: pixel_loss(y, gt, m), [y, m]),
        "conf": (lambda: confidence_loss(m), [m]),
        "bin": (lambda: binarization_loss(y), [y]),
        "itn": (lambda: intensity_loss(y, gt), [y]),
        "hom": (lambda: homogeneity_loss(y, labels), [y]),
    }
    for name, (fn, params) in checks.items():
        assert relative_error(fn, params) < 1e-4, name


def test_total_loss_vanishes_on_ideal_output():
    white = t(np.ones((32, 32)))
    m = t(np.ones((16, 16)))
    sp = np.zeros((32, 32), dtype=np.int64)
    total, parts = mr_total_loss(white, m, None, i_gt=white, superpixels=sp)
    assert total.item() == pytest.approx(0, abs=1e-12)
    assert set(parts) == {"pix", "conf", "bin", "itn", "hom"}
    board = t((np.indices((32, 32)).sum(0) % 2).astype(float))
    total, parts = mr_total_loss(board, m, board)
    assert total.item() == 0 and set(parts) == {"conf", "bin", "itn"}


def test_total_loss_weights_and_modes(rng):
    y, gt = t(rng.random((16, 16))), t(rng.random((16, 16)))
    m = t(rng.random((8, 8)))
    sp = np.repeat([[0] * 8 + [1] * 8], 16, axis=0)
    total, p = mr_total_loss(y, m, None, i_gt=gt, superpixels=sp)
    expected = p["pix"] + 0.5 * p["conf"] + 0.5 * p["bin"] + 0.5 * p["itn"] + 0.02 * p["hom"]
    assert total.item() == pytest.approx(expected.item())
    no_hom, p0 = mr_total_loss(y, m, None, i_gt=gt, weights=MRLossWeights(gamma=0.0))
    assert no_hom.item() == pytest.approx((total - 0.02 * p["hom"]).item())
    unsup, pu = mr_total_loss(y, m, gt)
    assert unsup.item() == pytest.approx((0.5 * pu["conf"] + 0.5 * pu["bin"] + 0.5 * pu["itn"]).item())
    with pytest.raises(ValueError):
        mr_total_loss(y, m, None, supervised=True)
    with pytest.raises(ValueError):
        mr_total_loss(y, m, None, i_gt=gt)


@pytest.mark.parametrize("s,y0", [(1.5, 4), (2.0, 3), (1.25, 8), (3.0, 5)])
def test_nominal_scale_upsampling_commutes_with_aligned_crops(s, y0):
    # a crop starting where y0 * s is an integer sees the same sampling phases
    g = torch.Generator().manual_seed(0)
    feat = torch.randn(1, 2, 24, 24, generator=g, dtype=torch.float64)
    logits = torch.randn(1, 9, 24, 24, generator=g, dtype=torch.float64)
    full = convex_upsample(feat, logits, round(24 * s), round(24 * s), scale=s)
    n = 12
    crop = convex_upsample(feat[..., y0:y0 + n, y0:y0 + n], logits[..., y0:y0 + n, y0:y0 + n],
                           round(n * s), round(n * s), scale=s)
    o, m = round(y0 * s), math.ceil(2 * s)  # skip outputs whose neighbourhood touches the crop border
    np.testing.assert_allclose(crop[..., m:-m, m:-m], full[..., o + m:o + crop.shape[-2] - m, o + m:o + crop.shape[-1] - m],
                               atol=1e-12)


def test_nominal_scale_keeps_phase_when_rounding_changes_size():
    # 85 px at s = 1.5 rounds to 128 outputs; the first 126 follow the exact 2:3 pattern
    g = torch.Generator().manual_seed(1)
    feat = torch.randn(1, 1, 85, 4, generator=g, dtype=torch.float64)
    logits = torch.zeros(1, 9, 85, 4, dtype=torch.float64)
    logits[:, 4] = 50.0
    out = convex_upsample(feat, logits, 128, 6, scale=1.5)
    idx = np.floor((np.arange(126) + 0.5) / 1.5).astype(int)
    np.testing.assert_allclose(out[0, 0, :126, 0], feat[0, 0, idx, 0], atol=1e-12)
