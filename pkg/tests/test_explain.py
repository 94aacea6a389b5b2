import numpy as np
import pytest
from PIL import Image

from causalshot import autodiff as ad
from causalshot import backbone
from causalshot import explain as X
from causalshot.causality import CausalityMethod
from causalshot.model import CausalBDCNet, stack_pixels


@pytest.fixture(scope="module")
def nets():
    cfg = backbone.preset("desk")
    return {"baseline": CausalBDCNet(cfg, "none", seed=0),
            "mulcat": CausalBDCNet(cfg, "mulcat", CausalityMethod(), seed=0),
            "mulcatbool": CausalBDCNet(cfg, "mulcatbool", CausalityMethod(), seed=0)}


@pytest.fixture(scope="module")
def case(small_pool):
    test = [im for im in small_pool if im.subset == "test"]
    lg = next(im for im in test if im.grade_label == "LG")
    hg = next(im for im in test if im.grade_label == "HG")
    return test[5], stack_pixels([lg, hg]), [0, 1]


def _heatmap(net, case, target=1, scale=1.0):
    image, support, labels = case
    protos = X.episode_prototypes(net, support, labels, 2) * scale
    return X.grad_cam(net, image, protos, target)


@pytest.mark.parametrize("name", ["baseline", "mulcat", "mulcatbool"])
def test_heatmap_contract(nets, case, name):
    hm = _heatmap(nets[name], case)
    assert hm.values.shape == case[0].pixels.shape
    assert hm.values.min() >= 0
    assert hm.zero or hm.values.max() == pytest.approx(1.0)
    assert hm.model_variant == name and hm.target_class == 1
    again = _heatmap(nets[name], case)
    assert again.values.tobytes() == hm.values.tobytes()


@pytest.mark.parametrize("name", ["baseline", "mulcat"])
def test_positive_rescaling_invariance(nets, case, name):
    a = _heatmap(nets[name], case)
    b = _heatmap(nets[name], case, scale=7.5)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)
    assert np.argmax(a.values) == np.argmax(b.values)


def test_single_active_pixel_peak():
    acts = np.zeros((1, 4, 4))
    acts[0, 2, 1] = 3.0
    cam = X.cam_from_gradients(acts, np.full((1, 4, 4), 0.5))
    assert np.unravel_index(np.argmax(cam), cam.shape) == (2, 1)
    assert np.count_nonzero(cam) == 1


def test_sign_flip_is_complementary(rng):
    acts = np.abs(rng.normal(size=(6, 4, 4)))
    grads = rng.normal(size=(6, 4, 4))
    pos = X.cam_from_gradients(acts, grads)
    neg = X.cam_from_gradients(acts, -grads)
    lin = np.tensordot(grads.mean(axis=(1, 2)), acts, axes=(0, 0))
    np.testing.assert_allclose(pos - neg, lin, atol=1e-12)
    assert not np.any((pos > 0) & (neg > 0))
    # channel by channel: each weight changes sign and nothing else
    for c in range(6):
        g = np.zeros_like(grads)
        g[c] = grads[c]
        np.testing.assert_allclose(X.cam_from_gradients(acts, g) - X.cam_from_gradients(acts, -g),
                                   grads[c].mean() * acts[c], atol=1e-12)


def test_negated_prototypes_through_model(nets, case):
    # negating the target score swaps the ReLU gate of the full map
    net = nets["mulcat"]
    image, support, labels = case
    protos = X.episode_prototypes(net, support, labels, 2)
    pos = X.grad_cam(net, image, protos, 1, size=4)
    neg = X.grad_cam(net, image, -protos, 1, size=4)
    assert not np.any((pos.values > 0) & (neg.values > 0))


def test_channel_count_hook(nets, case):
    image, support, labels = case
    base = X.episode_prototypes(nets["baseline"], support, labels, 2)
    cause = X.episode_prototypes(nets["mulcat"], support, labels, 2)
    assert base.shape == (2, 32, 32) and cause.shape == (2, 64, 64)
    with pytest.raises(ad.ShapeError):
        X.grad_cam(nets["baseline"], image, cause, 0)
    with pytest.raises(ad.ShapeError):
        X.grad_cam(nets["mulcat"], image, base, 0)


def test_target_class_validation(nets, case):
    with pytest.raises(ValueError):
        _heatmap(nets["baseline"], case, target=2)


def test_zero_heatmap_flag(nets, case):
    image, support, labels = case
    hm = X.grad_cam(nets["baseline"], image, np.zeros((2, 32, 32)), 0)
    assert hm.zero and not hm.values.any()


def test_box_mass():
    v = np.zeros((8, 8))
    v[1:3, 1:3] = 1.0
    v[6, 6] = 4.0
    assert X.box_mass(v, [[0, 0, 4, 4]]) == pytest.approx(0.5)
    assert X.box_mass(v, [[0, 0, 4, 4], [6, 6, 7, 7]]) == pytest.approx(1.0)
    assert X.box_mass(np.zeros((3, 3)), [[0, 0, 1, 1]]) == 0.0


def test_lut_is_monotone_in_lightness():
    assert X.LUT.shape == (256, 3)
    luma = X.LUT @ np.array([0.299, 0.587, 0.114])
    assert np.all(np.diff(luma) >= -1e-9)


class TestPanel:
    def test_five_columns_and_bytes(self, nets, case, tmp_path):
        image = case[0]
        maps = {k: _heatmap(n, case) for k, n in nets.items()}
        a = X.comparison_panel(tmp_path / "a", 7, image, image.mask, maps, correct={k: True for k in maps})
        b = X.comparison_panel(tmp_path / "b", 7, image, image.mask, maps, correct={k: True for k in maps})
        assert a.name == b.name == "case-7_baseline-ok_mulcat-ok_mulcatbool-ok.png"
        assert a.read_bytes() == b.read_bytes()
        with Image.open(a) as im:
            s = image.pixels.shape[0]
            assert im.size == (4 * (5 * s + 4), 4 * s)

    def test_zero_and_absent(self, nets, case, tmp_path):
        image = case[0]
        zero = X.Heatmap(np.zeros(image.pixels.shape), 0, "mulcat", zero=True)
        path = X.comparison_panel(tmp_path, "z", image, image.mask, {"mulcat": zero}, scale=1)
        assert "absent-baseline" in path.name and "zero-mulcat" in path.name and "absent-mulcatbool" in path.name
        s = image.pixels.shape[0]
        arr = np.asarray(Image.open(path))
        assert np.all(arr[:, 3 * (s + 1):3 * (s + 1) + s] == 255)

    def test_resolution_mismatch(self, case, tmp_path):
        image = case[0]
        bad = X.Heatmap(np.zeros((4, 4)), 0, "baseline")
        with pytest.raises(ad.ShapeError):
            X.comparison_panel(tmp_path, 1, image, image.mask, {"baseline": bad})
