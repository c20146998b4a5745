import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import manual_guided_backprop_mlp

from satkit.data import Annotation
from satkit.models import build_model, feature_tap, forward
from satkit.saliency import (EnsembleSelector, SaliencyMap, binarize, compute_saliency, grad_cam,
                             guided_backprop, guided_relus, integrated_gradients, smoothgrad,
                             vanilla_gradient, weak_saliency_from_annotation)


def test_saliency_map_validation():
    with pytest.raises(ValueError):
        SaliencyMap(np.array([0.5, 1.0]), "signed", "bbox", "t", 0)
    with pytest.raises(ValueError):
        SaliencyMap(np.array([np.nan]), "raw", "gradient", "t", 0)
    with pytest.raises(ValueError):
        SaliencyMap(np.zeros(2), "fuzzy", "gradient", "t", 0)


def test_guided_backprop_matches_manual_pass():
    gen = torch.Generator().manual_seed(0)
    for trial in range(10):
        model = build_model("mlp", (1, 2, 3), 4, seed=trial, hidden=7, dtype=torch.float64)
        x = torch.randn(1, 1, 2, 3, generator=gen, dtype=torch.float64)
        cls = trial % 4
        got = guided_backprop(model, x, cls).flatten()
        want = manual_guided_backprop_mlp(model.fc1.weight.detach(), model.fc1.bias.detach(),
                                          model.fc2.weight.detach(), x.flatten(), cls)
        assert torch.equal(got, want)


def test_guided_backprop_restores_relus():
    model = build_model("small_cnn", (3, 8, 8), 2, seed=0, dtype=torch.float64)
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    before = vanilla_gradient(model, x, 1)
    guided_backprop(model, x, 1)
    assert torch.equal(vanilla_gradient(model, x, 1), before)


def test_guided_backprop_rejects_other_activations():
    model = nn.Sequential(nn.Flatten(), nn.Linear(4, 3), nn.Tanh(), nn.Linear(3, 2))
    with pytest.raises(ValueError):
        with guided_relus(model):
            pass


def test_gradient_of_linear_model_is_weight_row():
    model = build_model("linear", (1, 1, 5), 3, seed=0, dtype=torch.float64)
    x = torch.rand(2, 1, 1, 5, dtype=torch.float64)
    g = compute_saliency("gradient", model, x, torch.tensor([0, 2]))
    assert torch.equal(g[1].flatten(), model.fc.weight[2].detach())


def test_integrated_gradients_linear_is_exact():
    model = build_model("linear", (1, 2, 2), 3, seed=1, dtype=torch.float64)
    x = torch.rand(3, 1, 2, 2, dtype=torch.float64)
    ig = integrated_gradients(model, x, 1, m_steps=3)
    want = x * model.fc.weight[1].detach().view(1, 1, 2, 2)
    assert torch.allclose(ig, want, atol=1e-14)


def test_integrated_gradients_completeness_on_cnn():
    model = build_model("small_cnn", (3, 16, 16), 4, seed=3, dtype=torch.float64)
    x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    cls = torch.tensor([0, 3])
    ig = integrated_gradients(model, x, cls, m_steps=512)
    with torch.no_grad():
        gap = forward(model, x)[torch.arange(2), cls] - forward(model, torch.zeros_like(x))[torch.arange(2), cls]
    err = (ig.sum(dim=(1, 2, 3)) - gap).abs().max().item()
    assert err <= 1e-3


def test_integrated_gradients_zero_at_baseline():
    model = build_model("small_cnn", (3, 8, 8), 2, seed=0)
    x = torch.rand(1, 3, 8, 8)
    assert torch.count_nonzero(integrated_gradients(model, x, 0, baseline=x, m_steps=4)) == 0


def test_smoothgrad_without_noise_is_gradient():
    model = build_model("small_cnn", (3, 8, 8), 2, seed=0)
    x = torch.rand(2, 3, 8, 8)
    assert torch.allclose(smoothgrad(model, x, 1, n=3, sigma=0.0), vanilla_gradient(model, x, 1))


def test_smoothgrad_seeded():
    model = build_model("mlp", (1, 4, 4), 2, seed=0)
    x = torch.rand(1, 1, 4, 4)
    a = smoothgrad(model, x, 0, n=4, sigma=0.2, seed=5)
    assert torch.equal(a, smoothgrad(model, x, 0, n=4, sigma=0.2, seed=5))


@pytest.mark.parametrize("method", ["gradcam", "gradcam_pp"])
def test_cam_nonnegative_and_shaped(method):
    model = build_model("mini_resnet", (3, 16, 16), 3, seed=0)
    x = torch.rand(2, 3, 16, 16)
    cam = compute_saliency(method, model, x, torch.tensor([0, 2]))
    assert cam.shape == x.shape
    assert cam.min() >= 0
    assert torch.equal(cam[:, 0], cam[:, 2])


def test_cam_single_map_proportional_to_activation():
    # one feature map feeding a positive linear head through global pooling:
    # the gradient w.r.t. A is the same positive constant at every position
    model = build_model("small_cnn", (3, 8, 8), 2, seed=0, channels=(4, 4, 4, 1), dtype=torch.float64)
    with torch.no_grad():
        model.head.weight.abs_()
        model.features[3][0].bias.fill_(0.05)
    x = torch.rand(1, 3, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    A, g = feature_tap(model, x, 1)
    assert torch.allclose(g, g.flatten()[0].expand_as(g)) and g.flatten()[0] > 0
    ref = torch.nn.functional.interpolate(torch.relu(A), size=(8, 8), mode="bilinear", align_corners=False)
    assert ref.max() > 0
    for variant in ("gradcam", "gradcam_pp"):
        cam = grad_cam(model, x, 1, variant)[:, :1]
        scale = cam.max() / ref.max()
        assert torch.allclose(cam, scale * ref, atol=1e-12)
    a = grad_cam(model, x, 1, "gradcam")
    b = grad_cam(model, x, 1, "gradcam_pp")
    assert torch.allclose(a / a.max(), b / b.max(), atol=1e-12)


def test_guided_cam_is_product():
    model = build_model("small_cnn", (3, 8, 8), 2, seed=1)
    x = torch.rand(1, 3, 8, 8)
    want = grad_cam(model, x, 0, "gradcam_pp") * guided_backprop(model, x, 0)
    assert torch.allclose(compute_saliency("guided_gradcam_pp", model, x, 0), want)


def test_unknown_method():
    with pytest.raises(ValueError):
        compute_saliency("deeplift", build_model("mlp", (1, 2, 2), 2), torch.rand(1, 1, 2, 2), 0)


# --- weak saliency -------------------------------------------------------------


def test_weak_saliency_counts():
    m = weak_saliency_from_annotation(Annotation("bounding_box", bbox=(2, 1, 6, 4)), (3, 8, 8))
    assert m.kind == "signed" and m.method == "bbox"
    assert (m.values == 1).sum() == 3 * 4 * 3
    assert (m.values == -1).sum() == 3 * (64 - 12)


def test_weak_saliency_full_box():
    m = weak_saliency_from_annotation(Annotation("bounding_box", bbox=(0, 0, 8, 8)), (1, 8, 8))
    assert (m.values == 1).all()


@settings(max_examples=30, deadline=None)
@given(x0=st.integers(0, 6), y0=st.integers(0, 6), w=st.integers(1, 6), h=st.integers(1, 6))
def test_weak_saliency_complement_negates(x0, y0, w, h):
    x1, y1 = min(8, x0 + w), min(8, y0 + h)
    box = Annotation("bounding_box", bbox=(x0, y0, x1, y1))
    comp = Annotation("segmentation_mask", mask=~box.to_mask(8, 8))
    a = weak_saliency_from_annotation(box, (2, 8, 8)).values
    b = weak_saliency_from_annotation(comp, (2, 8, 8)).values
    assert np.array_equal(a, -b)


# --- binarize ------------------------------------------------------------------


def test_binarize_sign():
    v = torch.tensor([[0.5, -2.0, 0.0]])
    assert binarize(v).tolist() == [[1.0, -1.0, 0.0]]


def test_binarize_topq():
    v = torch.tensor([[0.1, -3.0, 2.0, -0.2]])
    assert binarize(v, "topq", q=0.5).tolist() == [[-1.0, -1.0, 1.0, -1.0]]
    with pytest.raises(ValueError):
        binarize(v, "topq", q=0)


def test_binarize_saliency_map():
    m = binarize(SaliencyMap(np.array([[[0.3, -0.1]]], np.float32), "raw", "gradient", "t", 1))
    assert m.kind == "signed" and m.values.tolist() == [[[1.0, -1.0]]]


# --- ensembles -----------------------------------------------------------------


class _Store(dict):
    def get(self, key):
        return self[key]


def _member(tag, ids):
    return _Store({i: SaliencyMap(np.full((1, 1, 1), tag, np.float32), "signed", "x", str(tag), 0)
                   for i in ids})


def test_ensemble_needs_two_members():
    with pytest.raises(ValueError):
        EnsembleSelector([_member(1, ["a"])])


def test_ensemble_fraction_is_binomial():
    n = 20_000
    ids = [f"s{i}" for i in range(n)]
    sel = EnsembleSelector([_member(1, ids), _member(-1, ids)], selection_seed=7)
    picks = sel.get_many(ids).flatten()
    frac = (picks == 1).mean()
    assert abs(frac - 0.5) <= 4 * math.sqrt(0.25 / n)
    assert np.array_equal(picks, sel.get_many(ids).flatten())
    other = EnsembleSelector([_member(1, ids), _member(-1, ids)], selection_seed=8)
    assert not np.array_equal(picks, other.get_many(ids).flatten())
    assert sel.covers(ids)
