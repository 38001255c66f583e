import hashlib
import subprocess
import sys

import numpy as np
import pytest
import torch

from camnet.distance import (FEATURE_SEED, PIXEL_WEIGHT, FeatureNet, batch_distance, feature_net,
                             multiscale_distance, perceptual_distance, selection_distance)
from camnet.errors import ShapeError
from camnet.pyramid import build_pyramid
from oracles import naive_conv2d


def feature_term_oracle(a, b):
    """Feature part of the distance, recomputed with loop convolutions in float64."""
    net = feature_net()

    def feats(x):
        out = []
        for conv in net.stages:
            x = naive_conv2d(x, conv.weight.double().numpy(), conv.bias.double().numpy(), 2, 1)
            x = np.where(x > 0, x, 0.2 * x)
            out.append(x)
        return out

    total = 0.0
    for fa, fb in zip(feats(a), feats(b)):
        ua = fa / np.sqrt((fa ** 2).sum(1, keepdims=True) + 1e-10)
        ub = fb / np.sqrt((fb ** 2).sum(1, keepdims=True) + 1e-10)
        total += ((ua - ub) ** 2).sum(1).mean()
    return total


def test_identity():
    x = torch.rand(3, 8, 8)
    assert perceptual_distance(x, x) == 0.0


def test_one_pixel_difference():
    a = torch.full((1, 3, 4, 4), 0.2)
    b = a.clone()
    b[0, :, 1, 2] += 1.0
    d = perceptual_distance(a, b)
    pixel_part = PIXEL_WEIGHT / 16
    assert pixel_part == pytest.approx(0.00625)
    expected = pixel_part + feature_term_oracle(a.double().numpy(), b.double().numpy())
    assert d > pixel_part
    assert d == pytest.approx(expected, rel=1e-4)


def test_properties_over_random_pairs():
    g = torch.Generator().manual_seed(0)
    a = torch.rand(100, 3, 8, 8, generator=g)
    b = torch.rand(100, 3, 8, 8, generator=g)
    dab, dba = batch_distance(a, b), batch_distance(b, a)
    assert (dab > 0).all()
    torch.testing.assert_close(dab, dba)
    assert (batch_distance(a, a) == 0).all()


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        perceptual_distance(torch.rand(3, 4, 4), torch.rand(3, 8, 8))


def test_gray_input_accepted():
    d = batch_distance(torch.rand(2, 1, 8, 8), torch.rand(2, 1, 8, 8))
    assert d.shape == (2,)


def test_pixel_l2_backend():
    a, b = torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4)
    assert perceptual_distance(a, b, backend="pixel_l2") == 1.0
    with pytest.raises(ValueError):
        perceptual_distance(a, b, backend="lpips")


def test_multiscale_is_sum_of_levels():
    g = torch.Generator().manual_seed(1)
    targets = build_pyramid(torch.rand(2, 3, 8, 8, generator=g), 2)
    outputs = [torch.rand(2, 3, 4, 4, generator=g), torch.rand(2, 3, 8, 8, generator=g)]
    d0 = [perceptual_distance(outputs[0][i], targets.levels[0][i]) for i in range(2)]
    d1 = [perceptual_distance(outputs[1][i], targets.levels[1][i]) for i in range(2)]
    total = multiscale_distance(outputs, targets)
    np.testing.assert_allclose(total.numpy(), np.add(d0, d1), atol=1e-6)


def test_multiscale_degenerate_cases():
    targets = build_pyramid(torch.rand(1, 3, 8, 8), 2)
    assert float(multiscale_distance(targets.levels, targets)[0]) == 0.0
    one = build_pyramid(torch.rand(1, 3, 8, 8), 1)
    out = torch.rand(1, 3, 8, 8)
    assert float(multiscale_distance([out], one)[0]) == pytest.approx(perceptual_distance(out, one.levels[0]))
    with pytest.raises(ShapeError):
        multiscale_distance([out], targets)


def test_multiscale_is_differentiable():
    targets = build_pyramid(torch.rand(1, 3, 8, 8), 2)
    outs = [torch.rand(1, 3, 4, 4, requires_grad=True), torch.rand(1, 3, 8, 8, requires_grad=True)]
    multiscale_distance(outs, targets).sum().backward()
    assert all(o.grad is not None and o.grad.abs().sum() > 0 for o in outs)


def test_selection_distance_matches_perceptual():
    a, b = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    assert float(selection_distance(a, b)[0]) == pytest.approx(perceptual_distance(a, b))


def _weights_digest(net):
    h = hashlib.sha256()
    for p in net.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def test_feature_weights_reproduce_across_processes():
    code = ("from camnet.distance import FeatureNet; import hashlib; h=hashlib.sha256()\n"
            "for p in FeatureNet().parameters(): h.update(p.detach().numpy().tobytes())\n"
            "print(h.hexdigest())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.strip()
    assert out == _weights_digest(FeatureNet(FEATURE_SEED))


def test_feature_weights_frozen():
    assert not any(p.requires_grad for p in feature_net().parameters())
