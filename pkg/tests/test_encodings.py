import math

import numpy as np
import pytest
import torch

from daydream.config import ConfigError
from daydream.encodings import BucketSpec, symexp, symlog, two_hot_decode, two_hot_encode


def test_symlog_fixed_points():
    assert symlog(0.0) == 0.0
    assert symlog(math.e - 1.0) == pytest.approx(1.0, abs=1e-12)
    assert symlog(-(math.e**2 - 1.0)) == pytest.approx(-2.0, abs=1e-12)


def test_symexp_fixed_points():
    assert symexp(0.0) == 0.0
    assert symexp(1.0) == pytest.approx(math.e - 1.0, abs=1e-12)
    assert symexp(symlog(17.3)) == pytest.approx(17.3, rel=1e-5)


def test_symlog_properties():
    xs = torch.linspace(-50, 50, 201, dtype=torch.float64)
    ys = symlog(xs)
    assert torch.allclose(ys, -symlog(-xs))            # odd
    assert (ys[1:] > ys[:-1]).all()                    # monotone
    assert (ys.abs() <= xs.abs() + 1e-12).all()        # contraction


def test_symlog_symexp_round_trip_bulk():
    gen = torch.Generator().manual_seed(0)
    xs = (torch.rand(10_000, generator=gen, dtype=torch.float64) * 2 - 1) * 1e6
    back = symexp(symlog(xs))
    rel = (back - xs).abs() / xs.abs().clamp(min=1.0)
    assert rel.max().item() < 1e-6


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_non_finite_rejected(bad):
    with pytest.raises(ValueError):
        symlog(bad)
    with pytest.raises(ValueError):
        symexp(bad)
    with pytest.raises(ValueError):
        two_hot_encode(bad, BucketSpec(5, -1.0, 1.0))


def test_bucket_spec_invariants():
    spec = BucketSpec(255, -20.0, 20.0)
    centers = spec.centers
    assert centers[0].item() == -20.0 and centers[-1].item() == 20.0
    diffs = centers[1:] - centers[:-1]
    assert (diffs > 0).all()
    assert (diffs - spec.step).abs().max().item() <= 1e-9 * spec.step


def test_bucket_spec_rejects_bad_configs():
    with pytest.raises(ConfigError):
        BucketSpec(1, -1.0, 1.0)
    with pytest.raises(ConfigError):
        BucketSpec(5, 2.0, -2.0)
    with pytest.raises(ConfigError):
        BucketSpec(3, -1.0, 1.0, centers=torch.tensor([-1.0, 0.5, 1.0], dtype=torch.float64))


def test_two_hot_on_center_is_strict_one_hot():
    spec = BucketSpec(255, -20.0, 20.0)
    w = two_hot_encode(spec.centers[7].item(), spec)
    assert w[7].item() == 1.0
    assert torch.count_nonzero(w).item() == 1


def test_two_hot_midpoint():
    spec = BucketSpec(5, -2.0, 2.0)
    w = two_hot_encode(0.5, spec)
    assert torch.allclose(w, torch.tensor([0.0, 0.0, 0.5, 0.5, 0.0], dtype=torch.float64))


def test_two_hot_clamps_to_extremes():
    spec = BucketSpec(255, -20.0, 20.0)
    w = two_hot_encode(100.0, spec)
    assert w[-1].item() == 1.0 and torch.count_nonzero(w).item() == 1
    w = two_hot_encode(-100.0, spec)
    assert w[0].item() == 1.0 and torch.count_nonzero(w).item() == 1


def test_decode_one_hot_and_halves():
    spec = BucketSpec(5, -2.0, 2.0)
    one_hot = torch.zeros(5, dtype=torch.float64)
    one_hot[3] = 1.0
    assert float(two_hot_decode(one_hot, spec)) == spec.centers[3].item()
    w = torch.tensor([0.0, 0.0, 0.5, 0.5, 0.0], dtype=torch.float64)
    assert float(two_hot_decode(w, spec)) == pytest.approx(0.5, abs=1e-12)


def test_decode_uniform_weights_symmetric():
    spec = BucketSpec(255, -20.0, 20.0)
    uniform = torch.full((255,), 1.0 / 255.0, dtype=torch.float64)
    assert abs(float(two_hot_decode(uniform, spec))) < 1e-6


def test_decode_shape_mismatch():
    spec = BucketSpec(5, -2.0, 2.0)
    with pytest.raises(ValueError):
        two_hot_decode(torch.ones(7), spec)


def test_encode_decode_round_trip_equals_clamp():
    spec = BucketSpec(255, -20.0, 20.0)
    gen = torch.Generator().manual_seed(1)
    vs = (torch.rand(10_000, generator=gen, dtype=torch.float64) * 2 - 1) * 30.0
    decoded = two_hot_decode(two_hot_encode(vs, spec), spec)
    clamped = vs.clamp(-20.0, 20.0)
    assert (decoded - clamped).abs().max().item() < 1e-6


def test_full_round_trip_through_symlog():
    spec = BucketSpec(255, -20.0, 20.0)
    gen = torch.Generator().manual_seed(2)
    vs = (torch.rand(10_000, generator=gen, dtype=torch.float64) * 2 - 1) * 1e4
    back = symexp(two_hot_decode(two_hot_encode(symlog(vs), spec), spec))
    rel = (back - vs).abs() / vs.abs().clamp(min=1.0)
    assert rel.max().item() < 1e-4


def test_two_hot_vector_invariants_bulk():
    spec = BucketSpec(255, -20.0, 20.0)
    gen = torch.Generator().manual_seed(3)
    vs = (torch.rand(10_000, generator=gen, dtype=torch.float64) * 2 - 1) * 25.0
    weights = two_hot_encode(vs, spec)
    sums = weights.sum(-1)
    assert (sums - 1.0).abs().max().item() < 1e-6
    assert (weights >= 0).all()
    nonzero = weights > 0
    counts = nonzero.sum(-1)
    assert (counts <= 2).all()
    two = counts == 2
    first = nonzero[two].double().argmax(-1)
    last = spec.count - 1 - nonzero[two].flip(-1).double().argmax(-1)
    assert ((last - first) == 1).all()


def test_encode_piecewise_linear_between_centers():
    spec = BucketSpec(9, -4.0, 4.0)
    gen = torch.Generator().manual_seed(4)
    for _ in range(50):
        i = int(torch.randint(spec.count - 1, (), generator=gen))
        alpha = torch.rand((), generator=gen, dtype=torch.float64).item()
        a, b = spec.centers[i].item(), spec.centers[i + 1].item()
        blended = two_hot_encode(alpha * a + (1 - alpha) * b, spec)
        expected = alpha * two_hot_encode(a, spec) + (1 - alpha) * two_hot_encode(b, spec)
        assert (blended - expected).abs().max().item() < 1e-9


def test_decode_linearity():
    spec = BucketSpec(9, -4.0, 4.0)
    gen = torch.Generator().manual_seed(5)
    w1 = torch.rand(9, generator=gen, dtype=torch.float64)
    w2 = torch.rand(9, generator=gen, dtype=torch.float64)
    for alpha in (0.0, 0.3, 0.7, 1.0):
        lhs = two_hot_decode(alpha * w1 + (1 - alpha) * w2, spec)
        rhs = alpha * two_hot_decode(w1, spec) + (1 - alpha) * two_hot_decode(w2, spec)
        assert abs(float(lhs - rhs)) < 1e-12
