import math
import warnings

import numpy as np
import pytest

from brmil import numcore as nc
from brmil.encoders import Projection
from brmil.losses import (DistillConfig, LossConfig, alpha_schedule, bce_smoothed, cosine_gram, distill_loss,
                          focal_mix, kd_bernoulli, relational_loss)
from brmil.numcore import Tensor

LOG2 = math.log(2.0)


def test_bce_symmetric_point():
    assert bce_smoothed(np.array([0.0]), [1]).item() == pytest.approx(LOG2, abs=1e-12)


def test_bce_smoothing_floor():
    # -(0.95 log s(50) + 0.05 log s(-50)) with log s(-50) = -50 - log1p(e^-50)
    want = -(0.95 * -math.log1p(math.exp(-50)) + 0.05 * (-50 - math.log1p(math.exp(-50))))
    got = bce_smoothed(np.array([50.0]), [1]).item()
    assert got == pytest.approx(want, rel=1e-12) and got == pytest.approx(2.5, abs=1e-9)


def test_bce_pos_weight_scales_positives_only():
    cfg = LossConfig(pos_weight=3.0)
    assert bce_smoothed(np.array([0.4]), [1], cfg).item() == pytest.approx(
        3 * bce_smoothed(np.array([0.4]), [1]).item())
    assert bce_smoothed(np.array([0.4]), [0], cfg).item() == pytest.approx(
        bce_smoothed(np.array([0.4]), [0]).item())


def test_focal_symmetric_point():
    assert focal_mix(np.array([0.0]), [1]).item() == pytest.approx(0.21 * LOG2, abs=1e-12)


@pytest.mark.parametrize("z,y", [(0.3, 1), (-1.2, 0), (2.0, 0)])
def test_focal_gamma_zero_collapses(z, y):
    cfg = LossConfig(gamma=0.0, alpha=0.5)
    bce = bce_smoothed(np.array([z]), [y], cfg).item()
    assert focal_mix(np.array([z]), [y], cfg).item() == pytest.approx((0.01 + 0.5) * bce, rel=1e-12)


def test_focal_confident_correct():
    bce = bce_smoothed(np.array([10.0]), [1]).item()
    total = focal_mix(np.array([10.0]), [1]).item()
    assert total == pytest.approx(0.01 * bce, rel=1e-2)


def test_alpha_schedule():
    assert alpha_schedule(0.0) == pytest.approx(0.8)
    assert alpha_schedule(1.0) == pytest.approx(0.5)
    assert alpha_schedule(0.5) == pytest.approx(0.65)
    vals = [alpha_schedule(f) for f in np.linspace(0, 1, 11)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_self_distillation_fixed_point(rng):
    h = rng.normal(size=(4, 5))
    z = rng.normal(size=4)
    proj = Projection(5, 5)
    proj.params["w"].data = np.eye(5)
    parts = distill_loss(Tensor(h), Tensor(z), h, z, [1, 0, 1, 0], 0.3, proj)
    assert abs(parts.kd) < 1e-12 and parts.feat == 0.0 and abs(parts.rel) < 1e-12


def test_kd_is_nonnegative(rng):
    for _ in range(20):
        assert kd_bernoulli(rng.normal(size=6), rng.normal(size=6), 2.0).item() >= -1e-12


def test_relational_identical_embeddings():
    h = np.tile(np.array([1.0, -2.0, 0.5]), (2, 1))
    np.testing.assert_allclose(cosine_gram(h).data, np.ones((2, 2)), atol=1e-12)
    assert relational_loss(h, Tensor(h * 3.0)).item() == pytest.approx(0.0, abs=1e-20)


def test_relational_needs_two(rng):
    proj = Projection(3, 4)
    with pytest.warns(RuntimeWarning, match="batch >= 2"):
        parts = distill_loss(Tensor(rng.normal(size=(1, 3))), Tensor(np.zeros(1)), rng.normal(size=(1, 4)),
                             np.zeros(1), [1], 0.0, proj)
    assert parts.rel == 0.0


def test_distill_total_combination(rng):
    proj = Projection(3, 4, 2)
    hs, zs = rng.normal(size=(5, 3)), rng.normal(size=5)
    ht, zt = rng.normal(size=(5, 4)), rng.normal(size=5)
    y = [1, 0, 0, 1, 1]
    cfg = DistillConfig()
    parts = distill_loss(Tensor(hs), Tensor(zs), ht, zt, y, 0.5, proj, cfg)
    want = 0.35 * parts.sup + 0.65 * parts.kd + 0.1 * parts.feat + 1.0 * parts.rel
    assert parts.total.item() == pytest.approx(want, rel=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=1.0)
    with pytest.raises(ValueError):
        DistillConfig(temperature=0)
