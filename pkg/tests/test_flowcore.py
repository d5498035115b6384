import numpy as np
import pytest

from symupe import flowcore
from symupe.errors import DomainError, ShapeError
from symupe.flowcore import FlowSample


def _sample(x0, x1, t, sigma_min=1e-4):
    return FlowSample(np.asarray(x0, dtype=float), np.asarray(x1, dtype=float), t, sigma_min)


def test_interpolation_endpoints():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(5, 4))
    x1 = rng.normal(size=(5, 4))
    assert np.array_equal(flowcore.ot_interpolate(_sample(x0, x1, 0.0)), x0)
    at_one = flowcore.ot_interpolate(_sample(x0, x1, 1.0, sigma_min=1e-4))
    assert np.allclose(at_one, 1e-4 * x0 + x1)


def test_interpolation_scalar_case():
    # x0=1, x1=3, t=0.5, sigma_min->0: x_t = 0.5*1 + 0.5*3 = 2
    out = flowcore.ot_interpolate(_sample([1.0], [3.0], 0.5, sigma_min=1e-12))
    assert out[0] == pytest.approx(2.0)


def test_interpolation_domain_error():
    with pytest.raises(DomainError):
        flowcore.ot_interpolate(_sample([0.0], [1.0], 1.5))


def test_target_field_cases():
    assert np.allclose(flowcore.ot_target_field(_sample([0.0], [5.0], 0.3)), [5.0])
    assert np.allclose(flowcore.ot_target_field(_sample([2.0], [5.0], 0.1, sigma_min=1.0)), [5.0])
    out = flowcore.ot_target_field(_sample([2.0], [5.0], 0.9, sigma_min=1e-4))
    assert out[0] == pytest.approx(5.0 - 0.9999 * 2.0)  # 3.0002


def test_path_field_consistency_finite_difference():
    # d/dt of the path must equal the target field; central difference
    # at fp64 to relative error < 1e-8.
    rng = np.random.default_rng(1)
    for _ in range(20):
        x0 = rng.normal(size=(6, 4))
        x1 = rng.normal(size=(6, 4))
        sigma = float(rng.uniform(1e-5, 1e-2))
        t = float(rng.uniform(0.1, 0.9))
        h = 1e-6
        up = flowcore.ot_interpolate(_sample(x0, x1, t + h, sigma))
        down = flowcore.ot_interpolate(_sample(x0, x1, t - h, sigma))
        fd = (up - down) / (2 * h)
        u = flowcore.ot_target_field(_sample(x0, x1, t, sigma))
        rel = np.abs(fd - u) / (np.abs(u) + 1e-12)
        assert rel.max() < 1e-8


def test_masked_loss_zero_when_exact():
    rng = np.random.default_rng(2)
    u = rng.normal(size=(4, 4))
    mask = np.array([True, False, True, True])
    loss, degenerate = flowcore.masked_cfm_loss(u, u, mask)
    assert loss == 0.0 and not degenerate


def test_masked_loss_all_false_returns_zero_with_flag():
    rng = np.random.default_rng(3)
    loss, degenerate = flowcore.masked_cfm_loss(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), np.zeros(3, bool))
    assert loss == 0.0 and degenerate


def test_masked_loss_hand_sum():
    # Two notes, one masked, per-feature errors (1,1,1,1): mean over the
    # four masked entries is 1.
    v = np.zeros((2, 4))
    u = np.zeros((2, 4))
    u[1] = 1.0
    mask = np.array([False, True])
    loss, _ = flowcore.masked_cfm_loss(v, u, mask)
    assert loss == pytest.approx(1.0)


def test_masked_loss_ignores_unmasked_bits():
    # Perturbing unmasked entries changes the loss by zero bits.
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        v = rng.normal(size=(n, 4))
        u = rng.normal(size=(n, 4))
        mask = rng.random(n) < 0.5
        base, _ = flowcore.masked_cfm_loss(v, u, mask)
        v2 = v.copy()
        u2 = u.copy()
        v2[~mask] += rng.normal(size=((~mask).sum(), 4)) * 100
        u2[~mask] -= rng.normal(size=((~mask).sum(), 4)) * 100
        after, _ = flowcore.masked_cfm_loss(v2, u2, mask)
        assert base == after  # bit-identical


def test_masked_loss_shape_errors():
    with pytest.raises(ShapeError):
        flowcore.masked_cfm_loss(np.zeros((2, 4)), np.zeros((3, 4)), np.zeros(2, bool))
    with pytest.raises(ShapeError):
        flowcore.masked_cfm_loss(np.zeros((2, 4)), np.zeros((2, 4)), np.zeros(3, bool))


def test_guided_field_identities():
    rng = np.random.default_rng(5)
    vc = rng.normal(size=(3, 4))
    vu = rng.normal(size=(3, 4))
    assert np.array_equal(flowcore.guided_field(vc, vu, 1.0), vc)
    assert np.array_equal(flowcore.guided_field(vc, vu, 0.0), vu)
    assert np.array_equal(flowcore.guided_field(vc, vc, 3.7), vc)
    # extrapolation permitted
    out = flowcore.guided_field(np.full((1, 1), 2.0), np.zeros((1, 1)), 1.5)
    assert out[0, 0] == pytest.approx(3.0)


def test_make_training_target_full_mask_zeroes_context():
    rng = np.random.default_rng(6)
    x1 = rng.normal(size=(5, 4))
    x_t, x_ctx, u, t = flowcore.make_training_target(x1, np.ones(5, bool), np.random.default_rng(0))
    assert np.array_equal(x_ctx, np.zeros_like(x1))
    assert 0.0 <= t <= 1.0


def test_make_training_target_unmasked_context_is_data():
    rng = np.random.default_rng(7)
    x1 = rng.normal(size=(5, 4))
    mask = np.array([True, False, False, True, False])
    _, x_ctx, _, _ = flowcore.make_training_target(x1, mask, np.random.default_rng(0))
    assert np.array_equal(x_ctx[~mask], x1[~mask])
    assert np.array_equal(x_ctx[mask], np.zeros((2, 4)))


def test_make_training_target_deterministic_under_seed():
    x1 = np.random.default_rng(8).normal(size=(5, 4))
    a = flowcore.make_training_target(x1, np.ones(5, bool), np.random.default_rng(123))
    b = flowcore.make_training_target(x1, np.ones(5, bool), np.random.default_rng(123))
    for u, v in zip(a[:3], b[:3]):
        assert np.array_equal(u, v)
    assert a[3] == b[3]


def test_training_target_consistency():
    # x_t and u drawn together satisfy the path/field equations exactly.
    rng = np.random.default_rng(9)
    x1 = rng.normal(size=(4, 4))
    gen = np.random.default_rng(11)
    x_t, _, u, t = flowcore.make_training_target(x1, np.ones(4, bool), gen, sigma_min=1e-3)
    # recover x0 from u = x1 - (1 - s) x0
    x0 = (x1 - u) / (1 - 1e-3)
    expect = flowcore.ot_interpolate(FlowSample(x0, x1, t, 1e-3))
    assert np.allclose(expect, x_t, atol=1e-12)
