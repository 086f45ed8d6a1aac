import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunedistill.errors import NumericError, ParameterError
from prunedistill.optim import (
    OneCycleConfig,
    OptState,
    adaptive_moment_step,
    one_cycle_lr,
    one_cycle_momentum,
    sgd_momentum_step,
    step_schedule_lr,
)

configs = st.builds(
    lambda lo, hi, mn, b0, b1, total, frac: OneCycleConfig(
        eta_initial=lo, eta_max=hi, eta_min=min(mn, lo), beta_initial=b0, beta_max=b1,
        warmup=max(1, min(total - 1, int(frac * total))), total=total),
    st.floats(1e-4, 0.05), st.floats(0.05, 1.0), st.floats(1e-6, 1e-3),
    st.floats(0, 0.99), st.floats(0, 0.99), st.integers(2, 500), st.floats(0, 1),
)


# schedules


def test_one_cycle_lr_endpoints():
    cfg = OneCycleConfig(0.01, 0.1, 1e-4, 0.95, 0.85, warmup=10, total=100)
    assert abs(one_cycle_lr(cfg, 0) - 0.01) <= 1e-12
    assert abs(one_cycle_lr(cfg, 10) - 0.1) <= 1e-12
    assert abs(one_cycle_lr(cfg, 100) - 1e-4) <= 1e-12


def test_one_cycle_lr_warmup_midpoint():
    cfg = OneCycleConfig(0.01, 0.1, 1e-4, warmup=10, total=100)
    assert abs(one_cycle_lr(cfg, 5) - 0.055) <= 1e-12


def test_one_cycle_momentum_endpoints():
    cfg = OneCycleConfig(0.01, 0.1, 1e-4, 0.95, 0.85, warmup=10, total=100)
    assert abs(one_cycle_momentum(cfg, 0) - 0.95) <= 1e-12
    assert abs(one_cycle_momentum(cfg, 10) - 0.85) <= 1e-12
    assert abs(one_cycle_momentum(cfg, 100) - 0.95) <= 1e-12


@pytest.mark.parametrize("i", [-1, 101])
def test_schedule_step_out_of_range(i):
    cfg = OneCycleConfig(warmup=10, total=100)
    with pytest.raises(ParameterError):
        one_cycle_lr(cfg, i)
    with pytest.raises(ParameterError):
        one_cycle_momentum(cfg, i)


@pytest.mark.parametrize("kwargs", [
    dict(warmup=0, total=10), dict(warmup=10, total=10), dict(eta_min=0.5),
    dict(eta_initial=0.2, eta_max=0.1), dict(beta_initial=1.0), dict(eta_initial=-0.01),
])
def test_one_cycle_config_invariants(kwargs):
    with pytest.raises(ParameterError):
        OneCycleConfig(**kwargs)


def test_for_steps_uses_ten_percent_warmup():
    cfg = OneCycleConfig.for_steps(200)
    assert (cfg.warmup, cfg.total) == (20, 200)
    assert OneCycleConfig.for_steps(3).warmup == 1


@settings(max_examples=200, deadline=None)
@given(configs)
def test_one_cycle_shape(cfg):
    lrs = [one_cycle_lr(cfg, i) for i in range(cfg.total + 1)]
    t = cfg.warmup
    assert all(a <= b + 1e-15 for a, b in zip(lrs[:t], lrs[1:t + 1]))
    assert all(a >= b - 1e-15 for a, b in zip(lrs[t:], lrs[t + 1:]))
    # both branches meet at T
    assert cfg.eta_min + (cfg.eta_max - cfg.eta_min) / 2 * (1 + math.cos(0)) == pytest.approx(lrs[t], abs=1e-15)
    assert one_cycle_momentum(cfg, 0) == pytest.approx(cfg.beta_initial, abs=1e-12)
    assert one_cycle_momentum(cfg, cfg.total) == pytest.approx(cfg.beta_initial, abs=1e-12)
    assert one_cycle_momentum(cfg, t) == pytest.approx(cfg.beta_max, abs=1e-12)


@pytest.mark.parametrize("epoch,expected", [(0, 0.1), (149, 0.1), (150, 0.01), (224, 0.01), (225, 0.001), (299, 0.001)])
def test_step_schedule(epoch, expected):
    assert step_schedule_lr(0.1, epoch, 300) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("epoch", [-1, 300])
def test_step_schedule_out_of_range(epoch):
    with pytest.raises(ParameterError):
        step_schedule_lr(0.1, epoch, 300)


# SGD


def test_sgd_vanilla():
    p = {"w": np.array([1.0, -2.0])}
    sgd_momentum_step(p, {"w": np.array([0.5, 0.25])}, OptState(), lr=0.1, momentum=0.0)
    np.testing.assert_allclose(p["w"], [0.95, -2.025], rtol=0, atol=1e-15)


def test_sgd_zero_grads_leave_params():
    p = {"w": np.array([1.0, -2.0])}
    state = OptState()
    for _ in range(5):
        sgd_momentum_step(p, {"w": np.zeros(2)}, state, lr=0.1, momentum=0.9)
    assert p["w"].tolist() == [1.0, -2.0]


def test_sgd_two_momentum_steps():
    g = np.array([0.3, -1.0])
    p = {"w": np.zeros(2)}
    state = OptState()
    for _ in range(2):
        sgd_momentum_step(p, {"w": g.copy()}, state, lr=1.0, momentum=0.9)
    np.testing.assert_allclose(p["w"], -g * (1 + 1.9), rtol=1e-15)


def test_sgd_weight_decay_is_coupled():
    p = {"w": np.array([2.0])}
    sgd_momentum_step(p, {"w": np.array([0.0])}, OptState(), lr=0.5, momentum=0.9, weight_decay=0.1)
    assert p["w"][0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0, abs=1e-15)


def test_sgd_nan_names_layer():
    with pytest.raises(NumericError, match="conv7.weight"):
        sgd_momentum_step({"conv7.weight": np.zeros(2)}, {"conv7.weight": np.array([np.nan, 0.0])},
                          OptState(), 0.1, 0.9)


def test_masked_entries_stay_zero():
    rng = np.random.default_rng(0)
    mask = (rng.random((4, 4)) < 0.5).astype(float)
    for step_fn in (lambda p, g, s: sgd_momentum_step(p, g, s, 0.1, 0.9, 1e-4, masks={"w": mask}),
                    lambda p, g, s: adaptive_moment_step(p, g, s, 0.01, masks={"w": mask})):
        p = {"w": rng.normal(size=(4, 4)) * mask}
        state = OptState()
        for _ in range(10):
            step_fn(p, {"w": rng.normal(size=(4, 4))}, state)
            assert np.all(p["w"][mask == 0] == 0.0)


# Adam


def test_adam_zero_grads_leave_params():
    p = {"w": np.array([1.0, -2.0])}
    state = OptState()
    for _ in range(10):
        adaptive_moment_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_has_magnitude_lr():
    p = {"w": np.array([0.0, 0.0])}
    adaptive_moment_step(p, {"w": np.array([3.0, -0.02])}, OptState(), lr=0.01)
    np.testing.assert_allclose(p["w"], [-0.01, 0.01], rtol=1e-5)


def test_adam_three_steps_hand_unrolled():
    grads = [0.5, -0.2, 0.8]
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    x = 1.0
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = {"w": np.array([1.0])}
    state = OptState()
    for g in grads:
        adaptive_moment_step(p, {"w": np.array([g])}, state, lr, b1, b2, eps)
    assert abs(p["w"][0] - x) < 1e-12
    assert state.step == 3


def test_optimizers_are_bit_reproducible():
    def run():
        rng = np.random.default_rng(9)
        p = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=3)}
        s1, s2 = OptState(), OptState()
        for _ in range(20):
            g = {k: rng.normal(size=v.shape) for k, v in p.items()}
            sgd_momentum_step(p, g, s1, 0.05, 0.9, 1e-4)
            adaptive_moment_step(p, g, s2, 0.001)
        return b"".join(v.tobytes() for v in p.values())

    assert run() == run()
