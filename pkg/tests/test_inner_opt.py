"""Inner optimizer accumulators and descent directions."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from starlab import inner_opt
from starlab.inner_opt import (
    GATE_SCALE,
    GATE_SENSITIVITY,
    InnerState,
    NominalConfig,
    adam_direction,
    aggmo_direction,
    hyperparam_controller_update,
    init_state,
    nominal_direction,
    update_state,
)


def _run(cfg, grads):
    state = init_state(cfg, len(grads[0]))
    for grad in grads:
        state = update_state(state, np.asarray(grad, dtype=float), cfg)
    return state


def test_config_validation():
    with pytest.raises(ValueError, match="non-empty"):
        NominalConfig(momentum_timescales=())
    with pytest.raises(ValueError, match="timescales"):
        NominalConfig(momentum_timescales=(0.9, 1.0))
    with pytest.raises(ValueError, match="adam_eps"):
        NominalConfig(adam_eps=0.0)
    with pytest.raises(ValueError, match="combine"):
        NominalConfig(combine="geometric")


def test_init_state_shapes():
    cfg = NominalConfig()
    state = init_state(cfg, 7)
    assert state.momenta.shape == (5, 7)
    assert state.second_moments.shape == (3, 7)
    assert state.step == 0


def test_update_recurrences_exact():
    cfg = NominalConfig(momentum_timescales=(0.5, 0.9), second_moment_timescales=(0.75,))
    g1 = np.array([1.0, -2.0])
    g2 = np.array([0.5, 4.0])
    state = _run(cfg, [g1, g2])
    # Two unrolled steps by hand.
    m_05 = 0.5 * (0.5 * g1) + 0.5 * g2
    m_09 = 0.9 * (0.1 * g1) + 0.1 * g2
    v = 0.75 * (0.25 * g1**2) + 0.25 * g2**2
    assert_allclose(state.momenta[0], m_05, rtol=1e-15)
    assert_allclose(state.momenta[1], m_09, rtol=1e-15)
    assert_allclose(state.second_moments[0], v, rtol=1e-15)
    assert state.step == 2


def test_update_is_pure():
    cfg = NominalConfig()
    state = init_state(cfg, 2)
    before = state.momenta.copy()
    update_state(state, np.ones(2), cfg)
    assert_array_equal(state.momenta, before)
    assert state.step == 0


def test_update_rejects_bad_grads():
    cfg = NominalConfig()
    state = init_state(cfg, 3)
    with pytest.raises(ValueError, match="finite"):
        update_state(state, np.array([1.0, np.nan, 0.0]), cfg)
    with pytest.raises(ValueError, match="length"):
        update_state(state, np.ones(4), cfg)


def test_adam_direction_matches_hand_rolled():
    cfg = NominalConfig(momentum_timescales=(0.9,), second_moment_timescales=(0.999,))
    grads = [np.array([0.3, -1.2, 2.0]), np.array([-0.7, 0.1, 0.4]), np.array([1.5, 0.0, -0.2])]
    state = _run(cfg, grads)
    m = np.zeros(3)
    v = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
    m_hat = m / (1 - 0.9**3)
    v_hat = v / (1 - 0.999**3)
    assert_allclose(adam_direction(state, cfg), m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-14)


def test_single_timescale_nominal_reduces_to_adam():
    cfg = NominalConfig(momentum_timescales=(0.9,), second_moment_timescales=(0.99,))
    state = _run(cfg, [np.array([1.0, -0.5]), np.array([0.2, 0.8])])
    assert_array_equal(nominal_direction(state, cfg), adam_direction(state, cfg))


def test_aggmo_direction_averages_corrected_momenta():
    cfg = NominalConfig(momentum_timescales=(0.0, 0.9), second_moment_timescales=(0.9,))
    g = np.array([2.0, -4.0])
    state = _run(cfg, [g])
    # After one step each corrected momentum equals the gradient itself:
    # (1-c) g / (1 - c^1) = g. Their average is again g.
    assert_allclose(aggmo_direction(state, cfg), g, rtol=1e-14)


def test_constant_gradient_fixed_point():
    # Feeding the same gradient forever drives every corrected momentum to g
    # and the corrected second moment to g^2, so the direction approaches
    # g / (|g| + eps), i.e. the sign vector.
    cfg = NominalConfig()
    g = np.array([0.25, -3.0])
    state = _run(cfg, [g] * 4000)
    assert_allclose(nominal_direction(state, cfg), np.sign(g), atol=1e-4)


def test_half_sum_combine():
    cfg_half = NominalConfig(combine="half_sum")
    cfg_def = NominalConfig()
    grads = [np.array([0.4, 1.1, -0.3]), np.array([-0.9, 0.2, 0.6])]
    state = _run(cfg_half, grads)
    expect = 0.5 * adam_direction(state, cfg_half) + 0.5 * aggmo_direction(state, cfg_half)
    assert_array_equal(nominal_direction(state, cfg_half), expect)
    # Default mode on identical state differs (multi-timescale aggregation).
    assert not np.allclose(nominal_direction(state, cfg_def), expect)


def test_directions_undefined_before_first_step():
    cfg = NominalConfig()
    state = init_state(cfg, 2)
    for fn in (adam_direction, aggmo_direction, nominal_direction):
        with pytest.raises(ValueError, match="step 0"):
            fn(state, cfg)


def test_controller_scales_nominal_exponentially():
    cfg = NominalConfig()
    state = _run(cfg, [np.array([1.0, -2.0]), np.array([0.3, 0.9])])
    base = nominal_direction(state, cfg)
    head = np.array([0.0, 100.0])
    out = hyperparam_controller_update(state, cfg, head)
    assert_allclose(out[0], GATE_SCALE * base[0], rtol=1e-14)
    assert_allclose(out[1], GATE_SCALE * np.exp(GATE_SENSITIVITY * 100.0) * base[1], rtol=1e-14)
    # Scalar head broadcasts.
    assert_allclose(
        hyperparam_controller_update(state, cfg, 0.0), GATE_SCALE * base, rtol=1e-14
    )


def test_controller_gate_never_flips_sign():
    cfg = NominalConfig()
    state = _run(cfg, [np.array([0.5, -0.5])])
    out = hyperparam_controller_update(state, cfg, np.array([-1e4, 1e4]))
    base = nominal_direction(state, cfg)
    assert np.all(np.sign(out) == np.sign(base))


def test_correction_factor_cache_consistency():
    # The cache keys on (timescales, step); hitting the same key twice must
    # return the same values as a fresh computation.
    scales = (0.9, 0.99)
    a = inner_opt._correction_factors(scales, 3)
    b = inner_opt._correction_factors(scales, 3)
    assert a is b
    assert_allclose(a, 1.0 - np.array(scales) ** 3, rtol=1e-15)
    assert_allclose(
        inner_opt._correction_factors((0.5,), 2), np.array([0.75]), rtol=1e-15
    )
